#include <gtest/gtest.h>

#include <cmath>

#include "pmeta/autodiff.hpp"
#include "pmeta/error.hpp"
#include "pmeta/rng.hpp"

using namespace pmeta;
using namespace pmeta::ad;

namespace {

Var mlp3(std::span<const Var> in) {
  // in: x [4,3], w1 [3,5], w2 [5,4], w3 [4,2]
  Var h = relu(matmul(in[0], in[1]));
  h = relu(matmul(h, in[2]));
  return matmul(h, in[3]);
}

double eval_scalar(const Record::Program& program, std::vector<Tensor> inputs, std::size_t slot, const Tensor& probe) {
  NoGradGuard guard;
  inputs[slot] = probe;
  std::vector<Var> vars;
  for (auto& t : inputs) vars.push_back(constant(t));
  return program(vars).value().item();
}

}  // namespace

TEST(Forward, TrivialPrograms) {
  Record mm([](std::span<const Var> in) { return matmul(in[0], in[1]); }, {{1, 1}, {1, 1}});
  std::vector<Tensor> args{Tensor({1, 1}, {2.0}), Tensor({1, 1}, {3.0})};
  EXPECT_EQ(mm.forward(args)[0], 6.0);

  Record id([](std::span<const Var> in) { return in[0]; }, {{3}});
  std::vector<Tensor> x{Tensor::from({1.5, -2.0, 7.0})};
  EXPECT_TRUE(id.forward(x).identical(x[0]));

  Record r([](std::span<const Var> in) { return relu(in[0]); }, {{3}});
  std::vector<Tensor> rx{Tensor::from({-1.0, 0.0, 2.0})};
  EXPECT_TRUE(r.forward(rx).identical(Tensor::from({0.0, 0.0, 2.0})));
}

TEST(Forward, ShapeMismatchAndGradBeforeForward) {
  Record r([](std::span<const Var> in) { return relu(in[0]); }, {{3}});
  EXPECT_THROW(r.grad(Tensor::from({1, 1, 1})), Error);
  std::vector<Tensor> bad{Tensor::from({1.0, 2.0})};
  EXPECT_THROW(r.forward(bad), Error);
  std::vector<Tensor> ok{Tensor::from({1.0, 2.0, 3.0})};
  r.forward(ok);
  EXPECT_THROW(r.grad(Tensor::from({1.0})), Error);
}

TEST(Forward, NonFiniteIsAnError) {
  Record r([](std::span<const Var> in) { return log(in[0]); }, {{1}});
  std::vector<Tensor> x{Tensor::from({-1.0})};
  EXPECT_THROW(r.forward(x), Error);
}

TEST(Grad, ProductRule) {
  Record mm([](std::span<const Var> in) { return matmul(in[0], in[1]); }, {{1, 1}, {1, 1}});
  std::vector<Tensor> args{Tensor({1, 1}, {2.0}), Tensor({1, 1}, {3.0})};
  mm.forward(args);
  auto g = mm.grad(Tensor({1, 1}, {1.0}));
  EXPECT_EQ(g[0][0], 3.0);  // d/dw
  EXPECT_EQ(g[1][0], 2.0);  // d/dx
}

TEST(Grad, ReluGate) {
  Record r([](std::span<const Var> in) { return relu(in[0]); }, {{2}});
  std::vector<Tensor> x{Tensor::from({-1.0, 2.0})};
  r.forward(x);
  EXPECT_TRUE(r.grad(Tensor::from({1.0, 1.0}))[0].identical(Tensor::from({0.0, 1.0})));
}

TEST(Grad, RandomMlpMatchesFiniteDifferences) {
  Rng rng(7);
  const std::vector<Shape> slots{{4, 3}, {3, 5}, {5, 4}, {4, 2}};
  std::vector<Tensor> inputs;
  for (const auto& s : slots) inputs.push_back(rng.normal_tensor(s, 1.0));
  Record::Program program = [](std::span<const Var> in) {
    Var y = mlp3(in);
    return sum(mul(y, y));
  };
  Record rec(program, slots);
  rec.forward(inputs);
  auto g = rec.grad(Tensor::scalar(1.0));
  for (std::size_t s = 0; s < slots.size(); ++s) {
    Tensor fd = finite_diff_oracle([&](const Tensor& p) { return eval_scalar(program, inputs, s, p); }, inputs[s], 1e-6);
    EXPECT_LE(rel_error(g[s], fd), 1e-5) << "slot " << s;
  }
}

TEST(Grad, ReplayIsBitwiseDeterministic) {
  Rng rng(3);
  const std::vector<Shape> slots{{4, 3}, {3, 5}, {5, 4}, {4, 2}};
  std::vector<Tensor> inputs;
  for (const auto& s : slots) inputs.push_back(rng.normal_tensor(s, 1.0));
  Record rec(mlp3, slots);
  const Tensor first = rec.forward(inputs);
  const Tensor second = rec.forward(inputs);
  EXPECT_TRUE(first.identical(second));
}

TEST(Grad, UnreachedInputsGetZeros) {
  Var a = leaf(Tensor::from({1.0, 2.0}));
  Var b = leaf(Tensor::from({3.0}));
  auto g = grad(sum(a), std::vector<Var>{a, b});
  EXPECT_TRUE(g[1].value().identical(Tensor::from({0.0})));
}

TEST(Grad, SecondDerivativeOfCube) {
  Var x = leaf(Tensor::from({1.5}));
  Var y = sum(pow_scalar(x, 3.0));
  auto g1 = grad(y, std::vector<Var>{x}, {}, true);
  auto g2 = grad(sum(g1[0]), std::vector<Var>{x});
  EXPECT_NEAR(g1[0].value()[0], 3 * 1.5 * 1.5, 1e-12);
  EXPECT_NEAR(g2[0].value()[0], 6 * 1.5, 1e-12);
}

TEST(Grad, ConvDoubleBackwardMatchesFiniteDifferences) {
  // h(w) = sum(c ⊙ d/dx [sum(conv(x,w) ⊙ r)]) exercises the VJPs of the
  // input-gradient op; its gradient in w is compared against FD.
  Rng rng(11);
  const kernels::ConvGeometry geo{3, 2, 1};
  const Tensor x = rng.normal_tensor({2, 3, 5, 5}, 1.0);
  const Tensor r = rng.normal_tensor({2, 2, 3, 3}, 1.0);
  const Tensor c = rng.normal_tensor({2, 3, 5, 5}, 1.0);
  auto h = [&](const Var& w) {
    Var xv = leaf(x);
    Var y = sum(mul(conv2d(xv, w, geo), constant(r)));
    Var gx = grad(y, std::vector<Var>{xv}, {}, true)[0];
    Var gw = grad(y, std::vector<Var>{w}, {}, true)[0];
    return add(sum(mul(gx, constant(c))), sum(mul(gw, gw)));
  };
  const Tensor w0 = rng.normal_tensor({2, 3, 3, 3}, 1.0);
  Var w = leaf(w0);
  const Tensor g = grad(h(w), std::vector<Var>{w})[0].value();
  Tensor fd = finite_diff_oracle([&](const Tensor& p) { return h(leaf(p)).value().item(); }, w0, 1e-6);
  EXPECT_LE(rel_error(g, fd), 1e-5);
}

TEST(GradOfGrad, EmptyInnerLoopIsQueryGradient) {
  Record::Program loss = [](std::span<const Var> w) { return sum(mul(w[0], w[0])); };
  Record support(loss, {{1}}, Depth::second), query(loss, {{1}});
  std::vector<Tensor> w{Tensor::from({1.7})};
  auto r = grad_of_grad(support, query, w, 0, {});
  EXPECT_EQ(r.params[0][0], 2 * 1.7);
  EXPECT_TRUE(r.step_sizes.empty());
}

TEST(GradOfGrad, ScalarQuadraticClosedForm) {
  Record::Program loss = [](std::span<const Var> w) { return sum(mul(w[0], w[0])); };
  Record support(loss, {{1}}, Depth::second), query(loss, {{1}});
  const double w0 = 0.9;
  std::vector<Tensor> w{Tensor::from({w0})};
  const std::vector<double> alpha{0.1};
  auto r = grad_of_grad(support, query, w, 1, alpha);
  EXPECT_NEAR(r.params[0][0], 1.28 * w0, 1e-14);
  // d/dα (w - 2αw)^2 = 2(w-2αw)(-2w)
  EXPECT_NEAR(r.step_sizes[0][0], 2 * 0.8 * w0 * (-2 * w0), 1e-14);
}

TEST(GradOfGrad, ErrorsOnDepthOneAndNegativeK) {
  Record::Program loss = [](std::span<const Var> w) { return sum(mul(w[0], w[0])); };
  Record shallow(loss, {{1}}), deep(loss, {{1}}, Depth::second);
  std::vector<Tensor> w{Tensor::from({1.0})};
  const std::vector<double> alpha{0.1};
  EXPECT_THROW(grad_of_grad(shallow, shallow, w, 1, alpha), Error);
  EXPECT_NO_THROW(grad_of_grad(shallow, shallow, w, 1, alpha, true));
  EXPECT_THROW(grad_of_grad(deep, deep, w, -1, {}), Error);
}

namespace {

struct TinyMetaProblem {
  Tensor xs, ys, xq, yq;
  std::vector<Shape> slots{{1, 6}, {1, 6}, {6, 1}, {1, 1}};
  std::vector<Tensor> init;

  explicit TinyMetaProblem(std::uint64_t seed) {
    Rng rng(seed);
    xs = rng.uniform_tensor({5, 1}, -2, 2);
    xq = rng.uniform_tensor({7, 1}, -2, 2);
    ys = Tensor({5, 1});
    yq = Tensor({7, 1});
    for (std::size_t i = 0; i < 5; ++i) ys[i] = std::sin(xs[i]);
    for (std::size_t i = 0; i < 7; ++i) yq[i] = std::sin(xq[i]);
    for (const auto& s : slots) init.push_back(rng.normal_tensor(s, 0.7));
  }

  static Var net(const Tensor& x, std::span<const Var> w) {
    const std::size_t n = x.dim(0);
    Var h = add(matmul(constant(x), w[0]), matmul(constant(Tensor({n, 1}, 1.0)), w[1]));
    h = exp(scale(mul(h, h), -0.5));  // smooth activation so FD is well-conditioned
    return add(matmul(h, w[2]), matmul(constant(Tensor({n, 1}, 1.0)), w[3]));
  }

  Record::Program support() const {
    return [this](std::span<const Var> w) { return mse_loss(net(xs, w), ys); };
  }
  Record::Program query() const {
    return [this](std::span<const Var> w) { return mse_loss(net(xq, w), yq); };
  }

  // Fully unrolled objective evaluated without autodiff trajectory tracking.
  double unrolled(std::vector<Tensor> w, std::span<const double> alpha, std::size_t K) const {
    for (std::size_t k = 0; k < K; ++k) {
      std::vector<Var> vars;
      for (auto& t : w) vars.push_back(leaf(t));
      auto g = grad(support()(vars), vars);
      for (std::size_t p = 0; p < w.size(); ++p) {
        const double a = alpha.size() == K ? alpha[k] : alpha[k * w.size() + p];
        w[p] = w[p] - g[p].value() * a;
      }
    }
    NoGradGuard guard;
    std::vector<Var> vars;
    for (auto& t : w) vars.push_back(constant(t));
    return query()(vars).value().item();
  }
};

}  // namespace

TEST(GradOfGrad, TwoStepMlpMatchesUnrolledFiniteDifferences) {
  TinyMetaProblem prob(21);
  Record support(prob.support(), prob.slots, Depth::second), query(prob.query(), prob.slots);
  std::vector<double> alpha{0.3, 0.2, 0.25, 0.1, 0.15, 0.3, 0.05, 0.2};
  auto r = grad_of_grad(support, query, prob.init, 2, alpha);
  for (std::size_t p = 0; p < prob.init.size(); ++p) {
    Tensor fd = finite_diff_oracle(
        [&](const Tensor& t) {
          auto w = prob.init;
          w[p] = t;
          return prob.unrolled(w, alpha, 2);
        },
        prob.init[p], 1e-6);
    EXPECT_LE(rel_error(r.params[p], fd), 1e-4) << "slot " << p;
  }
  Tensor fd_alpha = finite_diff_oracle(
      [&](const Tensor& a) { return prob.unrolled(prob.init, a.values(), 2); }, Tensor({8}, alpha), 1e-6);
  EXPECT_LE(rel_error(r.step_sizes[0].reshaped({8}), fd_alpha), 1e-4);
}

TEST(GradOfGrad, FirstOrderEqualsQueryGradientAtAdaptedPoint) {
  TinyMetaProblem prob(5);
  Record support(prob.support(), prob.slots), query(prob.query(), prob.slots);
  const std::vector<double> alpha{0.2, 0.1};
  auto r = grad_of_grad(support, query, prob.init, 2, alpha, true);

  std::vector<Tensor> w = prob.init;
  for (std::size_t k = 0; k < 2; ++k) {
    std::vector<Var> vars;
    for (auto& t : w) vars.push_back(leaf(t));
    auto g = grad(support.program()(vars), vars);
    for (std::size_t p = 0; p < w.size(); ++p) w[p] = w[p] - g[p].value() * alpha[k];
  }
  std::vector<Var> vars;
  for (auto& t : w) vars.push_back(leaf(t));
  auto gq = grad(query.program()(vars), vars);
  for (std::size_t p = 0; p < w.size(); ++p) EXPECT_TRUE(r.params[p].identical(gq[p].value())) << "slot " << p;
}

TEST(FiniteDiff, Basics) {
  Tensor g = finite_diff_oracle([](const Tensor& x) { return x[0] * x[0]; }, Tensor::from({3.0}), 1e-6);
  EXPECT_NEAR(g[0], 6.0, 1e-6);
  Tensor s = finite_diff_oracle([](const Tensor& x) { return pmeta::sum(x); }, Tensor::from({1.0, -4.0, 9.0}), 1e-3);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s[i], 1.0, 1e-9);
  EXPECT_THROW(finite_diff_oracle([](const Tensor&) { return 0.0; }, Tensor::from({1.0}), 0.0), Error);
  EXPECT_THROW(finite_diff_oracle([](const Tensor&) { return NAN; }, Tensor::from({1.0}), 1e-3), Error);
}
