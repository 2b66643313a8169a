#include <gtest/gtest.h>

#include <cmath>

#include "pmeta/error.hpp"
#include "pmeta/meta_train.hpp"
#include "pmeta/rng.hpp"
#include "pmeta/tasks.hpp"

using namespace pmeta;

namespace {

NetworkSpec tiny_mlp() {
  return NetworkSpec::parse(
      "input channels=1\n"
      "fully_connected in=1 out=8\n"
      "relu\n"
      "fully_connected in=8 out=1\n");
}

std::vector<Task> sinusoid_batch(std::uint64_t seed, std::size_t n, std::size_t shots = 5) {
  SinusoidTasks src(seed, shots, 10);
  std::vector<Task> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(src.next());
  return out;
}

MetaTrainConfig small_config(Mode mode) {
  MetaTrainConfig c;
  c.mode = mode;
  c.inner_steps = 2;
  c.task_batch = 3;
  c.epochs = 5;
  c.iterations_per_epoch = 3;
  c.validation_tasks = 4;
  c.alpha0 = 0.02;
  c.lr = 0.01;
  c.seed = 77;
  return c;
}

MetaTrainer make_trainer(const MetaTrainConfig& cfg, const NetworkSpec& net) {
  return MetaTrainer(net, cfg, std::make_unique<SinusoidTasks>(5, 5, 10), sinusoid_batch(99, cfg.validation_tasks),
                     LossKind::mse);
}

double rel_norm(std::span<const double> got, std::span<const double> want) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    num += (got[i] - want[i]) * (got[i] - want[i]);
    den += want[i] * want[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

void expect_identical_states(const MetaState& a, const MetaState& b) {
  ASSERT_EQ(a.weights.size(), b.weights.size());
  for (std::size_t i = 0; i < a.weights.size(); ++i) EXPECT_TRUE(a.weights[i].identical(b.weights[i])) << i;
  EXPECT_TRUE(a.alpha.identical(b.alpha));
}

}  // namespace

TEST(InnerLoop, ScalarStepByHand) {
  // pred = w x + b with w = 1, b = 0, x = 1, y = 0: d/dw (pred - y)^2 = 2.
  const NetworkSpec net = NetworkSpec::parse("input channels=1\nfully_connected in=1 out=1\n");
  InnerLoop loop;
  loop.net = &net;
  loop.alpha = {ad::constant(Tensor::scalar(0.01))};
  const std::vector<ad::Var> w{ad::leaf(Tensor({1, 1}, 1.0)), ad::leaf(Tensor({1}, 0.0))};
  const auto next = loop.step(w, Tensor({1, 1}, 1.0), Tensor({1, 1}, 0.0), 0);
  EXPECT_DOUBLE_EQ(next[0].value()[0], 0.98);
  EXPECT_DOUBLE_EQ(next[1].value()[0], -0.02);
}

TEST(InnerLoop, ZeroStepSizeFreezesLayer) {
  const NetworkSpec net = tiny_mlp();
  MetaTrainConfig cfg = small_config(Mode::anil);
  const MetaState s = MetaState::init(net, cfg);
  InnerLoop loop;
  loop.net = &net;
  for (double a : s.alpha.data()) loop.alpha.push_back(ad::constant(Tensor::scalar(a)));
  std::vector<ad::Var> w;
  for (const Tensor& t : s.weights) w.push_back(ad::leaf(t));
  const Task task = sinusoid_batch(3, 1)[0];
  const auto next = loop.step(w, task.support_x, task.support_y, 0);
  EXPECT_TRUE(next[0].value().identical(s.weights[0]));
  EXPECT_TRUE(next[1].value().identical(s.weights[1]));
  EXPECT_FALSE(next[2].value().identical(s.weights[2]));
}

TEST(MetaGradient, TwoStepMatchesFiniteDifferencesOfUnrolledObjective) {
  const NetworkSpec net = tiny_mlp();
  MetaTrainConfig cfg = small_config(Mode::maml_pp);
  cfg.threads = 1;
  MetaState s = MetaState::init(net, cfg);
  Rng rng(4);
  for (double& a : s.alpha.data()) a = rng.uniform(0.01, 0.05);
  const auto tasks = sinusoid_batch(12, 2);
  const MetaGradient g = meta_gradient(net, cfg, s, tasks, LossKind::mse, kWeights | kAlpha);
  EXPECT_NEAR(g.loss, meta_objective(net, cfg, s, tasks, LossKind::mse), 1e-12 * std::abs(g.loss));

  const double h = 1e-6;
  for (std::size_t p = 0; p < s.weights.size(); ++p) {
    std::vector<double> fd(s.weights[p].size());
    for (std::size_t e = 0; e < fd.size(); ++e) {
      MetaState plus = s, minus = s;
      plus.weights[p][e] += h;
      minus.weights[p][e] -= h;
      fd[e] = (meta_objective(net, cfg, plus, tasks, LossKind::mse) -
               meta_objective(net, cfg, minus, tasks, LossKind::mse)) /
              (2 * h);
    }
    EXPECT_LE(rel_norm(g.weights[p].data(), fd), 1e-4) << "weights " << p;
  }
  std::vector<double> fd(s.alpha.size());
  for (std::size_t e = 0; e < fd.size(); ++e) {
    MetaState plus = s, minus = s;
    plus.alpha[e] += h;
    minus.alpha[e] -= h;
    fd[e] = (meta_objective(net, cfg, plus, tasks, LossKind::mse) - meta_objective(net, cfg, minus, tasks, LossKind::mse)) /
            (2 * h);
  }
  EXPECT_LE(rel_norm(g.alpha.data(), fd), 1e-4);
}

TEST(MetaGradient, FirstOrderDropsSecondDerivativeTerms) {
  const NetworkSpec net = tiny_mlp();
  MetaTrainConfig cfg = small_config(Mode::maml);
  const MetaState s = MetaState::init(net, cfg);
  const auto tasks = sinusoid_batch(8, 2);
  const MetaGradient second = meta_gradient(net, cfg, s, tasks, LossKind::mse, kWeights);
  cfg.first_order = true;
  const MetaGradient first = meta_gradient(net, cfg, s, tasks, LossKind::mse, kWeights);
  EXPECT_EQ(first.loss, second.loss);
  bool differs = false;
  for (std::size_t p = 0; p < s.weights.size(); ++p) differs = differs || !first.weights[p].identical(second.weights[p]);
  EXPECT_TRUE(differs);
}

TEST(MetaState, ModeRules) {
  const NetworkSpec net = tiny_mlp();
  auto alpha_of = [&](Mode m) { return MetaState::init(net, small_config(m)).alpha; };
  const Tensor anil = alpha_of(Mode::anil), boil = alpha_of(Mode::boil), maml = alpha_of(Mode::maml);
  EXPECT_EQ(anil.values(), (std::vector<double>{0, 0, 0.02, 0.02}));
  EXPECT_EQ(boil.values(), (std::vector<double>{0.02, 0.02, 0, 0}));
  EXPECT_EQ(maml.values(), (std::vector<double>{0.02, 0.02, 0.02, 0.02}));

  MetaTrainConfig c;
  c.mode = Mode::pmeta;
  EXPECT_TRUE(c.uses_attention());
  EXPECT_EQ(c.effective_lambda(), c.lambda);
  c.uniform_attention = true;
  EXPECT_FALSE(c.uses_attention());
  c.mode = Mode::maml_pp;
  EXPECT_TRUE(c.learns_alpha());
  EXPECT_EQ(c.effective_lambda(), 0.0);
  c.mode = Mode::anil;
  EXPECT_FALSE(c.learns_alpha());

  for (Mode m : {Mode::pmeta, Mode::maml, Mode::maml_pp, Mode::anil, Mode::boil})
    EXPECT_EQ(parse_mode(mode_name(m)), m);
  EXPECT_THROW(parse_mode("reptile"), Error);
}

TEST(MetaState, WeightsDoNotDependOnAttention) {
  const NetworkSpec net = tiny_mlp();
  MetaTrainConfig a = small_config(Mode::pmeta), b = small_config(Mode::maml);
  expect_identical_states(MetaState{MetaState::init(net, a).weights, {}, {}},
                          MetaState{MetaState::init(net, b).weights, {}, {}});
}

TEST(MetaTrainer, LassoDrivesStepSizesToZero) {
  const NetworkSpec net = tiny_mlp();
  MetaTrainConfig cfg = small_config(Mode::pmeta);
  cfg.lambda = 1e6;
  cfg.alpha0 = 0.005;
  cfg.lr = 0.02;
  MetaTrainer t = make_trainer(cfg, net);
  t.meta_step(sinusoid_batch(1, 3));
  for (double a : t.state().alpha.data()) EXPECT_EQ(a, 0.0);

  cfg.mode = Mode::maml_pp;
  MetaTrainer u = make_trainer(cfg, net);
  u.meta_step(sinusoid_batch(1, 3));
  std::size_t nonzero = 0;
  for (double a : u.state().alpha.data()) nonzero += a > 0.0;
  EXPECT_GT(nonzero, 0u);
}

TEST(MetaTrainer, StepSizesStayNonNegative) {
  const NetworkSpec net = tiny_mlp();
  MetaTrainConfig cfg = small_config(Mode::pmeta);
  cfg.lambda = 0.05;
  MetaTrainer t = make_trainer(cfg, net);
  t.run();
  for (double a : t.state().alpha.data()) EXPECT_GE(a, 0.0);
  for (const auto& m : t.history()) {
    EXPECT_GE(m.alpha_sparsity, 0.0);
    EXPECT_LE(m.alpha_sparsity, 1.0);
    EXPECT_LE(m.mean_mu_fw, 1.0);
  }
}

TEST(MetaTrainer, DeterministicAcrossRunsAndThreadCounts) {
  const NetworkSpec net = tiny_mlp();
  MetaTrainConfig cfg = small_config(Mode::pmeta);
  cfg.epochs = 2;
  cfg.threads = 1;
  MetaTrainer a = make_trainer(cfg, net);
  a.run();
  cfg.threads = 4;
  MetaTrainer b = make_trainer(cfg, net);
  b.run();
  expect_identical_states(a.state(), b.state());
  const auto fa = a.state().attention.flatten(), fb = b.state().attention.flatten();
  ASSERT_EQ(fa.size(), fb.size());
  for (std::size_t i = 0; i < fa.size(); ++i) EXPECT_TRUE(fa[i].identical(fb[i]));
  for (std::size_t e = 0; e < 2; ++e) EXPECT_EQ(a.history()[e].mean_query_loss, b.history()[e].mean_query_loss);
}

TEST(MetaTrainer, UniformAttentionWithoutPenaltyIsMamlPlusPlus) {
  const NetworkSpec net = tiny_mlp();
  MetaTrainConfig p = small_config(Mode::pmeta);
  p.uniform_attention = true;
  p.lambda = 0.0;
  p.rho_fw = p.rho_bw = 0.0;
  MetaTrainConfig m = small_config(Mode::maml_pp);
  MetaTrainer a = make_trainer(p, net), b = make_trainer(m, net);
  a.run();
  b.run();
  ASSERT_EQ(a.history().size(), 5u);
  for (std::size_t e = 0; e < 5; ++e) {
    EXPECT_EQ(a.history()[e].mean_query_loss, b.history()[e].mean_query_loss);
    EXPECT_EQ(a.history()[e].validation_metric, b.history()[e].validation_metric);
  }
  expect_identical_states(a.state(), b.state());
}

TEST(MetaTrainer, BestPlanHasTheLowestValidationLoss) {
  const NetworkSpec net = tiny_mlp();
  MetaTrainConfig cfg = small_config(Mode::maml);
  MetaTrainer t = make_trainer(cfg, net);
  const AdaptPlan best = t.run();
  double lowest = t.history()[0].validation_metric;
  for (const auto& m : t.history()) lowest = std::min(lowest, m.validation_metric);
  EXPECT_EQ(t.validation_loss(best), lowest);
}

TEST(MetaTrainer, MetricsCsv) {
  EXPECT_EQ(metrics_csv_header(), "epoch,mean_query_loss,validation_metric,alpha_sparsity,mean_mu_fw,mean_mu_bw");
  EpochMetrics m;
  m.epoch = 3;
  m.mean_query_loss = 0.5;
  EXPECT_EQ(metrics_csv_row(m).substr(0, 6), "3,0.5,");
}

TEST(MetaTrainConfig, Validation) {
  MetaTrainConfig c;
  c.inner_steps = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.lr = -1;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.rho_fw = 1.0;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_THROW(MetaState::init(NetworkSpec::preset("ResNet12-cost-only"), MetaTrainConfig{}), Error);
}
