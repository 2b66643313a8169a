#include "pmeta/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <unordered_map>

#include "pmeta/error.hpp"

namespace pmeta::ad {

namespace {

thread_local bool g_grad_enabled = true;

using Backward = std::function<std::vector<Var>(const Var&)>;

Var make(Tensor value, std::vector<Var> inputs, Backward backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  const bool need = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                                                  [](const Var& v) { return v.requires_grad(); });
  if (need) {
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    node->requires_grad = true;
  }
  return Var(std::move(node));
}

void same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), ErrorKind::shape,
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Shape prefix_shape(const Shape& s) {
  Shape p(s.begin(), s.end() - 1);
  if (p.empty()) p = {1};
  return p;
}

Shape suffix_shape(const Shape& s) {
  Shape p(s.begin() + 1, s.end());
  if (p.empty()) p = {1};
  return p;
}

// Broadcast a {1} tensor to `shape`; adjoint is sum().
Var fill(const Var& s, const Shape& shape) {
  require(s.value().size() == 1, ErrorKind::shape, "fill expects a scalar");
  return make(Tensor(shape, s.value()[0]), {s}, [](const Var& g) { return std::vector<Var>{sum(g)}; });
}

}  // namespace

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

Var detach(const Var& v) { return constant(v.value()); }

std::vector<Var> grad(const Var& output, std::span<const Var> wrt, const Var& seed, bool create_graph) {
  require(output.defined(), ErrorKind::state, "grad of an undefined value");
  Var seed_var = seed.defined() ? seed : constant(Tensor(output.shape(), 1.0));
  require(seed_var.shape() == output.shape(), ErrorKind::shape,
          "grad: seed shape " + shape_str(seed_var.shape()) + " does not match output " + shape_str(output.shape()));

  // Iterative post-order DFS over nodes that require grad.
  std::vector<Node*> order;
  std::unordered_map<Node*, bool> visited;
  if (output.requires_grad()) {
    std::vector<std::pair<Node*, std::size_t>> stack{{output.node(), 0}};
    visited[output.node()] = true;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node* child = node->inputs[next++].node();
        if (child && child->requires_grad && !visited[child]) {
          visited[child] = true;
          stack.emplace_back(child, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::unordered_map<Node*, Var> grads;
  {
    std::optional<NoGradGuard> guard;
    if (!create_graph) guard.emplace();
    grads[output.node()] = seed_var;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      auto found = grads.find(node);
      if (found == grads.end() || !node->backward) continue;
      const Var g = found->second;
      std::vector<Var> in_grads = node->backward(g);
      for (std::size_t i = 0; i < node->inputs.size(); ++i) {
        const Var& input = node->inputs[i];
        if (!input.requires_grad() || i >= in_grads.size() || !in_grads[i].defined()) continue;
        auto slot = grads.find(input.node());
        if (slot == grads.end()) {
          grads.emplace(input.node(), in_grads[i]);
        } else {
          slot->second = add(slot->second, in_grads[i]);
        }
      }
    }
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const Var& w : wrt) {
    auto found = grads.find(w.node());
    if (found == grads.end()) {
      result.push_back(constant(Tensor(w.shape(), 0.0)));
    } else if (create_graph) {
      result.push_back(found->second);
    } else {
      result.push_back(detach(found->second));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  same_shape(a, b, "add");
  return make(a.value() + b.value(), {a, b}, [](const Var& g) { return std::vector<Var>{g, g}; });
}

Var sub(const Var& a, const Var& b) {
  same_shape(a, b, "sub");
  return make(a.value() - b.value(), {a, b}, [](const Var& g) { return std::vector<Var>{g, neg(g)}; });
}

Var mul(const Var& a, const Var& b) {
  same_shape(a, b, "mul");
  return make(a.value() * b.value(), {a, b}, [a, b](const Var& g) {
    return std::vector<Var>{a.requires_grad() ? mul(g, b) : Var{}, b.requires_grad() ? mul(g, a) : Var{}};
  });
}

Var neg(const Var& a) {
  return make(a.value() * -1.0, {a}, [](const Var& g) { return std::vector<Var>{neg(g)}; });
}

Var scale(const Var& a, double s) {
  return make(a.value() * s, {a}, [s](const Var& g) { return std::vector<Var>{scale(g, s)}; });
}

Var add_scalar(const Var& a, double s) {
  Tensor v = a.value();
  for (auto& x : v.data()) x += s;
  return make(std::move(v), {a}, [](const Var& g) { return std::vector<Var>{g}; });
}

Var pow_scalar(const Var& a, double p) {
  Tensor v = a.value();
  for (auto& x : v.data()) x = std::pow(x, p);
  return make(std::move(v), {a}, [a, p](const Var& g) {
    return std::vector<Var>{mul(g, scale(pow_scalar(a, p - 1.0), p))};
  });
}

Var exp(const Var& a) {
  Tensor v = a.value();
  for (auto& x : v.data()) x = std::exp(x);
  return make(std::move(v), {a}, [a](const Var& g) { return std::vector<Var>{mul(g, exp(a))}; });
}

Var log(const Var& a) {
  Tensor v = a.value();
  for (auto& x : v.data()) x = std::log(x);
  return make(std::move(v), {a}, [a](const Var& g) { return std::vector<Var>{mul(g, pow_scalar(a, -1.0))}; });
}

Var relu(const Var& a) {
  Tensor mask(a.shape());
  Tensor v(a.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const bool on = a.value()[i] > 0.0;
    mask[i] = on ? 1.0 : 0.0;
    v[i] = on ? a.value()[i] : 0.0;
  }
  return make(std::move(v), {a}, [mask](const Var& g) { return std::vector<Var>{mul_const(g, mask)}; });
}

Var mul_const(const Var& a, const Tensor& mask) {
  require(a.shape() == mask.shape(), ErrorKind::shape, "mul_const: shape mismatch");
  return make(a.value() * mask, {a}, [mask](const Var& g) { return std::vector<Var>{mul_const(g, mask)}; });
}

Var mul_scalar(const Var& a, const Var& s) {
  require(s.value().size() == 1, ErrorKind::shape, "mul_scalar expects a single-element factor");
  return make(a.value() * s.value()[0], {a, s}, [a, s](const Var& g) {
    return std::vector<Var>{a.requires_grad() ? mul_scalar(g, s) : Var{},
                            s.requires_grad() ? sum(mul(g, a)) : Var{}};
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops

Var sum(const Var& a) {
  const Shape shape = a.shape();
  return make(Tensor::scalar(pmeta::sum(a.value())), {a},
              [shape](const Var& g) { return std::vector<Var>{fill(g, shape)}; });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var sum_last(const Var& a) {
  const Shape in = a.shape();
  const std::size_t n = in.back();
  Tensor out(prefix_shape(in));
  for (std::size_t i = 0; i < out.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a.value()[i * n + j];
    out[i] = s;
  }
  return make(std::move(out), {a}, [in, n](const Var& g) {
    return std::vector<Var>{reshape(broadcast_last(g, n), in)};
  });
}

Var broadcast_last(const Var& a, std::size_t n) {
  const Shape in = a.shape();
  Shape out_shape = in;
  out_shape.push_back(n);
  Tensor out(out_shape);
  for (std::size_t i = 0; i < a.value().size(); ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.value()[i];
  return make(std::move(out), {a}, [in](const Var& g) { return std::vector<Var>{reshape(sum_last(g), in)}; });
}

Var sum_first(const Var& a) {
  const Shape in = a.shape();
  const std::size_t m = in.front();
  Tensor out(suffix_shape(in));
  const std::size_t inner = out.size();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < inner; ++j) out[j] += a.value()[i * inner + j];
  return make(std::move(out), {a}, [in, m](const Var& g) {
    return std::vector<Var>{reshape(broadcast_first(g, m), in)};
  });
}

Var broadcast_first(const Var& a, std::size_t m) {
  const Shape in = a.shape();
  Shape out_shape{m};
  out_shape.insert(out_shape.end(), in.begin(), in.end());
  Tensor out(out_shape);
  const std::size_t inner = a.value().size();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < inner; ++j) out[i * inner + j] = a.value()[j];
  return make(std::move(out), {a}, [in](const Var& g) { return std::vector<Var>{reshape(sum_first(g), in)}; });
}

Var reshape(const Var& a, Shape shape) {
  if (a.shape() == shape) return a;
  const Shape in = a.shape();
  return make(a.value().reshaped(std::move(shape)), {a},
              [in](const Var& g) { return std::vector<Var>{reshape(g, in)}; });
}

Var channel_broadcast(const Var& v, const Shape& shape) {
  require(shape.size() >= 2 && v.shape() == Shape{shape[1]}, ErrorKind::shape,
          "channel_broadcast: vector " + shape_str(v.shape()) + " vs target " + shape_str(shape));
  std::size_t spatial = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) spatial *= shape[i];
  return reshape(broadcast_last(broadcast_first(v, shape[0]), spatial), shape);
}

Var channel_sum(const Var& a) {
  const Shape& s = a.shape();
  require(s.size() >= 2, ErrorKind::shape, "channel_sum expects [B, C, ...]");
  std::size_t spatial = 1;
  for (std::size_t i = 2; i < s.size(); ++i) spatial *= s[i];
  return sum_first(sum_last(reshape(a, {s[0], s[1], spatial})));
}

Var outer(const Var& a, const Var& b) {
  require(a.shape().size() == 1 && b.shape().size() == 1, ErrorKind::shape, "outer expects vectors");
  return mul(broadcast_last(a, b.shape()[0]), broadcast_first(b, a.shape()[0]));
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(const Var& a, const Var& b) {
  return make(kernels::matmul(a.value(), b.value()), {a, b}, [a, b](const Var& g) {
    return std::vector<Var>{a.requires_grad() ? matmul(g, transpose(b)) : Var{},
                            b.requires_grad() ? matmul(transpose(a), g) : Var{}};
  });
}

Var transpose(const Var& a) {
  return make(kernels::transpose(a.value()), {a}, [](const Var& g) { return std::vector<Var>{transpose(g)}; });
}

Var conv2d(const Var& x, const Var& w, const kernels::ConvGeometry& geo) {
  const std::size_t h = x.shape().at(2), wd = x.shape().at(3);
  return make(kernels::conv2d(x.value(), w.value(), geo), {x, w}, [x, w, geo, h, wd](const Var& g) {
    return std::vector<Var>{x.requires_grad() ? conv2d_input_grad(g, w, geo, h, wd) : Var{},
                            w.requires_grad() ? conv2d_weight_grad(x, g, geo) : Var{}};
  });
}

Var conv2d_input_grad(const Var& gy, const Var& w, const kernels::ConvGeometry& geo, std::size_t in_h,
                      std::size_t in_w) {
  return make(kernels::conv2d_input_grad(gy.value(), w.value(), geo, in_h, in_w), {gy, w},
              [gy, w, geo](const Var& s) {
                return std::vector<Var>{gy.requires_grad() ? conv2d(s, w, geo) : Var{},
                                        w.requires_grad() ? conv2d_weight_grad(s, gy, geo) : Var{}};
              });
}

Var conv2d_weight_grad(const Var& x, const Var& gy, const kernels::ConvGeometry& geo) {
  const std::size_t h = x.shape().at(2), wd = x.shape().at(3);
  return make(kernels::conv2d_weight_grad(x.value(), gy.value(), geo), {x, gy}, [x, gy, geo, h, wd](const Var& s) {
    return std::vector<Var>{x.requires_grad() ? conv2d_input_grad(gy, s, geo, h, wd) : Var{},
                            gy.requires_grad() ? conv2d(x, s, geo) : Var{}};
  });
}

Var gather(const Var& a, std::vector<std::size_t> index, Shape out_shape) {
  const Shape in = a.shape();
  Tensor v = kernels::gather(a.value(), index, out_shape);
  return make(std::move(v), {a}, [index = std::move(index), in](const Var& g) {
    return std::vector<Var>{scatter(g, index, in)};
  });
}

Var scatter(const Var& a, std::vector<std::size_t> index, Shape out_shape) {
  const Shape in = a.shape();
  Tensor v = kernels::scatter(a.value(), index, out_shape);
  return make(std::move(v), {a}, [index = std::move(index), in](const Var& g) {
    return std::vector<Var>{gather(g, index, in)};
  });
}

Var max_pool(const Var& x, std::size_t window, std::size_t stride) {
  kernels::PoolResult r = kernels::max_pool(x.value(), window, stride);
  return gather(x, std::move(r.argmax), r.y.shape());
}

Var straight_through(const Var& a, Tensor value) {
  require(a.shape() == value.shape(), ErrorKind::shape, "straight_through: shape mismatch");
  return make(std::move(value), {a}, [](const Var& g) { return std::vector<Var>{g}; });
}

Var softmax(const Var& z) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : z.value().data()) m = std::max(m, v);
  const Var e = exp(add_scalar(z, -m));
  return mul_scalar(e, pow_scalar(sum(e), -1.0));
}

Var log_softmax_rows(const Var& z) {
  require(z.shape().size() == 2, ErrorKind::shape, "log_softmax_rows expects [B, N]");
  const std::size_t rows = z.shape()[0], n = z.shape()[1];
  Tensor row_max(z.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) m = std::max(m, z.value()[r * n + j]);
    for (std::size_t j = 0; j < n; ++j) row_max[r * n + j] = m;
  }
  const Var shifted = sub(z, constant(row_max));
  const Var lse = log(sum_last(exp(shifted)));
  return sub(shifted, broadcast_last(lse, n));
}

Var mse_loss(const Var& pred, const Tensor& target) {
  require(pred.shape() == target.shape(), ErrorKind::shape,
          "mse_loss: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  const Var d = sub(pred, constant(target));
  return mean(mul(d, d));
}

Var cross_entropy_loss(const Var& logits, const Tensor& one_hot) {
  require(logits.shape() == one_hot.shape(), ErrorKind::shape, "cross_entropy_loss: shape mismatch");
  return scale(sum(mul_const(log_softmax_rows(logits), one_hot)), -1.0 / static_cast<double>(logits.shape()[0]));
}

// ---------------------------------------------------------------------------
// Records

Record::Record(Program program, std::vector<Shape> slots, Depth depth)
    : program_(std::move(program)), slots_(std::move(slots)), depth_(depth) {
  require(static_cast<bool>(program_), ErrorKind::invalid_argument, "record needs a program");
}

const Tensor& Record::forward(std::span<const Tensor> inputs) {
  require(inputs.size() == slots_.size(), ErrorKind::shape,
          "record expects " + std::to_string(slots_.size()) + " inputs, got " + std::to_string(inputs.size()));
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    require(inputs[i].shape() == slots_[i], ErrorKind::shape,
            "record input " + std::to_string(i) + ": expected " + shape_str(slots_[i]) + ", got " +
                shape_str(inputs[i].shape()));
    vars.push_back(leaf(inputs[i]));
  }
  Var out = program_(vars);
  check_finite(out.value(), "record forward");
  inputs_ = std::move(vars);
  output_ = std::move(out);
  return output_.value();
}

void Record::require_forward() const {
  require(output_.defined(), ErrorKind::state, "record gradient requested before forward");
}

std::vector<Tensor> Record::grad(const Tensor& seed) const {
  require_forward();
  require(seed.shape() == output_.shape(), ErrorKind::shape,
          "seed shape " + shape_str(seed.shape()) + " does not match output " + shape_str(output_.shape()));
  std::vector<Var> g = ad::grad(output_, inputs_, constant(seed), false);
  std::vector<Tensor> out;
  out.reserve(g.size());
  for (auto& v : g) out.push_back(v.value());
  return out;
}

std::vector<Var> Record::grad_vars(const Tensor& seed) const {
  require_forward();
  require(depth_ == Depth::second, ErrorKind::state, "differentiable gradients need a depth-2 record");
  require(seed.shape() == output_.shape(), ErrorKind::shape, "seed shape does not match output");
  return ad::grad(output_, inputs_, constant(seed), true);
}

UnrolledGradient grad_of_grad(const Record& support, const Record& query, std::span<const Tensor> initial, int inner_steps,
                              std::span<const double> step_sizes, bool first_order) {
  require(inner_steps >= 0, ErrorKind::invalid_argument, "inner step count must be non-negative");
  require(first_order || support.depth() == Depth::second, ErrorKind::state,
          "second-order meta-gradients need a depth-2 support record");
  const std::size_t P = initial.size();
  const std::size_t K = static_cast<std::size_t>(inner_steps);
  require(support.slots().size() == P && query.slots().size() == P, ErrorKind::shape,
          "support/query records must take the parameter list");
  const bool per_slot = step_sizes.size() == K * P && P != 1;
  require(step_sizes.size() == K || per_slot, ErrorKind::shape, "step sizes must have K or K*P entries");
  const std::size_t cols = per_slot ? P : 1;

  std::vector<Var> w0;
  for (std::size_t p = 0; p < P; ++p) {
    require(initial[p].shape() == support.slots()[p], ErrorKind::shape, "initial parameter shape mismatch");
    w0.push_back(leaf(initial[p]));
  }
  std::vector<Var> alphas;
  for (std::size_t i = 0; i < K * cols; ++i) alphas.push_back(leaf(Tensor::scalar(step_sizes[i])));

  std::vector<Var> w = w0;
  for (std::size_t k = 0; k < K; ++k) {
    const Var loss = support.program()(w);
    require(loss.value().size() == 1, ErrorKind::shape, "support program must return a scalar loss");
    std::vector<Var> g = ad::grad(loss, w, {}, !first_order);
    for (std::size_t p = 0; p < P; ++p) w[p] = sub(w[p], mul_scalar(g[p], alphas[k * cols + (per_slot ? p : 0)]));
  }
  const Var outer_loss = query.program()(w);
  require(outer_loss.value().size() == 1, ErrorKind::shape, "query program must return a scalar loss");
  check_finite(outer_loss.value(), "query loss");

  std::vector<Var> wrt = w0;
  wrt.insert(wrt.end(), alphas.begin(), alphas.end());
  std::vector<Var> g = ad::grad(outer_loss, wrt, {}, false);

  UnrolledGradient result;
  for (std::size_t p = 0; p < P; ++p) result.params.push_back(g[p].value());
  if (K > 0) {
    Tensor steps({K, cols});
    for (std::size_t i = 0; i < K * cols; ++i) steps[i] = g[P + i].value()[0];
    result.step_sizes.push_back(std::move(steps));
  }
  return result;
}

Tensor finite_diff_oracle(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  require(h > 0.0, ErrorKind::invalid_argument, "finite difference step must be positive");
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) fail(ErrorKind::numeric, "non-finite function value in finite differences");
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace pmeta::ad
