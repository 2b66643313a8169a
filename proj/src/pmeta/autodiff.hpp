#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// Every op's vector-Jacobian product is itself written with differentiable
// ops, so gradients taken with `create_graph = true` can be differentiated
// again. This is what lets the meta-trainer differentiate a query loss
// through an explicitly unrolled sequence of inner gradient steps.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "pmeta/kernels.hpp"
#include "pmeta/tensor.hpp"

namespace pmeta::ad {

class Var;

struct Node {
  Tensor value;
  std::vector<Var> inputs;
  // Maps the gradient of this node to one gradient per input (undefined Var
  // for inputs that do not need one).
  std::function<std::vector<Var>(const Var&)> backward;
  bool requires_grad = false;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  Node* node() const noexcept { return node_.get(); }

 private:
  std::shared_ptr<Node> node_;
};

// Gradient tracking is on by default; the guard disables it for its scope
// on the current thread.
bool grad_enabled() noexcept;
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

Var constant(Tensor value);
Var leaf(Tensor value, bool requires_grad = true);
Var detach(const Var& v);

// Gradients of `output` (seeded with `seed`, default ones) w.r.t. `wrt`.
// Unreached inputs get zeros. With create_graph the results are
// differentiable Vars; otherwise they are constants.
std::vector<Var> grad(const Var& output, std::span<const Var> wrt, const Var& seed = {},
                      bool create_graph = false);

// Elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var pow_scalar(const Var& a, double p);
Var exp(const Var& a);
Var log(const Var& a);
Var relu(const Var& a);
// a ⊙ mask with a constant mask.
Var mul_const(const Var& a, const Tensor& mask);
// a · s for a shape-{1} Var s.
Var mul_scalar(const Var& a, const Var& s);

// Reductions and broadcasts. "last"/"first" act on the trailing/leading axis.
Var sum(const Var& a);
Var mean(const Var& a);
Var sum_last(const Var& a);
Var broadcast_last(const Var& a, std::size_t n);
Var sum_first(const Var& a);
Var broadcast_first(const Var& a, std::size_t n);
Var reshape(const Var& a, Shape shape);

// v [C] broadcast to `shape` = [B, C, ...]; channel_sum is its adjoint.
Var channel_broadcast(const Var& v, const Shape& shape);
Var channel_sum(const Var& a);
Var outer(const Var& a, const Var& b);

// Linear algebra
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var conv2d(const Var& x, const Var& w, const kernels::ConvGeometry& g);
Var conv2d_input_grad(const Var& gy, const Var& w, const kernels::ConvGeometry& g, std::size_t in_h,
                      std::size_t in_w);
Var conv2d_weight_grad(const Var& x, const Var& gy, const kernels::ConvGeometry& g);

Var gather(const Var& a, std::vector<std::size_t> index, Shape out_shape);
Var scatter(const Var& a, std::vector<std::size_t> index, Shape out_shape);
Var max_pool(const Var& x, std::size_t window, std::size_t stride);

// Forward value is `value`; backward passes the seed to `a` unchanged.
Var straight_through(const Var& a, Tensor value);

Var softmax(const Var& z);
Var log_softmax_rows(const Var& z);
Var mse_loss(const Var& pred, const Tensor& target);
// Mean over rows of -log p[label]; `one_hot` is [B, N].
Var cross_entropy_loss(const Var& logits, const Tensor& one_hot);

// ---------------------------------------------------------------------------
// Computation records

enum class Depth { first = 1, second = 2 };

// A replayable scalar or tensor-valued program over declared input slots.
class Record {
 public:
  using Program = std::function<Var(std::span<const Var>)>;

  Record(Program program, std::vector<Shape> slots, Depth depth = Depth::first);

  const Tensor& forward(std::span<const Tensor> inputs);
  std::vector<Tensor> grad(const Tensor& seed) const;
  // Differentiable gradients; depth-2 records only.
  std::vector<Var> grad_vars(const Tensor& seed) const;

  Depth depth() const noexcept { return depth_; }
  bool has_run() const noexcept { return output_.defined(); }
  const std::vector<Shape>& slots() const noexcept { return slots_; }
  const Program& program() const noexcept { return program_; }
  std::span<const Var> inputs() const noexcept { return inputs_; }
  const Var& output() const noexcept { return output_; }

 private:
  void require_forward() const;

  Program program_;
  std::vector<Shape> slots_;
  Depth depth_;
  std::vector<Var> inputs_;
  Var output_;
};

struct UnrolledGradient {
  std::vector<Tensor> params;      // d(query loss)/d(initial params)
  std::vector<Tensor> step_sizes;  // d(query loss)/d(step sizes), shape [K, P]
};

// Differentiates query(w_K) through w_k = w_{k-1} - a_k ⊙ ∇support(w_{k-1})
// for k = 1..K, with respect to w_0 and the step sizes. `step_sizes` has K
// entries (shared by every slot) or K*P entries (row k, slot p). With
// `first_order` the inner gradients are treated as constants.
UnrolledGradient grad_of_grad(const Record& support, const Record& query, std::span<const Tensor> initial, int inner_steps,
                              std::span<const double> step_sizes, bool first_order = false);

// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h for every entry.
Tensor finite_diff_oracle(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

}  // namespace pmeta::ad
