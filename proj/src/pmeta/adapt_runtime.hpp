#pragma once

// Few-shot adaptation under memory discipline. Each of the K steps walks the
// support set in partial batches of b rows: forward with channel-subsampled
// activation storage for the updated layers, backward down to the shallowest
// updated layer, masked weight gradients accumulated with weight |pb|/|S|,
// then one update per layer. Counters record what was actually stored and
// computed so it can be checked against the closed-form cost model.

#include <cstdint>
#include <string>
#include <vector>

#include "pmeta/cost_model.hpp"
#include "pmeta/plan.hpp"

namespace pmeta {

enum class LossKind { mse, cross_entropy };

double loss_value(LossKind kind, const Tensor& pred, const Tensor& target);
// d loss / d pred for the mean loss over the rows of `pred`.
Tensor loss_grad(LossKind kind, const Tensor& pred, const Tensor& target);

Tensor predict(const NetworkSpec& net, std::span<const Tensor> weights, const Tensor& x);
double evaluate_loss(const NetworkSpec& net, std::span<const Tensor> weights, const Tensor& x, const Tensor& y,
                     LossKind kind);

struct PartialBatchRecord {
  std::size_t step = 0;
  std::size_t rows = 0;
  cost::StepMasks masks;  // realized on this partial batch
  std::uint64_t stored_words = 0;
  std::uint64_t predicted_stored_words = 0;  // dominant term from `masks`
  // Weight-gradient MACs of conv and fc layers, measured vs closed form.
  std::uint64_t conv_fc_weight_grad_macs = 0;
  double predicted_conv_fc_weight_grad_macs = 0;
};

struct StepRecord {
  cost::StepMasks union_masks;  // channels touched by any partial batch
  std::uint64_t peak_stored_words = 0;
  std::uint64_t sigma_bits = 0;
  std::uint64_t forward_macs = 0;
  std::uint64_t weight_grad_macs = 0;
  std::uint64_t input_grad_macs = 0;
  std::uint64_t attention_macs = 0;
  std::uint64_t attention_words = 0;
};

struct SessionReport {
  std::size_t partial_batch = 0;
  std::size_t support_rows = 0;
  std::vector<StepRecord> steps;
  std::vector<PartialBatchRecord> batches;

  std::uint64_t peak_stored_words() const;
  std::uint64_t total_macs() const;
  std::uint64_t total_weight_grad_macs() const;
};

class AdaptSession {
 public:
  AdaptSession(AdaptPlan plan, std::size_t partial_batch, LossKind loss);

  // Runs the plan's K steps from its weights and returns the adapted weights.
  std::vector<Tensor> adapt(const Tensor& support_x, const Tensor& support_y);
  const SessionReport& report() const noexcept { return report_; }
  const AdaptPlan& plan() const noexcept { return plan_; }

 private:
  AdaptPlan plan_;
  std::size_t partial_batch_;
  LossKind loss_;
  SessionReport report_;
};

// Cost-model query built from a session's realized masks (union per step).
cost::CostQuery session_query(const AdaptPlan& plan, const SessionReport& report);
// Same, but every step uses the task-level mean of the realized channel
// counts per layer (rounded up), keeping each step's α̂.
cost::CostQuery session_query_task_mean(const AdaptPlan& plan, const SessionReport& report);

// Measured counters next to their closed-form predictions. `batch` rows are
// exact pairs; `step` rows compare step totals with the union-mask estimate.
std::string session_csv(const AdaptPlan& plan, const SessionReport& report);

}  // namespace pmeta
