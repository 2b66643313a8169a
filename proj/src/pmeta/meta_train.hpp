#pragma once

// Meta-training: an unrolled, masked inner loop per task and outer updates of
// the initial weights, the inner step sizes α (with a memory-weighted Lasso
// penalty) and the attention modules. Baselines are configuration modes:
//
//   maml    fixed α = α0 everywhere, no attention
//   maml++  learned α without penalty, no attention
//   anil    only the output layer adapts, fixed α
//   boil    every layer but the output adapts, fixed α
//   pmeta   learned α with penalty, attention on every layer but the output
//
// Outer updates run in order weights -> α -> attention; each group's
// meta-gradient is evaluated at the parameters left by the previous update.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pmeta/adapt_runtime.hpp"
#include "pmeta/autodiff.hpp"
#include "pmeta/plan.hpp"
#include "pmeta/tasks.hpp"

namespace pmeta {

enum class Mode { pmeta, maml, maml_pp, anil, boil };
std::string mode_name(Mode m);
Mode parse_mode(const std::string& name);

struct MetaTrainConfig {
  Mode mode = Mode::pmeta;
  std::size_t inner_steps = 1;  // K
  std::size_t task_batch = 4;   // I
  std::size_t epochs = 10;
  std::size_t iterations_per_epoch = 20;
  std::size_t validation_tasks = 20;
  std::size_t validation_every = 1;
  double alpha0 = 0.01;
  double lambda = 0.001;
  double lr = 1e-3;
  double lr_min = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double rho_fw = 0.3;
  double rho_bw = 0.0;
  std::size_t reduction = kDefaultReduction;
  bool first_order = false;
  // pmeta only: replace every attention score by 1.
  bool uniform_attention = false;
  std::size_t threads = 0;  // 0: hardware concurrency
  std::uint64_t seed = 1;

  void validate() const;
  bool learns_alpha() const { return mode == Mode::pmeta || mode == Mode::maml_pp; }
  bool uses_attention() const { return mode == Mode::pmeta && !uniform_attention; }
  double effective_lambda() const { return mode == Mode::pmeta ? lambda : 0.0; }
};

// Everything the outer loop optimizes.
struct MetaState {
  std::vector<Tensor> weights;
  Tensor alpha;  // [L, K]
  AttentionParams attention;

  static MetaState init(const NetworkSpec& net, const MetaTrainConfig& cfg);
};

struct InnerStats {
  double mu_fw_sum = 0, mu_bw_sum = 0;
  std::size_t count = 0;
};

// Differentiable forward; `inputs`/`outputs` receive each trainable layer's
// input and output when non-null.
ad::Var forward_var(const NetworkSpec& net, std::span<const ad::Var> params, const Tensor& x,
                    std::vector<ad::Var>* inputs = nullptr, std::vector<ad::Var>* outputs = nullptr);
ad::Var task_loss_var(LossKind kind, const ad::Var& pred, const Tensor& target);

// One masked inner step: w_l <- w_l - α_l^k (γ_l ⊙ ∇_{w_l} loss(support)).
// `alpha` holds L·K shape-{1} Vars (row l, column k). `attention` holds eight
// Vars per attended layer (fw w1 b1 w2 b2, bw w1 b1 w2 b2) and is empty for
// the others, or is empty altogether for γ ≡ 1. With fixed α, layers whose
// α is zero are left untouched.
struct InnerLoop {
  const NetworkSpec* net = nullptr;
  LossKind loss = LossKind::mse;
  bool create_graph = true;
  bool alpha_learned = false;  // learned α keeps zero entries in the graph
  double rho_fw = 0.3, rho_bw = 0.0;
  std::vector<ad::Var> alpha;
  std::vector<std::vector<ad::Var>> attention;

  std::vector<ad::Var> step(std::span<const ad::Var> params, const Tensor& sx, const Tensor& sy, std::size_t k,
                            InnerStats* stats = nullptr) const;
  // Query loss after K inner steps from `params`.
  ad::Var adapted_query_loss(std::span<const ad::Var> params, const Task& task, std::size_t K,
                             InnerStats* stats = nullptr) const;
};

enum GroupBits : unsigned { kWeights = 1, kAlpha = 2, kAttention = 4 };

struct MetaGradient {
  std::vector<Tensor> weights;
  Tensor alpha;
  std::vector<Tensor> attention;  // AttentionParams::flatten layout
  double loss = 0;                // Σ_i query loss
  InnerStats stats;
};

// d Σ_i ℓ(w^i; Q^i) for the requested groups (no Lasso term).
MetaGradient meta_gradient(const NetworkSpec& net, const MetaTrainConfig& cfg, const MetaState& state,
                           std::span<const Task> tasks, LossKind loss, unsigned groups);
double meta_objective(const NetworkSpec& net, const MetaTrainConfig& cfg, const MetaState& state,
                      std::span<const Task> tasks, LossKind loss);

struct EpochMetrics {
  std::size_t epoch = 0;
  double mean_query_loss = 0;
  double validation_metric = 0;  // mean post-adaptation query loss
  double alpha_sparsity = 0;     // fraction of α entries equal to 0
  double mean_mu_fw = 1, mean_mu_bw = 1;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& m);

class MetaTrainer {
 public:
  MetaTrainer(NetworkSpec net, MetaTrainConfig cfg, std::unique_ptr<TaskSource> tasks, std::vector<Task> validation,
              LossKind loss);

  // One outer iteration on `batch`; returns the mean query loss.
  double meta_step(std::span<const Task> batch);
  EpochMetrics run_epoch();
  // Runs the remaining epochs and returns the best-validation plan.
  AdaptPlan run(const std::function<void(const EpochMetrics&)>& on_epoch = {});

  AdaptPlan current_plan() const;
  const AdaptPlan& best_plan() const { return best_; }
  const MetaState& state() const noexcept { return state_; }
  const std::vector<EpochMetrics>& history() const noexcept { return history_; }
  double validation_loss(const AdaptPlan& plan) const;

 private:
  struct Adam {
    std::vector<Tensor> m, v;
    std::size_t t = 0;
  };
  void adam_update(std::vector<Tensor>& params, const std::vector<Tensor>& grads, Adam& st, double lr);
  double learning_rate() const;

  NetworkSpec net_;
  MetaTrainConfig cfg_;
  std::unique_ptr<TaskSource> tasks_;
  std::vector<Task> validation_;
  LossKind loss_;
  MetaState state_;
  Adam adam_w_, adam_a_, adam_t_;
  std::size_t iteration_ = 0;
  std::vector<double> memory_weights_;
  std::vector<EpochMetrics> history_;
  AdaptPlan best_;
  double best_loss_ = 0;
  bool has_best_ = false;
  double last_validation_ = 0;
  InnerStats epoch_stats_;
};

}  // namespace pmeta
