#pragma once

// Channel-wise meta attention. Each attended trainable layer owns a forward
// module (input channels, scored from the layer input) and a backward module
// (output channels, scored from the loss gradient w.r.t. the layer output).
//
// Module wiring: per-sample channel pooling -> fc C->h -> ReLU -> fc h->C
// (zero-initialized) -> mean over the batch -> softmax -> clip_normalize,
// with h = ceil(C / r). The forward module pools by spatial mean, the
// backward module by spatial mean of absolute values.

#include <optional>
#include <span>
#include <vector>

#include "pmeta/autodiff.hpp"
#include "pmeta/layers.hpp"
#include "pmeta/rng.hpp"

namespace pmeta {

inline constexpr std::size_t kDefaultReduction = 4;

// Zeroes the c smallest entries of π (ascending, ties by smaller index),
// c minimal with cumulative mass ≥ ρ and at most C-1, then rescales the rest
// to sum to C.
std::vector<double> clip_normalize(std::span<const double> pi, double rho);

// γ[f][c] = bw[f] · fw[c] as a [C_out, C_in] tensor.
Tensor combine_scores(std::span<const double> fw, std::span<const double> bw);

// [B, C, ...] -> [B, C]
Tensor pool_mean(const Tensor& x);
Tensor pool_mean_abs(const Tensor& g);

struct AttentionModule {
  // w1 [h, C], b1 [h], w2 [C, h], b2 [C]
  std::vector<Tensor> params;

  static AttentionModule init(std::size_t channels, std::size_t reduction, Rng& rng);
  std::size_t channels() const { return params.at(3).size(); }
};

// Scores for one module. `params` are the module's four tensors as Vars,
// `pooled` is [B, C]. The result's forward value is clip_normalize(π, ρ);
// its backward passes the seed straight to π.
ad::Var attention_scores_var(std::span<const ad::Var> params, const Tensor& pooled, double rho);

// Non-differentiable evaluation of the same computation.
std::vector<double> attention_scores(const AttentionModule& module, const Tensor& pooled, double rho);

struct LayerAttention {
  AttentionModule fw;
  AttentionModule bw;
};

struct AttentionParams {
  std::size_t reduction = kDefaultReduction;
  // One entry per trainable layer; empty for layers without attention.
  std::vector<std::optional<LayerAttention>> layers;

  // Every trainable layer except the last one is attended.
  static AttentionParams init(const NetworkSpec& spec, std::size_t reduction, Rng& rng);

  // Flattened as fw(w1, b1, w2, b2), bw(w1, b1, w2, b2) per attended layer.
  std::vector<Tensor> flatten() const;
  void assign(std::span<const Tensor> flat);
  std::size_t tensor_count() const;
};

}  // namespace pmeta
