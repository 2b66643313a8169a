#pragma once

// The deployable result of meta-training: initial weights, per-layer
// per-step inner step sizes and the attention modules.

#include <vector>

#include "pmeta/attention.hpp"
#include "pmeta/layers.hpp"

namespace pmeta {

struct AdaptPlan {
  NetworkSpec network;
  std::vector<Tensor> weights;  // [w, b] per trainable layer
  Tensor alpha;                 // [L, K] over trainable layers, all >= 0
  AttentionParams attention;    // layers empty when attention is disabled
  bool attention_enabled = false;
  double rho_fw = 0.3;
  double rho_bw = 0.0;

  std::size_t layers() const { return alpha.dim(0); }
  std::size_t steps() const { return alpha.dim(1); }
  double step_size(std::size_t layer, std::size_t step) const { return alpha[layer * steps() + step]; }
  // α̂: the layer is updated at this step.
  bool active(std::size_t layer, std::size_t step) const { return step_size(layer, step) > 0.0; }
  bool attended(std::size_t layer) const;

  // Throws when shapes disagree with the network.
  void validate() const;
};

// m(x_{l-1}) per trainable layer: per-sample input words (flattened for fc).
std::vector<double> input_words(const NetworkSpec& net);

}  // namespace pmeta
