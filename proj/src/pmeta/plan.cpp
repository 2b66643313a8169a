#include "pmeta/plan.hpp"

#include <cmath>

#include "pmeta/error.hpp"

namespace pmeta {

bool AdaptPlan::attended(std::size_t layer) const {
  return attention_enabled && layer < attention.layers.size() && attention.layers[layer].has_value();
}

void AdaptPlan::validate() const {
  require(network.executable(), ErrorKind::unsupported, "plan network is cost-only and cannot be adapted");
  const auto shapes = network.param_shapes();
  require(weights.size() == shapes.size(), ErrorKind::shape,
          "plan has " + std::to_string(weights.size()) + " weight tensors, network needs " + std::to_string(shapes.size()));
  for (std::size_t i = 0; i < shapes.size(); ++i)
    require(weights[i].shape() == shapes[i], ErrorKind::shape,
            "plan weight " + std::to_string(i) + " has shape " + shape_str(weights[i].shape()) + ", expected " +
                shape_str(shapes[i]));
  const auto trainable = network.trainable_layers();
  require(alpha.rank() == 2 && alpha.dim(0) == trainable.size() && alpha.dim(1) >= 1, ErrorKind::shape,
          "step sizes must be [" + std::to_string(trainable.size()) + ", K]");
  for (double a : alpha.data())
    require(a >= 0.0 && std::isfinite(a), ErrorKind::invalid_argument, "step sizes must be finite and non-negative");
  require(rho_fw >= 0.0 && rho_fw < 1.0 && rho_bw >= 0.0 && rho_bw < 1.0, ErrorKind::invalid_argument,
          "clip ratios must lie in [0, 1)");
  if (attention_enabled) {
    require(attention.layers.size() == trainable.size(), ErrorKind::shape, "attention modules do not match the network");
    for (std::size_t t = 0; t < trainable.size(); ++t) {
      const auto& la = attention.layers[t];
      if (!la) continue;
      const LayerSpec& l = network.layers[trainable[t]];
      require(la->fw.channels() == l.in_channels && la->bw.channels() == l.out_channels, ErrorKind::shape,
              "attention module channels do not match layer " + std::to_string(trainable[t]));
    }
  }
}

std::vector<double> input_words(const NetworkSpec& net) {
  const auto shapes = net.shapes();
  std::vector<double> m;
  for (std::size_t i : net.trainable_layers()) m.push_back(static_cast<double>(shapes[i].words()));
  return m;
}

}  // namespace pmeta
