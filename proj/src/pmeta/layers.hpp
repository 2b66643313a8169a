#pragma once

// Layer vocabulary shared by the training engine, the adaptation runtime and
// the cost model.
//
// Network text format, one item per line (`#` starts a comment):
//
//   input channels=3 height=84 width=84      (or `input channels=20` for flat)
//   conv2d in=3 out=32 kernel=3 stride=1 padding=1
//   group_norm channels=32 groups=4
//   relu
//   max_pool window=2 stride=2
//   fully_connected in=800 out=5             (flattens its input)
//   global_avg_pool
//   residual_begin / residual_shortcut / residual_end
//
// The residual markers are cost-model only: layers between residual_begin and
// residual_shortcut form the main branch, layers between residual_shortcut and
// residual_end form the shortcut branch (fed from the saved block input), and
// residual_end adds the two.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pmeta/autodiff.hpp"
#include "pmeta/tensor.hpp"

namespace pmeta {

enum class LayerKind {
  conv2d,
  fully_connected,
  group_norm,
  relu,
  max_pool,
  global_avg_pool,
  residual_begin,
  residual_shortcut,
  residual_end,
};

std::string_view kind_name(LayerKind kind);

// Per-sample activation shape. Flat activations have h = w = 1 and
// spatial = false.
struct ActShape {
  std::size_t c = 0, h = 1, w = 1;
  bool spatial = false;

  std::size_t words() const noexcept { return c * h * w; }
  Shape batched(std::size_t batch) const;
  bool operator==(const ActShape&) const = default;
};

inline constexpr double kGroupNormEps = 1e-5;

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  // conv2d / fully_connected: in/out channels; group_norm: in == out == channels.
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
  std::size_t window = 2;

  static LayerSpec conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1,
                          std::size_t padding = 0);
  static LayerSpec fully_connected(std::size_t in, std::size_t out);
  static LayerSpec group_norm(std::size_t channels, std::size_t groups);
  static LayerSpec relu();
  static LayerSpec max_pool(std::size_t window, std::size_t stride);
  static LayerSpec marker(LayerKind kind);

  bool trainable() const noexcept;
  // Output shape for the given input; throws on incompatible shapes.
  ActShape output_shape(const ActShape& in) const;
  // Weight words m(w) (bias omitted). Group norm counts its scale and shift.
  std::size_t weight_words() const;
  // Shapes of [weight, bias] (group norm: [scale, shift]).
  std::vector<Shape> param_shapes() const;
  std::string to_line() const;
  void validate() const;

  bool operator==(const LayerSpec&) const = default;
};

struct NetworkSpec {
  ActShape input;
  std::vector<LayerSpec> layers;

  static NetworkSpec parse(std::string_view text);
  // "4Conv", "ResNet12-cost-only", "MLP-100-100", "MLP-40-40".
  static NetworkSpec preset(std::string_view name, std::size_t ways = 5);
  static std::vector<std::string> preset_names();

  std::string to_text() const;
  // shapes()[0] is the input, shapes()[i + 1] the output of layers[i].
  std::vector<ActShape> shapes() const;
  // Indices into `layers` of the trainable layers, in order.
  std::vector<std::size_t> trainable_layers() const;
  // Shapes of the flat parameter list: [w, b] per trainable layer.
  std::vector<Shape> param_shapes() const;
  // True when the training engine and runtime can execute the network.
  bool executable() const;
  ActShape output() const { return shapes().back(); }

  bool operator==(const NetworkSpec&) const = default;
};

// He-normal conv/fc weights, zero biases, unit group-norm scale, zero shift.
std::vector<Tensor> init_params(const NetworkSpec& spec, class Rng& rng);

// ---------------------------------------------------------------------------
// Channel masks and critical ratios

// μ kept as an exact fraction so ⌈μ·C⌉ never suffers rounding.
struct CriticalRatio {
  std::size_t nonzero = 0;
  std::size_t channels = 0;

  double value() const noexcept { return channels ? static_cast<double>(nonzero) / static_cast<double>(channels) : 0.0; }
  static CriticalRatio of(std::span<const double> scores);
};

struct ChannelMask {
  std::vector<double> fw;  // over input channels, length C_{l-1}
  std::vector<double> bw;  // over output channels, length C_l

  static ChannelMask ones(std::size_t in, std::size_t out);
  CriticalRatio mu_fw() const { return CriticalRatio::of(fw); }
  CriticalRatio mu_bw() const { return CriticalRatio::of(bw); }
};

// ---------------------------------------------------------------------------
// Runtime (non-differentiable) layer execution with storage instrumentation

// Channel-subsampled copy of a layer input, scaled by γ^fw, for the weight
// gradient. data is [B, |channels|, H, W] (or [B, |channels|] when flat).
struct StoredActivation {
  std::vector<std::size_t> channels;
  std::size_t total_channels = 0;
  Tensor data;
};

// Propagation-path state a layer needs for its input gradient. ReLU keeps one
// bit per output element; max-pool keeps the window position of each output
// (2 bits for a 2x2 window); group norm keeps its normalized input and the
// per-group inverse standard deviations.
struct LayerCache {
  Shape in_shape;
  std::vector<bool> relu_bits;
  std::vector<std::uint8_t> pool_pos;
  Tensor xhat;
  std::vector<double> rstd;
  bool ready = false;

  // σ' bits held by this cache (ReLU 1 bit, pool ⌈log2 window²⌉ bits per output).
  std::uint64_t sigma_bits(const LayerSpec& spec) const;
};

class ActivationStore {
 public:
  explicit ActivationStore(std::size_t layers = 0);

  // Retains the channels of x with nonzero fw score, each scaled by its score.
  void store(std::size_t layer, const Tensor& x, std::span<const double> fw);
  const StoredActivation* get(std::size_t layer) const;
  void clear();

  // Real-number entries currently retained.
  std::uint64_t stored_words() const noexcept { return words_; }
  std::uint64_t layer_words(std::size_t layer) const;
  // σ' bookkeeping; words = bits / 32.
  void add_sigma_bits(std::uint64_t bits) noexcept { sigma_bits_ += bits; }
  std::uint64_t sigma_bits() const noexcept { return sigma_bits_; }
  double total_words() const noexcept { return static_cast<double>(words_) + static_cast<double>(sigma_bits_) / 32.0; }

 private:
  std::vector<std::optional<StoredActivation>> slots_;
  std::uint64_t words_ = 0;
  std::uint64_t sigma_bits_ = 0;
};

// params is [weight, bias] for trainable layers and empty otherwise.
Tensor layer_forward(const LayerSpec& spec, std::span<const Tensor> params, const Tensor& x, LayerCache& cache);
Tensor layer_input_grad(const LayerSpec& spec, std::span<const Tensor> params, const LayerCache& cache,
                        const Tensor& gy);

struct WeightGrad {
  Tensor weight;
  Tensor bias;
  std::uint64_t macs = 0;
};

// Entry (f, c, ...) = γ^bw_f · γ^fw_c · dense gradient; only channel pairs with
// a nonzero product are computed. `stored` must hold every channel with a
// nonzero fw score. Group norm uses the diagonal γ^bw_c γ^fw_c for both scale
// and shift. Biases are scaled by γ^bw only (group-norm shift excepted).
WeightGrad layer_weight_grad_masked(const LayerSpec& spec, const StoredActivation& stored, const Tensor& gy,
                                    const ChannelMask& mask);

// Dense MACs per sample: forward H_O W_O m(w); input gradient H_I W_I m(w).
std::uint64_t forward_macs(const LayerSpec& spec, const ActShape& in);
std::uint64_t input_grad_macs(const LayerSpec& spec, const ActShape& in);

// ---------------------------------------------------------------------------
// Differentiable layer forms used by meta-training

ad::Var layer_forward_var(const LayerSpec& spec, std::span<const ad::Var> params, const ad::Var& x);

}  // namespace pmeta
