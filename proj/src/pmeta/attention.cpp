#include "pmeta/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pmeta/error.hpp"

namespace pmeta {

std::vector<double> clip_normalize(std::span<const double> pi, double rho) {
  const std::size_t C = pi.size();
  require(C > 0, ErrorKind::invalid_argument, "clip_normalize: empty score vector");
  require(rho >= 0.0 && rho < 1.0, ErrorKind::invalid_argument, "clip_normalize: ratio must lie in [0, 1)");
  double total = 0.0;
  for (double p : pi) {
    require(p >= 0.0 && std::isfinite(p), ErrorKind::invalid_argument, "clip_normalize: scores must be non-negative");
    total += p;
  }
  require(std::abs(total - 1.0) <= 1e-9, ErrorKind::invalid_argument, "clip_normalize: scores must sum to 1");

  std::vector<std::size_t> order(C);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pi[a] < pi[b]; });

  std::size_t clipped = 0;
  if (rho > 0.0) {
    double cum = 0.0;
    while (clipped < C - 1) {
      cum += pi[order[clipped]];
      ++clipped;
      if (cum >= rho) break;
    }
  }
  std::vector<double> gamma(pi.begin(), pi.end());
  for (std::size_t i = 0; i < clipped; ++i) gamma[order[i]] = 0.0;
  double kept = 0.0;
  for (double g : gamma) kept += g;
  for (double& g : gamma) g = g / kept * static_cast<double>(C);
  return gamma;
}

Tensor combine_scores(std::span<const double> fw, std::span<const double> bw) {
  require(!fw.empty() && !bw.empty(), ErrorKind::shape, "combine_scores: empty score vector");
  Tensor g({bw.size(), fw.size()});
  for (std::size_t f = 0; f < bw.size(); ++f)
    for (std::size_t c = 0; c < fw.size(); ++c) g[f * fw.size() + c] = bw[f] * fw[c];
  return g;
}

namespace {

template <typename F>
Tensor pool(const Tensor& x, F&& f) {
  require(x.rank() >= 2, ErrorKind::shape, "attention pooling expects [B, C, ...]");
  const std::size_t B = x.dim(0), C = x.dim(1), S = x.size() / (B * C);
  Tensor out({B, C});
  for (std::size_t i = 0; i < B * C; ++i) {
    double acc = 0.0;
    for (std::size_t e = 0; e < S; ++e) acc += f(x[i * S + e]);
    out[i] = acc / static_cast<double>(S);
  }
  return out;
}

}  // namespace

Tensor pool_mean(const Tensor& x) {
  return pool(x, [](double v) { return v; });
}

Tensor pool_mean_abs(const Tensor& g) {
  return pool(g, [](double v) { return std::abs(v); });
}

AttentionModule AttentionModule::init(std::size_t channels, std::size_t reduction, Rng& rng) {
  require(channels > 0 && reduction > 0, ErrorKind::invalid_argument, "attention module sizes must be positive");
  const std::size_t hidden = (channels + reduction - 1) / reduction;
  AttentionModule m;
  m.params.push_back(rng.normal_tensor({hidden, channels}, std::sqrt(2.0 / static_cast<double>(channels))));
  m.params.emplace_back(Shape{hidden}, 0.0);
  m.params.emplace_back(Shape{channels, hidden}, 0.0);
  m.params.emplace_back(Shape{channels}, 0.0);
  return m;
}

ad::Var attention_scores_var(std::span<const ad::Var> params, const Tensor& pooled, double rho) {
  using namespace ad;
  require(params.size() == 4, ErrorKind::invalid_argument, "attention module needs four tensors");
  const std::size_t C = params[3].shape()[0];
  require(pooled.rank() == 2 && pooled.dim(1) == C, ErrorKind::shape,
          "attention: module expects " + std::to_string(C) + " channels, got " + shape_str(pooled.shape()));
  const std::size_t B = pooled.dim(0);
  const Var p = constant(pooled);
  const Var hidden = relu(add(matmul(p, transpose(params[0])), broadcast_first(params[1], B)));
  const Var logits = add(matmul(hidden, transpose(params[2])), broadcast_first(params[3], B));
  const Var pi = softmax(scale(sum_first(logits), 1.0 / static_cast<double>(B)));
  std::vector<double> gamma = clip_normalize(pi.value().data(), rho);
  return straight_through(pi, Tensor({C}, std::move(gamma)));
}

std::vector<double> attention_scores(const AttentionModule& module, const Tensor& pooled, double rho) {
  ad::NoGradGuard guard;
  std::vector<ad::Var> vars;
  for (const auto& t : module.params) vars.push_back(ad::constant(t));
  return attention_scores_var(vars, pooled, rho).value().values();
}

AttentionParams AttentionParams::init(const NetworkSpec& spec, std::size_t reduction, Rng& rng) {
  AttentionParams a;
  a.reduction = reduction;
  const auto trainable = spec.trainable_layers();
  for (std::size_t t = 0; t < trainable.size(); ++t) {
    if (t + 1 == trainable.size()) {
      a.layers.emplace_back();
      continue;
    }
    const LayerSpec& l = spec.layers[trainable[t]];
    LayerAttention la{AttentionModule::init(l.in_channels, reduction, rng),
                      AttentionModule::init(l.out_channels, reduction, rng)};
    a.layers.emplace_back(std::move(la));
  }
  return a;
}

std::vector<Tensor> AttentionParams::flatten() const {
  std::vector<Tensor> flat;
  for (const auto& l : layers) {
    if (!l) continue;
    flat.insert(flat.end(), l->fw.params.begin(), l->fw.params.end());
    flat.insert(flat.end(), l->bw.params.begin(), l->bw.params.end());
  }
  return flat;
}

std::size_t AttentionParams::tensor_count() const {
  return 8 * static_cast<std::size_t>(std::count_if(layers.begin(), layers.end(), [](const auto& l) { return l.has_value(); }));
}

void AttentionParams::assign(std::span<const Tensor> flat) {
  require(flat.size() == tensor_count(), ErrorKind::shape,
          "attention parameters: expected " + std::to_string(tensor_count()) + " tensors, got " + std::to_string(flat.size()));
  std::size_t i = 0;
  for (auto& l : layers) {
    if (!l) continue;
    for (auto* m : {&l->fw, &l->bw})
      for (auto& t : m->params) {
        require(flat[i].shape() == t.shape(), ErrorKind::shape, "attention parameter shape mismatch");
        t = flat[i++];
      }
  }
}

}  // namespace pmeta
