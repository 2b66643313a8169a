#include "pmeta/layers.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "pmeta/error.hpp"
#include "pmeta/rng.hpp"

namespace pmeta {

namespace {

struct KindName {
  LayerKind kind;
  std::string_view name;
};

constexpr KindName kKindNames[] = {
    {LayerKind::conv2d, "conv2d"},
    {LayerKind::fully_connected, "fully_connected"},
    {LayerKind::group_norm, "group_norm"},
    {LayerKind::relu, "relu"},
    {LayerKind::max_pool, "max_pool"},
    {LayerKind::global_avg_pool, "global_avg_pool"},
    {LayerKind::residual_begin, "residual_begin"},
    {LayerKind::residual_shortcut, "residual_shortcut"},
    {LayerKind::residual_end, "residual_end"},
};

using KeyValues = std::map<std::string, std::size_t, std::less<>>;

KeyValues parse_keys(std::istringstream& in, std::size_t line_no) {
  KeyValues kv;
  std::string token;
  while (in >> token) {
    const auto eq = token.find('=');
    require(eq != std::string::npos && eq > 0, ErrorKind::parse,
            "line " + std::to_string(line_no) + ": expected key=value, got '" + token + "'");
    const std::string key = token.substr(0, eq);
    const std::string value = token.substr(eq + 1);
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(value, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    require(pos == value.size() && !value.empty() && value[0] != '-', ErrorKind::parse,
            "line " + std::to_string(line_no) + ": '" + key + "' needs a non-negative integer");
    require(kv.emplace(key, static_cast<std::size_t>(v)).second, ErrorKind::parse,
            "line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
  }
  return kv;
}

std::size_t take(KeyValues& kv, std::string_view key, std::size_t line_no, std::optional<std::size_t> fallback = {}) {
  auto it = kv.find(key);
  if (it == kv.end()) {
    require(fallback.has_value(), ErrorKind::parse,
            "line " + std::to_string(line_no) + ": missing '" + std::string(key) + "'");
    return *fallback;
  }
  const std::size_t v = it->second;
  kv.erase(it);
  return v;
}

void no_leftovers(const KeyValues& kv, std::size_t line_no) {
  if (!kv.empty())
    fail(ErrorKind::parse, "line " + std::to_string(line_no) + ": unknown key '" + kv.begin()->first + "'");
}

std::size_t spatial_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace

std::string_view kind_name(LayerKind kind) {
  for (const auto& k : kKindNames)
    if (k.kind == kind) return k.name;
  return "unknown";
}

Shape ActShape::batched(std::size_t batch) const {
  if (spatial) return {batch, c, h, w};
  return {batch, c};
}

// ---------------------------------------------------------------------------
// LayerSpec

LayerSpec LayerSpec::conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
  LayerSpec s;
  s.kind = LayerKind::conv2d;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  return s;
}

LayerSpec LayerSpec::fully_connected(std::size_t in, std::size_t out) {
  LayerSpec s;
  s.kind = LayerKind::fully_connected;
  s.in_channels = in;
  s.out_channels = out;
  return s;
}

LayerSpec LayerSpec::group_norm(std::size_t channels, std::size_t groups) {
  LayerSpec s;
  s.kind = LayerKind::group_norm;
  s.in_channels = s.out_channels = channels;
  s.groups = groups;
  return s;
}

LayerSpec LayerSpec::relu() { return marker(LayerKind::relu); }

LayerSpec LayerSpec::max_pool(std::size_t window, std::size_t stride) {
  LayerSpec s;
  s.kind = LayerKind::max_pool;
  s.window = window;
  s.stride = stride;
  return s;
}

LayerSpec LayerSpec::marker(LayerKind kind) {
  LayerSpec s;
  s.kind = kind;
  return s;
}

bool LayerSpec::trainable() const noexcept {
  return kind == LayerKind::conv2d || kind == LayerKind::fully_connected || kind == LayerKind::group_norm;
}

void LayerSpec::validate() const {
  switch (kind) {
    case LayerKind::conv2d:
      require(in_channels > 0 && out_channels > 0 && kernel > 0 && stride > 0, ErrorKind::invalid_argument,
              "conv2d dimensions must be positive");
      break;
    case LayerKind::fully_connected:
      require(in_channels > 0 && out_channels > 0, ErrorKind::invalid_argument,
              "fully_connected dimensions must be positive");
      break;
    case LayerKind::group_norm:
      require(in_channels > 0 && groups > 0 && in_channels % groups == 0, ErrorKind::invalid_argument,
              "group_norm: groups must divide channels");
      break;
    case LayerKind::max_pool:
      require(window > 0 && stride > 0 && window * window <= 256, ErrorKind::invalid_argument,
              "max_pool window/stride must be positive");
      break;
    default:
      break;
  }
}

ActShape LayerSpec::output_shape(const ActShape& in) const {
  validate();
  switch (kind) {
    case LayerKind::conv2d: {
      require(in.spatial && in.c == in_channels, ErrorKind::shape,
              "conv2d expects " + std::to_string(in_channels) + " spatial input channels, got " + std::to_string(in.c));
      const kernels::ConvGeometry g{kernel, stride, padding};
      return {out_channels, g.out_extent(in.h), g.out_extent(in.w), true};
    }
    case LayerKind::fully_connected:
      require(in.words() == in_channels, ErrorKind::shape,
              "fully_connected expects " + std::to_string(in_channels) + " inputs, got " + std::to_string(in.words()));
      return {out_channels, 1, 1, false};
    case LayerKind::group_norm:
      require(in.c == in_channels, ErrorKind::shape, "group_norm channel mismatch");
      return in;
    case LayerKind::relu:
    case LayerKind::residual_begin:
      return in;
    case LayerKind::max_pool: {
      require(in.spatial, ErrorKind::shape, "max_pool expects a spatial input");
      const kernels::ConvGeometry g{window, stride, 0};
      return {in.c, g.out_extent(in.h), g.out_extent(in.w), true};
    }
    case LayerKind::global_avg_pool:
      require(in.spatial, ErrorKind::shape, "global_avg_pool expects a spatial input");
      return {in.c, 1, 1, false};
    default:
      fail(ErrorKind::invalid_argument, "output_shape of a residual marker depends on context");
  }
}

std::size_t LayerSpec::weight_words() const {
  switch (kind) {
    case LayerKind::conv2d:
      return out_channels * in_channels * kernel * kernel;
    case LayerKind::fully_connected:
      return out_channels * in_channels;
    case LayerKind::group_norm:
      return 2 * in_channels;
    default:
      return 0;
  }
}

std::vector<Shape> LayerSpec::param_shapes() const {
  switch (kind) {
    case LayerKind::conv2d:
      return {{out_channels, in_channels, kernel, kernel}, {out_channels}};
    case LayerKind::fully_connected:
      return {{out_channels, in_channels}, {out_channels}};
    case LayerKind::group_norm:
      return {{in_channels}, {in_channels}};
    default:
      return {};
  }
}

std::string LayerSpec::to_line() const {
  std::ostringstream os;
  os << kind_name(kind);
  switch (kind) {
    case LayerKind::conv2d:
      os << " in=" << in_channels << " out=" << out_channels << " kernel=" << kernel << " stride=" << stride
         << " padding=" << padding;
      break;
    case LayerKind::fully_connected:
      os << " in=" << in_channels << " out=" << out_channels;
      break;
    case LayerKind::group_norm:
      os << " channels=" << in_channels << " groups=" << groups;
      break;
    case LayerKind::max_pool:
      os << " window=" << window << " stride=" << stride;
      break;
    default:
      break;
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// NetworkSpec

NetworkSpec NetworkSpec::parse(std::string_view text) {
  NetworkSpec spec;
  bool have_input = false;
  std::istringstream lines{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream in(line);
    std::string word;
    if (!(in >> word)) continue;
    KeyValues kv = parse_keys(in, line_no);
    if (word == "input") {
      require(!have_input, ErrorKind::parse, "line " + std::to_string(line_no) + ": duplicate input line");
      require(spec.layers.empty(), ErrorKind::parse, "input must precede the layers");
      spec.input.c = take(kv, "channels", line_no);
      const bool has_h = kv.count("height") > 0;
      spec.input.h = take(kv, "height", line_no, 1);
      spec.input.w = take(kv, "width", line_no, 1);
      spec.input.spatial = has_h;
      require(spec.input.c > 0 && spec.input.h > 0 && spec.input.w > 0, ErrorKind::parse, "input dimensions must be positive");
      have_input = true;
    } else {
      require(have_input, ErrorKind::parse, "line " + std::to_string(line_no) + ": layer before input line");
      auto found = std::find_if(std::begin(kKindNames), std::end(kKindNames),
                                [&](const KindName& k) { return k.name == word; });
      require(found != std::end(kKindNames), ErrorKind::parse,
              "line " + std::to_string(line_no) + ": unknown layer kind '" + word + "'");
      LayerSpec s = LayerSpec::marker(found->kind);
      switch (s.kind) {
        case LayerKind::conv2d:
          s.in_channels = take(kv, "in", line_no);
          s.out_channels = take(kv, "out", line_no);
          s.kernel = take(kv, "kernel", line_no);
          s.stride = take(kv, "stride", line_no, 1);
          s.padding = take(kv, "padding", line_no, 0);
          break;
        case LayerKind::fully_connected:
          s.in_channels = take(kv, "in", line_no);
          s.out_channels = take(kv, "out", line_no);
          break;
        case LayerKind::group_norm:
          s.in_channels = s.out_channels = take(kv, "channels", line_no);
          s.groups = take(kv, "groups", line_no);
          break;
        case LayerKind::max_pool:
          s.window = take(kv, "window", line_no);
          s.stride = take(kv, "stride", line_no, s.window);
          break;
        default:
          break;
      }
      no_leftovers(kv, line_no);
      try {
        s.validate();
      } catch (const Error& e) {
        fail(ErrorKind::parse, "line " + std::to_string(line_no) + ": " + e.what());
      }
      spec.layers.push_back(s);
      continue;
    }
    no_leftovers(kv, line_no);
  }
  require(have_input, ErrorKind::parse, "network has no input line");
  require(!spec.layers.empty(), ErrorKind::parse, "network has no layers");
  try {
    spec.shapes();
  } catch (const Error& e) {
    fail(ErrorKind::parse, std::string("network does not compose: ") + e.what());
  }
  return spec;
}

std::string NetworkSpec::to_text() const {
  std::ostringstream os;
  os << "input channels=" << input.c;
  if (input.spatial) os << " height=" << input.h << " width=" << input.w;
  os << '\n';
  for (const auto& l : layers) os << l.to_line() << '\n';
  return os.str();
}

std::vector<ActShape> NetworkSpec::shapes() const {
  std::vector<ActShape> out{input};
  struct Block {
    ActShape input;
    std::optional<ActShape> main_out;
  };
  std::vector<Block> open;
  ActShape cur = input;
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerKind::residual_begin:
        open.push_back({cur, std::nullopt});
        break;
      case LayerKind::residual_shortcut:
        require(!open.empty() && !open.back().main_out, ErrorKind::shape, "residual_shortcut without residual_begin");
        open.back().main_out = cur;
        cur = open.back().input;
        break;
      case LayerKind::residual_end: {
        require(!open.empty(), ErrorKind::shape, "residual_end without residual_begin");
        const ActShape main = open.back().main_out.value_or(cur);
        const ActShape shortcut = open.back().main_out ? cur : open.back().input;
        require(main == shortcut, ErrorKind::shape, "residual branches disagree in shape");
        cur = main;
        open.pop_back();
        break;
      }
      default:
        cur = l.output_shape(cur);
    }
    out.push_back(cur);
  }
  require(open.empty(), ErrorKind::shape, "unterminated residual block");
  return out;
}

std::vector<std::size_t> NetworkSpec::trainable_layers() const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].trainable()) idx.push_back(i);
  return idx;
}

std::vector<Shape> NetworkSpec::param_shapes() const {
  std::vector<Shape> shapes;
  for (std::size_t i : trainable_layers())
    for (auto& s : layers[i].param_shapes()) shapes.push_back(s);
  return shapes;
}

bool NetworkSpec::executable() const {
  return std::none_of(layers.begin(), layers.end(), [](const LayerSpec& l) {
    return l.kind == LayerKind::global_avg_pool || l.kind == LayerKind::residual_begin ||
           l.kind == LayerKind::residual_shortcut || l.kind == LayerKind::residual_end;
  });
}

NetworkSpec NetworkSpec::preset(std::string_view name, std::size_t ways) {
  require(ways >= 1, ErrorKind::invalid_argument, "preset output width must be positive");
  NetworkSpec s;
  if (name == "4Conv") {
    s.input = {3, 84, 84, true};
    std::size_t in = 3;
    for (int b = 0; b < 4; ++b) {
      s.layers.push_back(LayerSpec::conv2d(in, 32, 3, 1, 1));
      s.layers.push_back(LayerSpec::group_norm(32, 4));
      s.layers.push_back(LayerSpec::relu());
      s.layers.push_back(LayerSpec::max_pool(2, 2));
      in = 32;
    }
    s.layers.push_back(LayerSpec::fully_connected(32 * 5 * 5, ways));
  } else if (name == "ResNet12-cost-only") {
    s.input = {3, 84, 84, true};
    std::size_t in = 3;
    for (std::size_t width : {64u, 128u, 256u, 512u}) {
      s.layers.push_back(LayerSpec::marker(LayerKind::residual_begin));
      for (int c = 0; c < 3; ++c) {
        s.layers.push_back(LayerSpec::conv2d(c == 0 ? in : width, width, 3, 1, 1));
        s.layers.push_back(LayerSpec::group_norm(width, 4));
        if (c < 2) s.layers.push_back(LayerSpec::relu());
      }
      s.layers.push_back(LayerSpec::marker(LayerKind::residual_shortcut));
      s.layers.push_back(LayerSpec::conv2d(in, width, 1, 1, 0));
      s.layers.push_back(LayerSpec::group_norm(width, 4));
      s.layers.push_back(LayerSpec::marker(LayerKind::residual_end));
      s.layers.push_back(LayerSpec::relu());
      s.layers.push_back(LayerSpec::max_pool(2, 2));
      in = width;
    }
    s.layers.push_back(LayerSpec::marker(LayerKind::global_avg_pool));
    s.layers.push_back(LayerSpec::fully_connected(512, ways));
  } else if (name == "MLP-100-100") {
    s.input = {20, 1, 1, false};
    s.layers = {LayerSpec::fully_connected(20, 100), LayerSpec::relu(), LayerSpec::fully_connected(100, 100),
                LayerSpec::relu(), LayerSpec::fully_connected(100, 6)};
  } else if (name == "MLP-40-40") {
    s.input = {1, 1, 1, false};
    s.layers = {LayerSpec::fully_connected(1, 40), LayerSpec::relu(), LayerSpec::fully_connected(40, 40),
                LayerSpec::relu(), LayerSpec::fully_connected(40, 1)};
  } else {
    fail(ErrorKind::invalid_argument, "unknown preset '" + std::string(name) + "'");
  }
  s.shapes();
  return s;
}

std::vector<std::string> NetworkSpec::preset_names() { return {"4Conv", "ResNet12-cost-only", "MLP-100-100", "MLP-40-40"}; }

std::vector<Tensor> init_params(const NetworkSpec& spec, Rng& rng) {
  std::vector<Tensor> params;
  for (std::size_t i : spec.trainable_layers()) {
    const LayerSpec& l = spec.layers[i];
    const auto shapes = l.param_shapes();
    if (l.kind == LayerKind::group_norm) {
      params.emplace_back(shapes[0], 1.0);
      params.emplace_back(shapes[1], 0.0);
    } else {
      const double fan_in = static_cast<double>(l.in_channels * l.kernel * l.kernel);
      params.push_back(rng.normal_tensor(shapes[0], std::sqrt(2.0 / fan_in)));
      params.emplace_back(shapes[1], 0.0);
    }
  }
  return params;
}

// ---------------------------------------------------------------------------
// Masks and storage

CriticalRatio CriticalRatio::of(std::span<const double> scores) {
  CriticalRatio r;
  r.channels = scores.size();
  for (double s : scores) r.nonzero += s != 0.0;
  return r;
}

ChannelMask ChannelMask::ones(std::size_t in, std::size_t out) {
  return {std::vector<double>(in, 1.0), std::vector<double>(out, 1.0)};
}

std::uint64_t LayerCache::sigma_bits(const LayerSpec& spec) const {
  if (spec.kind == LayerKind::relu) return relu_bits.size();
  if (spec.kind == LayerKind::max_pool) {
    std::uint64_t bits = 0;
    while ((std::uint64_t{1} << bits) < spec.window * spec.window) ++bits;
    return bits * pool_pos.size();
  }
  return 0;
}

ActivationStore::ActivationStore(std::size_t layers) : slots_(layers) {}

void ActivationStore::store(std::size_t layer, const Tensor& x, std::span<const double> fw) {
  require(layer < slots_.size(), ErrorKind::invalid_argument, "store: layer index out of range");
  require(x.rank() >= 2 && x.dim(1) == fw.size(), ErrorKind::shape,
          "store: mask length " + std::to_string(fw.size()) + " does not match " + std::to_string(x.rank() >= 2 ? x.dim(1) : 0) +
              " channels");
  StoredActivation s;
  s.total_channels = fw.size();
  for (std::size_t c = 0; c < fw.size(); ++c) {
    require(fw[c] >= 0.0, ErrorKind::invalid_argument, "store: negative channel score");
    if (fw[c] != 0.0) s.channels.push_back(c);
  }
  const std::size_t batch = x.dim(0), C = x.dim(1), S = spatial_size(x.shape());
  Shape shape = x.shape();
  shape[1] = s.channels.size();
  if (!s.channels.empty()) {
    s.data = Tensor(shape);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < s.channels.size(); ++j) {
        const std::size_t c = s.channels[j];
        const double* src = x.data().data() + (b * C + c) * S;
        double* dst = s.data.data().data() + (b * s.channels.size() + j) * S;
        for (std::size_t e = 0; e < S; ++e) dst[e] = fw[c] * src[e];
      }
  }
  if (slots_[layer]) words_ -= slots_[layer]->data.size();
  words_ += s.data.size();
  slots_[layer] = std::move(s);
}

const StoredActivation* ActivationStore::get(std::size_t layer) const {
  if (layer >= slots_.size() || !slots_[layer]) return nullptr;
  return &*slots_[layer];
}

std::uint64_t ActivationStore::layer_words(std::size_t layer) const {
  const auto* s = get(layer);
  return s ? s->data.size() : 0;
}

void ActivationStore::clear() {
  for (auto& s : slots_) s.reset();
  words_ = 0;
  sigma_bits_ = 0;
}

// ---------------------------------------------------------------------------
// Runtime layers

namespace {

void check_params(const LayerSpec& spec, std::span<const Tensor> params) {
  const auto shapes = spec.param_shapes();
  require(params.size() == shapes.size(), ErrorKind::shape,
          std::string(kind_name(spec.kind)) + ": expected " + std::to_string(shapes.size()) + " parameter tensors");
  for (std::size_t i = 0; i < shapes.size(); ++i)
    require(params[i].shape() == shapes[i], ErrorKind::shape,
            std::string(kind_name(spec.kind)) + ": parameter " + std::to_string(i) + " has shape " +
                shape_str(params[i].shape()) + ", expected " + shape_str(shapes[i]));
}

Tensor group_norm_forward(const LayerSpec& spec, std::span<const Tensor> params, const Tensor& x, LayerCache& cache) {
  require(x.rank() >= 2 && x.dim(1) == spec.in_channels, ErrorKind::shape, "group_norm: channel mismatch");
  const std::size_t B = x.dim(0), C = x.dim(1), G = spec.groups, S = spatial_size(x.shape());
  const std::size_t M = (C / G) * S;
  cache.xhat = Tensor(x.shape());
  cache.rstd.assign(B * G, 0.0);
  Tensor y(x.shape());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t g = 0; g < G; ++g) {
      const std::size_t base = (b * C + g * (C / G)) * S;
      double mean = 0.0;
      for (std::size_t e = 0; e < M; ++e) mean += x[base + e];
      mean /= static_cast<double>(M);
      double var = 0.0;
      for (std::size_t e = 0; e < M; ++e) var += (x[base + e] - mean) * (x[base + e] - mean);
      var /= static_cast<double>(M);
      const double rstd = 1.0 / std::sqrt(var + kGroupNormEps);
      cache.rstd[b * G + g] = rstd;
      for (std::size_t e = 0; e < M; ++e) {
        const std::size_t c = g * (C / G) + e / S;
        const double xh = (x[base + e] - mean) * rstd;
        cache.xhat[base + e] = xh;
        y[base + e] = params[0][c] * xh + params[1][c];
      }
    }
  }
  return y;
}

Tensor group_norm_input_grad(const LayerSpec& spec, std::span<const Tensor> params, const LayerCache& cache,
                             const Tensor& gy) {
  const std::size_t B = gy.dim(0), C = gy.dim(1), G = spec.groups, S = spatial_size(gy.shape());
  const std::size_t M = (C / G) * S;
  Tensor gx(gy.shape());
  std::vector<double> gxh(M);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t g = 0; g < G; ++g) {
      const std::size_t base = (b * C + g * (C / G)) * S;
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t e = 0; e < M; ++e) {
        const std::size_t c = g * (C / G) + e / S;
        gxh[e] = gy[base + e] * params[0][c];
        s1 += gxh[e];
        s2 += gxh[e] * cache.xhat[base + e];
      }
      const double rstd = cache.rstd[b * G + g];
      const double m = static_cast<double>(M);
      for (std::size_t e = 0; e < M; ++e) gx[base + e] = rstd / m * (m * gxh[e] - s1 - cache.xhat[base + e] * s2);
    }
  }
  return gx;
}

Tensor flatten(const Tensor& x) {
  std::size_t rest = 1;
  for (std::size_t i = 1; i < x.rank(); ++i) rest *= x.dim(i);
  return x.reshaped({x.dim(0), rest});
}

}  // namespace

Tensor layer_forward(const LayerSpec& spec, std::span<const Tensor> params, const Tensor& x, LayerCache& cache) {
  check_params(spec, params);
  require(x.rank() >= 2, ErrorKind::shape, "layer input must be batched");
  cache = LayerCache{};
  cache.in_shape = x.shape();
  Tensor y;
  switch (spec.kind) {
    case LayerKind::conv2d: {
      require(x.rank() == 4, ErrorKind::shape, "conv2d expects [B, C, H, W]");
      y = kernels::conv2d(x, params[0], {spec.kernel, spec.stride, spec.padding});
      const std::size_t S = spatial_size(y.shape());
      for (std::size_t b = 0; b < y.dim(0); ++b)
        for (std::size_t f = 0; f < y.dim(1); ++f)
          for (std::size_t e = 0; e < S; ++e) y[(b * y.dim(1) + f) * S + e] += params[1][f];
      break;
    }
    case LayerKind::fully_connected: {
      const Tensor xf = flatten(x);
      require(xf.dim(1) == spec.in_channels, ErrorKind::shape,
              "fully_connected expects " + std::to_string(spec.in_channels) + " inputs, got " + std::to_string(xf.dim(1)));
      y = kernels::matmul(xf, kernels::transpose(params[0]));
      for (std::size_t b = 0; b < y.dim(0); ++b)
        for (std::size_t f = 0; f < y.dim(1); ++f) y[b * y.dim(1) + f] += params[1][f];
      break;
    }
    case LayerKind::group_norm:
      y = group_norm_forward(spec, params, x, cache);
      break;
    case LayerKind::relu: {
      y = Tensor(x.shape());
      cache.relu_bits.resize(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) {
        const bool on = x[i] > 0.0;
        cache.relu_bits[i] = on;
        y[i] = on ? x[i] : 0.0;
      }
      break;
    }
    case LayerKind::max_pool: {
      require(x.rank() == 4, ErrorKind::shape, "max_pool expects [B, C, H, W]");
      kernels::PoolResult r = kernels::max_pool(x, spec.window, spec.stride);
      const std::size_t H = x.dim(2), W = x.dim(3), Ho = r.y.dim(2), Wo = r.y.dim(3);
      cache.pool_pos.resize(r.argmax.size());
      for (std::size_t o = 0; o < r.argmax.size(); ++o) {
        const std::size_t within = r.argmax[o] % (H * W);
        const std::size_t i = (o / Wo) % Ho, j = o % Wo;
        const std::size_t m = within / W - i * spec.stride, n = within % W - j * spec.stride;
        cache.pool_pos[o] = static_cast<std::uint8_t>(m * spec.window + n);
      }
      y = std::move(r.y);
      break;
    }
    default:
      fail(ErrorKind::unsupported, std::string(kind_name(spec.kind)) + " is supported by the cost model only");
  }
  check_finite(y, "layer forward");
  cache.ready = true;
  return y;
}

Tensor layer_input_grad(const LayerSpec& spec, std::span<const Tensor> params, const LayerCache& cache,
                        const Tensor& gy) {
  require(cache.ready, ErrorKind::state, "layer_input_grad called before forward");
  check_params(spec, params);
  switch (spec.kind) {
    case LayerKind::conv2d:
      return kernels::conv2d_input_grad(gy, params[0], {spec.kernel, spec.stride, spec.padding}, cache.in_shape[2],
                                        cache.in_shape[3]);
    case LayerKind::fully_connected:
      return kernels::matmul(gy, params[0]).reshaped(cache.in_shape);
    case LayerKind::group_norm:
      require(gy.shape() == cache.in_shape, ErrorKind::shape, "group_norm gradient shape mismatch");
      return group_norm_input_grad(spec, params, cache, gy);
    case LayerKind::relu: {
      require(gy.shape() == cache.in_shape, ErrorKind::shape, "relu gradient shape mismatch");
      Tensor gx(gy.shape());
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] = cache.relu_bits[i] ? gy[i] : 0.0;
      return gx;
    }
    case LayerKind::max_pool: {
      require(gy.size() == cache.pool_pos.size(), ErrorKind::shape, "max_pool gradient shape mismatch");
      const std::size_t H = cache.in_shape[2], W = cache.in_shape[3], Ho = gy.dim(2), Wo = gy.dim(3);
      Tensor gx(cache.in_shape);
      for (std::size_t o = 0; o < gy.size(); ++o) {
        const std::size_t bc = o / (Ho * Wo), i = (o / Wo) % Ho, j = o % Wo;
        const std::size_t m = cache.pool_pos[o] / spec.window, n = cache.pool_pos[o] % spec.window;
        gx[bc * H * W + (i * spec.stride + m) * W + j * spec.stride + n] += gy[o];
      }
      return gx;
    }
    default:
      fail(ErrorKind::unsupported, std::string(kind_name(spec.kind)) + " is supported by the cost model only");
  }
}

WeightGrad layer_weight_grad_masked(const LayerSpec& spec, const StoredActivation& stored, const Tensor& gy,
                                    const ChannelMask& mask) {
  require(spec.trainable(), ErrorKind::invalid_argument, "weight gradient of a layer without weights");
  require(mask.fw.size() == spec.in_channels && mask.bw.size() == spec.out_channels, ErrorKind::shape,
          "mask lengths do not match layer channels");
  require(stored.total_channels == spec.in_channels, ErrorKind::state, "stored activation belongs to another layer");
  for (std::size_t c = 0; c < mask.fw.size(); ++c) {
    if (mask.fw[c] == 0.0) continue;
    require(std::binary_search(stored.channels.begin(), stored.channels.end(), c), ErrorKind::state,
            "stored activation is missing channel " + std::to_string(c) + " required by the forward mask");
  }
  const auto shapes = spec.param_shapes();
  WeightGrad out{Tensor(shapes[0]), Tensor(shapes[1]), 0};
  const std::size_t B = gy.dim(0), Co = gy.dim(1);
  require(Co == spec.out_channels, ErrorKind::shape, "output gradient channel mismatch");
  const std::size_t So = spatial_size(gy.shape());

  std::vector<std::size_t> outs;
  for (std::size_t f = 0; f < Co; ++f)
    if (mask.bw[f] != 0.0) outs.push_back(f);
  // Stored slots whose channel is still selected by the forward mask.
  std::vector<std::size_t> slots;
  for (std::size_t j = 0; j < stored.channels.size(); ++j)
    if (mask.fw[stored.channels[j]] != 0.0) slots.push_back(j);

  auto bias_sum = [&](std::size_t f) {
    double acc = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t e = 0; e < So; ++e) acc += gy[(b * Co + f) * So + e];
    return acc;
  };

  switch (spec.kind) {
    case LayerKind::conv2d: {
      if (outs.empty()) break;
      for (std::size_t f : outs) out.bias[f] = mask.bw[f] * bias_sum(f);
      if (slots.empty()) break;
      const kernels::ConvGeometry geo{spec.kernel, spec.stride, spec.padding};
      const Tensor compact = kernels::conv2d_weight_grad_pairs(stored.data, gy, geo, outs, slots);
      const std::size_t n = stored.channels.size(), k2 = spec.kernel * spec.kernel;
      for (std::size_t f : outs)
        for (std::size_t j : slots) {
          const std::size_t c = stored.channels[j];
          for (std::size_t e = 0; e < k2; ++e)
            out.weight[(f * spec.in_channels + c) * k2 + e] = mask.bw[f] * compact[(f * n + j) * k2 + e];
        }
      out.macs = static_cast<std::uint64_t>(B) * outs.size() * slots.size() * k2 * So;
      break;
    }
    case LayerKind::fully_connected: {
      if (outs.empty()) break;
      for (std::size_t f : outs) out.bias[f] = mask.bw[f] * bias_sum(f);
      const std::size_t n = stored.channels.size();
      for (std::size_t f : outs)
        for (std::size_t j : slots) {
          double acc = 0.0;
          for (std::size_t b = 0; b < B; ++b) acc += gy[b * Co + f] * stored.data[b * n + j];
          out.weight[f * spec.in_channels + stored.channels[j]] = mask.bw[f] * acc;
        }
      out.macs = static_cast<std::uint64_t>(B) * outs.size() * slots.size();
      break;
    }
    case LayerKind::group_norm: {
      const std::size_t n = stored.channels.size();
      std::uint64_t pairs = 0;
      for (std::size_t j : slots) {
        const std::size_t c = stored.channels[j];
        if (mask.bw[c] == 0.0) continue;
        double acc = 0.0, bias = 0.0;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t e = 0; e < So; ++e) {
            acc += gy[(b * Co + c) * So + e] * stored.data[(b * n + j) * So + e];
            bias += gy[(b * Co + c) * So + e];
          }
        out.weight[c] = mask.bw[c] * acc;
        out.bias[c] = mask.bw[c] * mask.fw[c] * bias;
        ++pairs;
      }
      out.macs = 2 * static_cast<std::uint64_t>(B) * pairs * So;
      break;
    }
    default:
      break;
  }
  return out;
}

std::uint64_t forward_macs(const LayerSpec& spec, const ActShape& in) {
  if (!spec.trainable()) return 0;
  const ActShape o = spec.output_shape(in);
  const std::size_t spatial = spec.kind == LayerKind::fully_connected ? 1 : o.h * o.w;
  return static_cast<std::uint64_t>(spatial) * spec.weight_words();
}

std::uint64_t input_grad_macs(const LayerSpec& spec, const ActShape& in) {
  if (!spec.trainable()) return 0;
  const std::size_t spatial = spec.kind == LayerKind::fully_connected ? 1 : in.h * in.w;
  return static_cast<std::uint64_t>(spatial) * spec.weight_words();
}

// ---------------------------------------------------------------------------
// Differentiable forms

ad::Var layer_forward_var(const LayerSpec& spec, std::span<const ad::Var> params, const ad::Var& x) {
  using namespace ad;
  switch (spec.kind) {
    case LayerKind::conv2d: {
      Var y = conv2d(x, params[0], {spec.kernel, spec.stride, spec.padding});
      return add(y, channel_broadcast(params[1], y.shape()));
    }
    case LayerKind::fully_connected: {
      const Shape& s = x.shape();
      std::size_t rest = 1;
      for (std::size_t i = 1; i < s.size(); ++i) rest *= s[i];
      const Var xf = reshape(x, {s[0], rest});
      return add(matmul(xf, transpose(params[0])), broadcast_first(params[1], s[0]));
    }
    case LayerKind::group_norm: {
      const Shape& s = x.shape();
      const std::size_t B = s[0], C = s[1], G = spec.groups, M = (C / G) * spatial_size(s);
      const Var xr = reshape(x, {B, G, M});
      const Var mean = scale(sum_last(xr), 1.0 / static_cast<double>(M));
      const Var centered = sub(xr, broadcast_last(mean, M));
      const Var var = scale(sum_last(mul(centered, centered)), 1.0 / static_cast<double>(M));
      const Var rstd = pow_scalar(add_scalar(var, kGroupNormEps), -0.5);
      const Var xhat = reshape(mul(centered, broadcast_last(rstd, M)), s);
      return add(mul(xhat, channel_broadcast(params[0], s)), channel_broadcast(params[1], s));
    }
    case LayerKind::relu:
      return relu(x);
    case LayerKind::max_pool:
      return max_pool(x, spec.window, spec.stride);
    default:
      fail(ErrorKind::unsupported, std::string(kind_name(spec.kind)) + " is supported by the cost model only");
  }
}

}  // namespace pmeta
