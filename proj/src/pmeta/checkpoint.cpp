#include "pmeta/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "pmeta/error.hpp"
#include "pmeta/rng.hpp"

namespace pmeta {

namespace {

constexpr char kMagic[7] = {'P', 'M', 'E', 'T', 'A', '1', '\0'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

class Writer {
 public:
  template <typename T>
  void put(T v) {
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    out_.insert(out_.end(), raw, raw + sizeof(T));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void text(const std::string& s) {
    put<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  void tensors(const std::vector<Tensor>& list) {
    put<std::uint32_t>(static_cast<std::uint32_t>(list.size()));
    for (const Tensor& t : list) {
      put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
      for (std::size_t d : t.shape()) put<std::uint64_t>(d);
      for (double v : t.data()) put<double>(v);
    }
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, in_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }
  std::string text() {
    const std::uint64_t n = get<std::uint64_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<Tensor> tensors() {
    const std::uint32_t count = get<std::uint32_t>();
    std::vector<Tensor> list;
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint32_t rank = get<std::uint32_t>();
      require(rank >= 1 && rank <= 8, ErrorKind::parse, "checkpoint: bad tensor rank");
      Shape shape;
      std::uint64_t numel = 1;
      for (std::uint32_t d = 0; d < rank; ++d) {
        shape.push_back(get<std::uint64_t>());
        numel *= shape.back();
      }
      need(numel * sizeof(double));
      std::vector<double> data(numel);
      for (auto& v : data) v = get<double>();
      list.emplace_back(std::move(shape), std::move(data));
    }
    return list;
  }
  void magic() {
    need(sizeof kMagic);
    require(std::memcmp(in_.data(), kMagic, sizeof kMagic) == 0, ErrorKind::parse, "checkpoint: bad magic");
    pos_ += sizeof kMagic;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::uint64_t n) const {
    require(n <= in_.size() - pos_, ErrorKind::parse, "checkpoint: truncated file");
  }
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

std::string settings_text(const AdaptPlan& p) {
  std::ostringstream o;
  o.precision(17);
  o << "attention=" << (p.attention_enabled ? 1 : 0) << "\n"
    << "reduction=" << p.attention.reduction << "\n"
    << "rho_fw=" << p.rho_fw << "\n"
    << "rho_bw=" << p.rho_bw << "\n";
  return o.str();
}

}  // namespace

std::vector<std::uint8_t> serialize_plan(const AdaptPlan& plan) {
  plan.validate();
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.text(plan.network.to_text());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(plan.layers()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(plan.steps()));
  for (double a : plan.alpha.data()) w.put<double>(a);
  w.tensors(plan.attention_enabled ? plan.attention.flatten() : std::vector<Tensor>{});
  w.tensors(plan.weights);
  w.text(settings_text(plan));
  return w.take();
}

AdaptPlan deserialize_plan(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  r.magic();
  const std::uint32_t version = r.get<std::uint32_t>();
  require(version == kCheckpointVersion, ErrorKind::parse,
          "checkpoint: unsupported version " + std::to_string(version));
  AdaptPlan p;
  p.network = NetworkSpec::parse(r.text());
  const std::uint32_t L = r.get<std::uint32_t>(), K = r.get<std::uint32_t>();
  require(static_cast<std::uint64_t>(L) * K <= (1u << 24), ErrorKind::parse, "checkpoint: step-size matrix too large");
  p.alpha = Tensor({L, K});
  for (double& a : p.alpha.data()) a = r.get<double>();
  const std::vector<Tensor> attention = r.tensors();
  p.weights = r.tensors();

  std::map<std::string, std::string> settings;
  std::istringstream in(r.text());
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::parse, "checkpoint: bad settings line '" + line + "'");
    settings[line.substr(0, eq)] = line.substr(eq + 1);
  }
  require(r.done(), ErrorKind::parse, "checkpoint: trailing bytes");
  try {
    p.attention_enabled = settings.at("attention") == "1";
    p.attention.reduction = std::stoul(settings.at("reduction"));
    p.rho_fw = std::stod(settings.at("rho_fw"));
    p.rho_bw = std::stod(settings.at("rho_bw"));
  } catch (const std::exception&) {
    fail(ErrorKind::parse, "checkpoint: missing or malformed plan settings");
  }
  if (p.attention_enabled) {
    Rng scratch(0);
    p.attention = AttentionParams::init(p.network, p.attention.reduction, scratch);
    p.attention.assign(attention);
  } else {
    require(attention.empty(), ErrorKind::parse, "checkpoint: attention tensors present but attention disabled");
  }
  p.validate();
  return p;
}

void save_plan(const AdaptPlan& plan, const std::string& path) {
  const auto bytes = serialize_plan(plan);
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::io, "write to '" + path + "' failed");
}

AdaptPlan load_plan(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_plan(bytes);
}

}  // namespace pmeta
