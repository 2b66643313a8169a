#include "pmeta/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "pmeta/error.hpp"

namespace pmeta {

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write '" + path + "'");
  out << text;
  require(static_cast<bool>(out), ErrorKind::io, "write to '" + path + "' failed");
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  require(ec == std::errc() && p == v.data() + v.size(), ErrorKind::parse,
          "config key '" + key + "' needs a non-negative integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  require(pos == v.size() && !v.empty(), ErrorKind::parse, "config key '" + key + "' needs a number, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorKind::parse, "config key '" + key + "' needs true/false, got '" + v + "'");
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

using Setter = std::function<void(ExperimentConfig&, const std::string&, const std::string&)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Field {
  Setter set;
  Getter get;
};

template <typename T>
Field size_field(T ExperimentConfig::*outer, std::size_t T::*member) {
  return {[=](ExperimentConfig& c, const std::string& k, const std::string& v) { (c.*outer).*member = to_uint(k, v); },
          [=](const ExperimentConfig& c) { return std::to_string((c.*outer).*member); }};
}

Field train_size(std::size_t MetaTrainConfig::*m) { return size_field(&ExperimentConfig::train, m); }

Field train_double(double MetaTrainConfig::*m) {
  return {[=](ExperimentConfig& c, const std::string& k, const std::string& v) { c.train.*m = to_double(k, v); },
          [=](const ExperimentConfig& c) { return fmt_double(c.train.*m); }};
}

Field train_bool(bool MetaTrainConfig::*m) {
  return {[=](ExperimentConfig& c, const std::string& k, const std::string& v) { c.train.*m = to_bool(k, v); },
          [=](const ExperimentConfig& c) { return std::string(c.train.*m ? "true" : "false"); }};
}

Field own_size(std::size_t ExperimentConfig::*m) {
  return {[=](ExperimentConfig& c, const std::string& k, const std::string& v) { c.*m = to_uint(k, v); },
          [=](const ExperimentConfig& c) { return std::to_string(c.*m); }};
}

Field own_u64(std::uint64_t ExperimentConfig::*m) {
  return {[=](ExperimentConfig& c, const std::string& k, const std::string& v) { c.*m = to_uint(k, v); },
          [=](const ExperimentConfig& c) { return std::to_string(c.*m); }};
}

Field own_string(std::string ExperimentConfig::*m) {
  return {[=](ExperimentConfig& c, const std::string&, const std::string& v) { c.*m = v; },
          [=](const ExperimentConfig& c) { return c.*m; }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> f = {
      {"mode",
       {[](ExperimentConfig& c, const std::string&, const std::string& v) { c.train.mode = parse_mode(v); },
        [](const ExperimentConfig& c) { return mode_name(c.train.mode); }}},
      {"inner_steps", train_size(&MetaTrainConfig::inner_steps)},
      {"task_batch", train_size(&MetaTrainConfig::task_batch)},
      {"epochs", train_size(&MetaTrainConfig::epochs)},
      {"iterations_per_epoch", train_size(&MetaTrainConfig::iterations_per_epoch)},
      {"validation_tasks", train_size(&MetaTrainConfig::validation_tasks)},
      {"validation_every", train_size(&MetaTrainConfig::validation_every)},
      {"alpha0", train_double(&MetaTrainConfig::alpha0)},
      {"lambda", train_double(&MetaTrainConfig::lambda)},
      {"lr", train_double(&MetaTrainConfig::lr)},
      {"lr_min", train_double(&MetaTrainConfig::lr_min)},
      {"beta1", train_double(&MetaTrainConfig::beta1)},
      {"beta2", train_double(&MetaTrainConfig::beta2)},
      {"adam_eps", train_double(&MetaTrainConfig::adam_eps)},
      {"rho_fw", train_double(&MetaTrainConfig::rho_fw)},
      {"rho_bw", train_double(&MetaTrainConfig::rho_bw)},
      {"reduction", train_size(&MetaTrainConfig::reduction)},
      {"first_order", train_bool(&MetaTrainConfig::first_order)},
      {"uniform_attention", train_bool(&MetaTrainConfig::uniform_attention)},
      {"threads", train_size(&MetaTrainConfig::threads)},
      {"seed",
       {[](ExperimentConfig& c, const std::string& k, const std::string& v) { c.train.seed = to_uint(k, v); },
        [](const ExperimentConfig& c) { return std::to_string(c.train.seed); }}},
      {"network", own_string(&ExperimentConfig::network)},
      {"task", own_string(&ExperimentConfig::task)},
      {"shots", own_size(&ExperimentConfig::shots)},
      {"ways", own_size(&ExperimentConfig::ways)},
      {"dim", own_size(&ExperimentConfig::dim)},
      {"query", own_size(&ExperimentConfig::query)},
      {"task_seed", own_u64(&ExperimentConfig::task_seed)},
      {"validation_seed", own_u64(&ExperimentConfig::validation_seed)},
  };
  return f;
}

}  // namespace

ExperimentConfig ExperimentConfig::parse(std::string_view text) {
  ExperimentConfig c;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    require(eq != std::string::npos, ErrorKind::parse,
            "config line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    const auto it = fields().find(key);
    require(it != fields().end(), ErrorKind::parse,
            "config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    require(seen.insert(key).second, ErrorKind::parse,
            "config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    it->second.set(c, key, value);
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) { return parse(read_text_file(path)); }

std::vector<std::string> ExperimentConfig::keys() {
  std::vector<std::string> k;
  for (const auto& [name, _] : fields()) k.push_back(name);
  return k;
}

std::string ExperimentConfig::to_text() const {
  std::string out;
  for (const auto& [name, f] : fields()) out += name + " = " + f.get(*this) + "\n";
  return out;
}

void ExperimentConfig::validate() const {
  train.validate();
  require(task == "sinusoid" || task == "clusters", ErrorKind::parse, "task must be 'sinusoid' or 'clusters'");
  require(shots >= 1, ErrorKind::invalid_argument, "shots must be at least 1");
  if (task == "clusters") require(ways >= 2 && dim >= 1, ErrorKind::invalid_argument, "clusters need ways >= 2, dim >= 1");
}

LossKind ExperimentConfig::loss() const { return task == "clusters" ? LossKind::cross_entropy : LossKind::mse; }

NetworkSpec ExperimentConfig::resolve_network() const {
  if (network == "auto") {
    if (task == "sinusoid") return NetworkSpec::preset("MLP-40-40");
    NetworkSpec n;
    n.input = {dim, 1, 1, false};
    n.layers = {LayerSpec::fully_connected(dim, 40), LayerSpec::relu(), LayerSpec::fully_connected(40, 40),
                LayerSpec::relu(), LayerSpec::fully_connected(40, ways)};
    return n;
  }
  for (const auto& name : NetworkSpec::preset_names())
    if (name == network) return NetworkSpec::preset(network, ways);
  return NetworkSpec::parse(read_text_file(network));
}

std::unique_ptr<TaskSource> ExperimentConfig::task_source(std::uint64_t seed) const {
  if (task == "sinusoid") return std::make_unique<SinusoidTasks>(seed, shots, query ? query : 10);
  return std::make_unique<ClusterTasks>(seed, ways, shots, dim, query ? query : 15);
}

std::vector<Task> ExperimentConfig::tasks(std::uint64_t seed, std::size_t count) const {
  auto src = task_source(seed);
  std::vector<Task> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(src->next());
  return out;
}

}  // namespace pmeta
