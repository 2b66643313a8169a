#include "pmeta/cost_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "pmeta/attention.hpp"
#include "pmeta/error.hpp"

namespace pmeta::cost {

std::string method_name(Method m) {
  switch (m) {
    case Method::maml:
      return "maml";
    case Method::maml_pp:
      return "maml++";
    case Method::anil:
      return "anil";
    case Method::boil:
      return "boil";
    case Method::pmeta:
      return "p-meta";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  if (name == "maml") return Method::maml;
  if (name == "maml++" || name == "mamlpp") return Method::maml_pp;
  if (name == "anil") return Method::anil;
  if (name == "boil") return Method::boil;
  if (name == "p-meta" || name == "pmeta") return Method::pmeta;
  fail(ErrorKind::invalid_argument, "unknown method '" + name + "'");
}

StepMasks StepMasks::for_method(const NetworkSpec& net, Method method) {
  const auto trainable = net.trainable_layers();
  const std::size_t T = trainable.size();
  StepMasks s;
  for (std::size_t t = 0; t < T; ++t) {
    const LayerSpec& l = net.layers[trainable[t]];
    bool on = true;
    if (method == Method::anil) on = t + 1 == T;
    if (method == Method::boil) on = t + 1 != T;
    s.active.push_back(on);
    s.mu_fw.push_back({l.in_channels, l.in_channels});
    s.mu_bw.push_back({l.out_channels, l.out_channels});
  }
  return s;
}

CostQuery method_query(const NetworkSpec& net, Method method, std::size_t batch, std::size_t steps) {
  CostQuery q;
  q.network = net;
  q.batch = batch;
  q.steps.assign(steps, StepMasks::for_method(net, method));
  q.attention = method == Method::pmeta;
  return q;
}

LayerMemory layer_memory(const NetworkSpec& net, std::size_t layer) {
  require(layer < net.layers.size(), ErrorKind::invalid_argument, "layer index out of range");
  const auto shapes = net.shapes();
  return {shapes[layer + 1].words(), net.layers[layer].weight_words()};
}

namespace {

std::uint64_t sigma_bits_per_output(const LayerSpec& l) {
  if (l.kind == LayerKind::relu) return 1;
  if (l.kind == LayerKind::max_pool) {
    std::uint64_t bits = 0;
    while ((std::uint64_t{1} << bits) < l.window * l.window) ++bits;
    return bits;
  }
  return 0;
}

// Fully connected layers see their input flattened into in_channels features.
std::size_t input_spatial(const LayerSpec& l, const ActShape& in) {
  return l.kind == LayerKind::fully_connected ? 1 : in.h * in.w;
}

void check_step(const NetworkSpec& net, const std::vector<std::size_t>& trainable, const StepMasks& s) {
  require(s.active.size() == trainable.size() && s.mu_fw.size() == trainable.size() &&
              s.mu_bw.size() == trainable.size(),
          ErrorKind::invalid_argument, "step masks must cover every trainable layer");
  for (std::size_t t = 0; t < trainable.size(); ++t) {
    const LayerSpec& l = net.layers[trainable[t]];
    require(s.mu_fw[t].channels == l.in_channels && s.mu_fw[t].nonzero <= l.in_channels &&
                s.mu_bw[t].channels == l.out_channels && s.mu_bw[t].nonzero <= l.out_channels,
            ErrorKind::invalid_argument, "critical ratio does not match layer channels");
  }
}

// Position of the first updated layer, or layers.size() when none is.
std::size_t first_active(const std::vector<std::size_t>& trainable, const StepMasks& s, std::size_t n_layers) {
  for (std::size_t t = 0; t < trainable.size(); ++t)
    if (s.active[t]) return trainable[t];
  return n_layers;
}

struct SweepPoint {
  double live = 0;  // per sample
  double stores = 0, sigma = 0, held = 0, working = 0;
  std::size_t layer = 0;
};

// Forward liveness sweep for one adaptation step; per-sample words.
SweepPoint sweep(const NetworkSpec& net, const StepMasks* step) {
  const auto shapes = net.shapes();
  const auto trainable = net.trainable_layers();
  std::vector<long> slot(net.layers.size(), -1);
  for (std::size_t t = 0; t < trainable.size(); ++t) slot[trainable[t]] = static_cast<long>(t);
  const std::size_t lmin = step ? first_active(trainable, *step, net.layers.size()) : net.layers.size();

  struct Block {
    std::size_t input = 0, main_out = 0;
    bool shortcut = false;
  };
  std::vector<Block> blocks;
  std::vector<double> act_words{static_cast<double>(shapes[0].words())};
  std::set<std::size_t> aliased;
  double private_stores = 0, alias_words = 0;
  std::uint64_t bits = 0;
  std::size_t cur = 0;
  SweepPoint best;

  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& l = net.layers[i];
    if (l.kind == LayerKind::residual_begin) {
      blocks.push_back({cur, 0, false});
      continue;
    }
    if (l.kind == LayerKind::residual_shortcut) {
      require(!blocks.empty(), ErrorKind::invalid_argument, "residual_shortcut outside a block");
      blocks.back().main_out = cur;
      blocks.back().shortcut = true;
      cur = blocks.back().input;
      continue;
    }

    bool input_held = false;
    double held = 0;
    for (const Block& b : blocks) {
      const std::size_t id = b.shortcut ? b.main_out : b.input;
      if (id == cur) {
        input_held = true;
        continue;
      }
      if (!aliased.count(id)) held += act_words[id];
    }

    const double m_in = act_words[cur];
    const double m_out = static_cast<double>(shapes[i + 1].words());
    double s = 0;
    bool alias = false;
    if (step && slot[i] >= 0 && step->active[static_cast<std::size_t>(slot[i])]) {
      const CriticalRatio& mu = step->mu_fw[static_cast<std::size_t>(slot[i])];
      s = static_cast<double>(mu.nonzero * input_spatial(l, shapes[i]));
      alias = l.kind != LayerKind::group_norm && mu.nonzero == mu.channels && !input_held;
    }
    double work = 0;
    if (alias)
      work = m_in + m_out;
    else if (input_held)
      work = m_in + s + m_out;
    else
      work = std::max(m_in, s + m_out);
    if (i >= lmin) bits += sigma_bits_per_output(l) * shapes[i + 1].words();

    const double sigma = static_cast<double>(bits) / 32.0;
    const double live = private_stores + alias_words + sigma + held + work;
    if (live > best.live) best = {live, private_stores + alias_words, sigma, held, work, i};

    if (alias) {
      if (aliased.insert(cur).second) alias_words += m_in;
    } else {
      private_stores += s;
    }
    act_words.push_back(m_out);
    cur = act_words.size() - 1;
    if (l.kind == LayerKind::residual_end) {
      require(!blocks.empty() && blocks.back().shortcut, ErrorKind::invalid_argument, "unbalanced residual block");
      blocks.pop_back();
    }
  }
  return best;
}

double attention_words(const NetworkSpec& net, const StepMasks& s) {
  const auto trainable = net.trainable_layers();
  double w = 0;
  for (std::size_t t = 0; t + 1 < trainable.size(); ++t)
    if (s.active[t]) {
      const LayerSpec& l = net.layers[trainable[t]];
      w += static_cast<double>(l.in_channels + l.out_channels);
    }
  return w;
}

double attention_macs(const NetworkSpec& net, const StepMasks& s) {
  const auto trainable = net.trainable_layers();
  double m = 0;
  auto module = [](std::size_t c) {
    const std::size_t h = (c + kDefaultReduction - 1) / kDefaultReduction;
    return 2.0 * static_cast<double>(c * h);
  };
  for (std::size_t t = 0; t + 1 < trainable.size(); ++t)
    if (s.active[t]) {
      const LayerSpec& l = net.layers[trainable[t]];
      m += module(l.in_channels) + module(l.out_channels);
    }
  return m;
}

}  // namespace

InferenceCost inference_cost(const NetworkSpec& net, std::size_t batch, std::size_t rows_per_sample) {
  InferenceCost c;
  const SweepPoint p = sweep(net, nullptr);
  c.peak_words = static_cast<double>(rows_per_sample) * p.live;
  c.peak_layer = p.layer;
  const auto shapes = net.shapes();
  double per_sample = 0;
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    per_sample += static_cast<double>(forward_macs(net.layers[i], shapes[i]));
  c.macs = static_cast<double>(batch) * per_sample;
  return c;
}

std::uint64_t stored_words_term(const NetworkSpec& net, std::size_t t, const StepMasks& step, std::size_t batch) {
  const auto trainable = net.trainable_layers();
  require(t < trainable.size(), ErrorKind::invalid_argument, "trainable index out of range");
  check_step(net, trainable, step);
  if (!step.active[t]) return 0;
  const LayerSpec& l = net.layers[trainable[t]];
  return static_cast<std::uint64_t>(batch) * step.mu_fw[t].nonzero * input_spatial(l, net.shapes()[trainable[t]]);
}

double weight_grad_macs_term(const NetworkSpec& net, std::size_t t, const StepMasks& step, std::size_t batch) {
  const auto trainable = net.trainable_layers();
  require(t < trainable.size(), ErrorKind::invalid_argument, "trainable index out of range");
  check_step(net, trainable, step);
  if (!step.active[t]) return 0;
  const LayerSpec& l = net.layers[trainable[t]];
  const ActShape out = net.shapes()[trainable[t] + 1];
  const double spatial = l.kind == LayerKind::fully_connected ? 1.0 : static_cast<double>(out.h * out.w);
  const double B = static_cast<double>(batch);
  if (l.kind == LayerKind::group_norm)
    return B * step.mu_fw[t].value() * step.mu_bw[t].value() * spatial * static_cast<double>(l.weight_words());
  const double k2 = l.kind == LayerKind::conv2d ? static_cast<double>(l.kernel * l.kernel) : 1.0;
  return B * static_cast<double>(step.mu_fw[t].nonzero) * static_cast<double>(step.mu_bw[t].nonzero) * k2 * spatial;
}

MemoryBreakdown adapt_peak_memory(const CostQuery& q) {
  require(!q.steps.empty(), ErrorKind::invalid_argument, "cost query needs at least one step");
  require(q.batch > 0, ErrorKind::invalid_argument, "cost query batch must be positive");
  const NetworkSpec& net = q.network;
  const auto shapes = net.shapes();
  const auto trainable = net.trainable_layers();
  const double B = static_cast<double>(q.batch);

  double max_act = 0;
  for (const ActShape& s : shapes) max_act = std::max(max_act, static_cast<double>(s.words()));

  MemoryBreakdown out;
  double best_formula = -1;
  for (std::size_t k = 0; k < q.steps.size(); ++k) {
    const StepMasks& step = q.steps[k];
    check_step(net, trainable, step);

    double weights = 0;
    std::uint64_t dominant = 0;
    for (std::size_t t = 0; t < trainable.size(); ++t) {
      if (!step.active[t]) continue;
      weights += static_cast<double>(net.layers[trainable[t]].weight_words());
      dominant += stored_words_term(net, t, step, q.batch);
    }
    const std::size_t lmin = first_active(trainable, step, net.layers.size());
    std::uint64_t bits = 0;
    for (std::size_t i = lmin; i < net.layers.size(); ++i)
      bits += sigma_bits_per_output(net.layers[i]) * shapes[i + 1].words();
    out.dominant_per_step.push_back(dominant);

    const double formula_sigma = B * static_cast<double>(bits) / 32.0;
    const double formula = B * max_act + weights + static_cast<double>(dominant) + formula_sigma;
    if (formula > best_formula) {
      best_formula = formula;
      out.formula_max_activation = B * max_act;
      out.formula_weights = weights;
      out.formula_stores = static_cast<double>(dominant);
      out.formula_sigma = formula_sigma;
      out.formula_words = formula;
    }
    out.dominant_words = std::max(out.dominant_words, static_cast<double>(dominant));

    const SweepPoint p = sweep(net, &step);
    const double attn = q.attention ? B * attention_words(net, step) : 0.0;
    const double peak = B * p.live + weights + attn;
    if (k == 0 || peak > out.peak_words) {
      out.peak_words = peak;
      out.peak_step = k;
      out.peak_layer = p.layer;
      out.stores_words = B * p.stores;
      out.sigma_words = B * p.sigma;
      out.held_words = B * p.held;
      out.working_words = B * p.working;
      out.accumulator_words = weights;
      out.attention_words = attn;
    }
  }
  return out;
}

MacBreakdown adapt_macs(const CostQuery& q) {
  require(!q.steps.empty(), ErrorKind::invalid_argument, "cost query needs at least one step");
  const NetworkSpec& net = q.network;
  const auto shapes = net.shapes();
  const auto trainable = net.trainable_layers();
  const double B = static_cast<double>(q.batch);
  MacBreakdown m;
  for (const StepMasks& step : q.steps) {
    check_step(net, trainable, step);
    const std::size_t lmin = first_active(trainable, step, net.layers.size());
    double fwd = 0, wg = 0, ig = 0;
    for (std::size_t t = 0; t < trainable.size(); ++t) {
      const std::size_t i = trainable[t];
      fwd += B * static_cast<double>(forward_macs(net.layers[i], shapes[i]));
      wg += weight_grad_macs_term(net, t, step, q.batch);
      if (i > lmin && lmin < net.layers.size()) ig += B * static_cast<double>(input_grad_macs(net.layers[i], shapes[i]));
    }
    const double attn = q.attention ? B * attention_macs(net, step) : 0.0;
    m.forward.push_back(fwd);
    m.weight_grad.push_back(wg);
    m.input_grad.push_back(ig);
    m.attention.push_back(attn);
    m.per_step.push_back(fwd + wg + ig + attn);
    m.total += m.per_step.back();
  }
  m.mean_per_step = m.total / static_cast<double>(q.steps.size());
  return m;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

std::vector<StepMasks> scenario_steps(const Scenario& s) {
  if (!s.measured.empty()) return s.measured;
  return std::vector<StepMasks>(s.steps, StepMasks::for_method(s.network, parse_method(s.method)));
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

NetworkSpec mlp(std::size_t obs, std::size_t actions) {
  NetworkSpec n;
  n.input = {obs, 1, 1, false};
  n.layers = {LayerSpec::fully_connected(obs, 100), LayerSpec::relu(), LayerSpec::fully_connected(100, 100),
              LayerSpec::relu(), LayerSpec::fully_connected(100, actions)};
  return n;
}

}  // namespace

ReportRow evaluate(const Scenario& s, const MemoryUnits& units) {
  ReportRow r;
  r.model = s.model;
  r.method = s.method;
  r.setting = s.setting;
  const InferenceCost inf = inference_cost(s.network, s.mac_batch, s.rows_per_sample);
  r.inference_mb = units.mb(inf.peak_words);
  r.inference_gmac = inf.macs / 1e9;

  CostQuery mem{s.network, s.memory_batch, scenario_steps(s), s.attention};
  CostQuery mac = mem;
  mac.batch = s.mac_batch;
  r.memory = adapt_peak_memory(mem);
  r.macs = adapt_macs(mac);
  r.adapt_mb = units.mb(r.memory.peak_words);
  r.adapt_gmac = r.macs.mean_per_step / 1e9;
  return r;
}

std::vector<Scenario> table_scenarios(const std::string& table) {
  std::vector<Scenario> out;
  const NetworkSpec conv4 = NetworkSpec::preset("4Conv");
  const NetworkSpec resnet = NetworkSpec::preset("ResNet12-cost-only");
  if (table == "Table1") {
    out.push_back({"4Conv", conv4, "maml", "5-way 5-shot, batch 25", 25, 25, 1, 1, false, {}});
    out.push_back({"ResNet12", resnet, "maml", "5-way 5-shot, batch 25", 25, 25, 1, 1, false, {}});
    out.push_back({"MLP-100-100", mlp(20, 6), "maml", "20 rollouts x 200 steps", 4000, 4000, 200, 1, false, {}});
  } else if (table == "Table2") {
    for (const auto& [name, net] : {std::pair{std::string("4Conv"), conv4}, std::pair{std::string("ResNet12"), resnet}})
      for (const char* method : {"maml", "anil", "boil", "maml++"})
        for (std::size_t shots : {1u, 5u})
          out.push_back({name, net, method, "5-way " + std::to_string(shots) + "-shot, b=1", 1, 5 * shots, 1, 1, false,
                         {}});
  } else if (table == "Table3") {
    for (const auto& [name, net] :
         {std::pair{std::string("MLP cheetah"), mlp(20, 6)}, std::pair{std::string("MLP 2d-nav"), mlp(2, 2)}})
      for (const char* method : {"maml", "anil", "boil", "maml++"})
        out.push_back({name, net, method, "20 rollouts, b=1 rollout", 200, 4000, 200, 1, false, {}});
  } else {
    fail(ErrorKind::invalid_argument, "unknown table '" + table + "' (expected Table1, Table2 or Table3)");
  }
  return out;
}

std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream o;
  o << "model,method,setting,inference_MB,adapt_MB,inference_GMAC,adapt_GMAC\n";
  for (const auto& r : rows)
    o << r.model << ',' << r.method << ",\"" << r.setting << "\"," << fmt(r.inference_mb) << ',' << fmt(r.adapt_mb)
      << ',' << fmt(r.inference_gmac) << ',' << fmt(r.adapt_gmac) << '\n';
  return o.str();
}

std::string report_detail_csv(const std::vector<Scenario>& scenarios) {
  std::ostringstream o;
  o << "model,method,setting,layer,kind,act_words,weight_words,stored_words,forward_MACs,input_grad_MACs,"
       "weight_grad_MACs\n";
  for (const Scenario& s : scenarios) {
    const auto shapes = s.network.shapes();
    const auto trainable = s.network.trainable_layers();
    const StepMasks step = scenario_steps(s).front();
    const std::size_t lmin = first_active(trainable, step, s.network.layers.size());
    const double B = static_cast<double>(s.mac_batch);
    for (std::size_t i = 0; i < s.network.layers.size(); ++i) {
      const LayerSpec& l = s.network.layers[i];
      const auto t = std::find(trainable.begin(), trainable.end(), i);
      std::uint64_t stored = 0;
      double wg = 0, ig = 0;
      if (t != trainable.end()) {
        const std::size_t ti = static_cast<std::size_t>(t - trainable.begin());
        stored = stored_words_term(s.network, ti, step, s.memory_batch);
        wg = weight_grad_macs_term(s.network, ti, step, s.mac_batch);
        if (i > lmin && lmin < s.network.layers.size()) ig = B * static_cast<double>(input_grad_macs(l, shapes[i]));
      }
      o << s.model << ',' << s.method << ",\"" << s.setting << "\"," << i << ',' << kind_name(l.kind) << ','
        << shapes[i + 1].words() << ',' << l.weight_words() << ',' << stored << ','
        << fmt(B * static_cast<double>(forward_macs(l, shapes[i]))) << ',' << fmt(ig) << ',' << fmt(wg) << '\n';
    }
  }
  return o.str();
}

std::string breakdown_text(const ReportRow& r, const MemoryUnits& u) {
  const MemoryBreakdown& m = r.memory;
  std::ostringstream o;
  o << r.model << " / " << r.method << " / " << r.setting << '\n'
    << "  adapt peak " << fmt(u.mb(m.peak_words)) << " MB at step " << m.peak_step << " layer " << m.peak_layer << '\n'
    << "    stores " << fmt(u.mb(m.stores_words)) << "  sigma " << fmt(u.mb(m.sigma_words)) << "  held "
    << fmt(u.mb(m.held_words)) << "  working " << fmt(u.mb(m.working_words)) << "  accumulators "
    << fmt(u.mb(m.accumulator_words)) << "  attention " << fmt(u.mb(m.attention_words)) << '\n'
    << "  formula terms: max activation " << fmt(u.mb(m.formula_max_activation)) << "  weights "
    << fmt(u.mb(m.formula_weights)) << "  stores " << fmt(u.mb(m.formula_stores)) << "  sigma " << fmt(u.mb(m.formula_sigma))
    << "  total " << fmt(u.mb(m.formula_words)) << '\n'
    << "  MACs per step: forward " << fmt(r.macs.forward.front() / 1e9) << "  weight grad "
    << fmt(r.macs.weight_grad.front() / 1e9) << "  input grad " << fmt(r.macs.input_grad.front() / 1e9)
    << "  attention " << fmt(r.macs.attention.front() / 1e9) << " GMAC; total over " << r.macs.per_step.size()
    << " steps " << fmt(r.macs.total / 1e9) << '\n';
  return o.str();
}

}  // namespace pmeta::cost
