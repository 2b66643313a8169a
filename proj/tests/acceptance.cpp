// Acceptance checks 1-9. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails. `--only N[,M...]` restricts the run.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pmeta/adapt_runtime.hpp"
#include "pmeta/attention.hpp"
#include "pmeta/cost_model.hpp"
#include "pmeta/error.hpp"
#include "pmeta/meta_train.hpp"
#include "pmeta/rng.hpp"
#include "pmeta/tasks.hpp"

using namespace pmeta;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void check(bool ok, const std::string& what) {
    if (!ok) {
      if (pass) detail << "first failure: " << what << "; ";
      pass = false;
    }
  }
};

double rel(double got, double want) { return std::abs(got - want) / std::abs(want); }

// Every adapt session run here is checked against the closed-form terms.
struct SessionLedger {
  std::size_t sessions = 0, batches = 0, mismatches = 0;
  void record(const AdaptSession& s) {
    ++sessions;
    for (const auto& b : s.report().batches) {
      ++batches;
      if (b.stored_words != b.predicted_stored_words ||
          static_cast<double>(b.conv_fc_weight_grad_macs) != b.predicted_conv_fc_weight_grad_macs)
        ++mismatches;
    }
  }
};
SessionLedger g_sessions;

std::vector<Tensor> adapt(const AdaptPlan& plan, std::size_t b, const Tensor& x, const Tensor& y, LossKind loss,
                          std::uint64_t* stored = nullptr) {
  AdaptSession s(plan, b, loss);
  auto w = s.adapt(x, y);
  g_sessions.record(s);
  if (stored) *stored = s.report().peak_stored_words();
  return w;
}

// ---------------------------------------------------------------------------
// 1, 2: cost model tables

void criterion_1(Outcome& o) {
  std::vector<cost::ReportRow> rows;
  for (const auto& s : cost::table_scenarios("Table1")) rows.push_back(cost::evaluate(s));
  auto row = [&](const std::string& model) -> const cost::ReportRow& {
    for (const auto& r : rows)
      if (r.model == model) return r;
    fail(ErrorKind::state, "missing Table1 row " + model);
  };
  const auto& c4 = row("4Conv");
  const auto& rn = row("ResNet12");
  const auto& mlp = row("MLP-100-100");
  struct Item {
    const char* name;
    double got, want, tol;
  };
  const Item items[] = {
      {"4Conv inference MB", c4.inference_mb, 0.90, 0.05},   {"4Conv inference GMAC", c4.inference_gmac, 0.72, 0.05},
      {"4Conv adapt GMAC", c4.adapt_gmac, 1.96, 0.05},       {"4Conv adapt MB", c4.adapt_mb, 48.33, 0.20},
      {"ResNet12 inference MB", rn.inference_mb, 3.61, 0.10}, {"ResNet12 inference GMAC", rn.inference_gmac, 62.08, 0.10},
      {"MLP-100-100 adapt MB", mlp.adapt_mb, 3.72, 0.10},    {"MLP-100-100 adapt GMAC", mlp.adapt_gmac, 0.15, 0.10},
  };
  for (const Item& i : items) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s %.4g vs %.4g (%.1f%%)", i.name, i.got, i.want, 100 * rel(i.got, i.want));
    o.check(rel(i.got, i.want) <= i.tol, buf);
    o.detail << buf << "; ";
  }
  std::printf("--- 4Conv adaptation memory breakdown ---\n%s", cost::breakdown_text(c4).c_str());
}

void criterion_2(Outcome& o) {
  struct Want {
    const char* model;
    const char* method;
    double gmac, mb;
  };
  const Want wants[] = {{"4Conv", "maml", 1.96, 2.06},
                        {"4Conv", "anil", 0.72, 0.92},
                        {"ResNet12", "maml", 185.42, 54.69},
                        {"ResNet12", "anil", 62.08, 3.62}};
  const auto scenarios = cost::table_scenarios("Table2");
  for (const Want& w : wants) {
    bool found = false;
    for (const auto& s : scenarios) {
      if (s.model != w.model || s.method != w.method || s.mac_batch != 25) continue;
      found = true;
      const auto r = cost::evaluate(s);
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s %s %.4g GMAC / %.4g MB", w.model, w.method, r.adapt_gmac, r.adapt_mb);
      o.check(rel(r.adapt_gmac, w.gmac) <= 0.10 && rel(r.adapt_mb, w.mb) <= 0.10, buf);
      o.detail << buf << "; ";
    }
    o.check(found, std::string("missing Table2 row ") + w.model + " " + w.method);
  }
}

// ---------------------------------------------------------------------------
// 3: gradients vs central differences

double probe(const LayerSpec& spec, const std::vector<Tensor>& params, const Tensor& x, const Tensor& c) {
  LayerCache cache;
  return dot(layer_forward(spec, params, x, cache), c);
}

std::pair<LayerSpec, Shape> random_layer(Rng& rng, int kind) {
  const std::size_t B = 1 + rng.below(3);
  switch (kind) {
    case 0: {
      const std::size_t cin = 1 + rng.below(4), cout = 1 + rng.below(4), k = 1 + 2 * rng.below(2);
      const std::size_t stride = 1 + rng.below(2), pad = rng.below(2), hw = k + 2 + rng.below(4);
      return {LayerSpec::conv2d(cin, cout, k, stride, pad), {B, cin, hw, hw}};
    }
    case 1: {
      const std::size_t in = 1 + rng.below(10), out = 1 + rng.below(6);
      return {LayerSpec::fully_connected(in, out), {B, in}};
    }
    case 2: {
      const std::size_t groups = 1 + rng.below(3), c = groups * (1 + rng.below(3)), hw = 2 + rng.below(3);
      return {LayerSpec::group_norm(c, groups), {B, c, hw, hw}};
    }
    case 3:
      return {LayerSpec::relu(), {B, 1 + rng.below(8)}};
    default: {
      const std::size_t c = 1 + rng.below(3), hw = 4 + 2 * rng.below(3);
      return {LayerSpec::max_pool(2, 2), {B, c, hw, hw}};
    }
  }
}

void criterion_3(Outcome& o) {
  Rng rng(303);
  double worst = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    const auto [spec, shape] = random_layer(rng, inst % 5);
    std::vector<Tensor> params;
    for (const auto& s : spec.param_shapes()) params.push_back(rng.normal_tensor(s, 0.7));
    const Tensor x = rng.normal_tensor(shape, 1.0);
    LayerCache cache;
    const Tensor y = layer_forward(spec, params, x, cache);
    const Tensor c = rng.normal_tensor(y.shape(), 1.0);

    const Tensor gx = layer_input_grad(spec, params, cache, c);
    const Tensor fdx = ad::finite_diff_oracle([&](const Tensor& t) { return probe(spec, params, t, c); }, x, 1e-6);
    worst = std::max(worst, rel_error(gx, fdx));

    if (spec.trainable()) {
      ActivationStore store(1);
      const Tensor kept = spec.kind == LayerKind::group_norm       ? cache.xhat
                          : spec.kind == LayerKind::fully_connected ? x.reshaped({x.dim(0), x.size() / x.dim(0)})
                                                                    : x;
      const auto mask = ChannelMask::ones(spec.in_channels, spec.out_channels);
      store.store(0, kept, mask.fw);
      const WeightGrad g = layer_weight_grad_masked(spec, *store.get(0), c, mask);
      for (std::size_t p = 0; p < 2; ++p) {
        const Tensor fd = ad::finite_diff_oracle(
            [&](const Tensor& t) {
              auto q = params;
              q[p] = t;
              return probe(spec, q, x, c);
            },
            params[p], 1e-6);
        worst = std::max(worst, rel_error(p == 0 ? g.weight : g.bias, fd));
      }
    }
  }
  char buf[96];
  std::snprintf(buf, sizeof buf, "first-order worst rel err %.2e over 100 layers", worst);
  o.check(worst <= 1e-5, buf);
  o.detail << buf << "; ";

  // Meta-gradient through K = 2 unrolled steps on a 2-layer MLP.
  const NetworkSpec net = NetworkSpec::parse(
      "input channels=1\nfully_connected in=1 out=8\nrelu\nfully_connected in=8 out=1\n");
  MetaTrainConfig cfg;
  cfg.mode = Mode::maml_pp;
  cfg.inner_steps = 2;
  cfg.threads = 1;
  cfg.seed = 31;
  MetaState s = MetaState::init(net, cfg);
  for (double& a : s.alpha.data()) a = rng.uniform(0.01, 0.05);
  SinusoidTasks src(33, 5, 10);
  const std::vector<Task> tasks{src.next(), src.next()};
  const MetaGradient g = meta_gradient(net, cfg, s, tasks, LossKind::mse, kWeights | kAlpha);
  const double h = 1e-6;
  auto objective = [&](const MetaState& st) { return meta_objective(net, cfg, st, tasks, LossKind::mse); };
  double meta_worst = 0.0;
  for (std::size_t p = 0; p <= s.weights.size(); ++p) {
    Tensor& target = p < s.weights.size() ? s.weights[p] : s.alpha;
    const Tensor& analytic = p < s.weights.size() ? g.weights[p] : g.alpha;
    Tensor fd(target.shape());
    for (std::size_t e = 0; e < target.size(); ++e) {
      const double keep = target[e];
      target[e] = keep + h;
      const double up = objective(s);
      target[e] = keep - h;
      const double down = objective(s);
      target[e] = keep;
      fd[e] = (up - down) / (2 * h);
    }
    meta_worst = std::max(meta_worst, rel_error(analytic, fd));
  }
  std::snprintf(buf, sizeof buf, "meta-gradient worst rel err %.2e", meta_worst);
  o.check(meta_worst <= 1e-4, buf);
  o.detail << buf << "; ";
}

// ---------------------------------------------------------------------------
// 4: masked weight gradients vs dense-then-mask

NetworkSpec random_network(Rng& rng) {
  const std::size_t c0 = 1 + rng.below(3), c1 = 2 * (1 + rng.below(3)), hw = 4 + 2 * rng.below(2);
  const std::size_t k = 1 + 2 * rng.below(2);
  const std::size_t flat = c1 * (hw / 2) * (hw / 2), out = 2 + rng.below(3);
  std::ostringstream s;
  s << "input channels=" << c0 << " height=" << hw << " width=" << hw << "\n"
    << "conv2d in=" << c0 << " out=" << c1 << " kernel=" << k << " stride=1 padding=" << k / 2 << "\n"
    << "group_norm channels=" << c1 << " groups=2\n"
    << "relu\nmax_pool window=2 stride=2\n"
    << "fully_connected in=" << flat << " out=" << out << "\n";
  return NetworkSpec::parse(s.str());
}

// Plain loops, independent of the kernels.
Tensor naive_dense_grad(const LayerSpec& l, const Tensor& x, const Tensor& gy) {
  const std::size_t B = x.dim(0);
  if (l.kind == LayerKind::fully_connected) {
    const std::size_t in = l.in_channels, out = l.out_channels;
    Tensor g({out, in});
    for (std::size_t f = 0; f < out; ++f)
      for (std::size_t c = 0; c < in; ++c)
        for (std::size_t b = 0; b < B; ++b) g[f * in + c] += gy[b * out + f] * x[b * in + c];
    return g;
  }
  if (l.kind == LayerKind::conv2d) {
    const std::size_t C = l.in_channels, F = l.out_channels, K = l.kernel, H = x.dim(2), W = x.dim(3);
    const std::size_t OH = gy.dim(2), OW = gy.dim(3);
    Tensor g({F, C, K, K});
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < K; ++i)
          for (std::size_t j = 0; j < K; ++j) {
            double acc = 0.0;
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t oh = 0; oh < OH; ++oh)
                for (std::size_t ow = 0; ow < OW; ++ow) {
                  const long ih = static_cast<long>(oh * l.stride + i) - static_cast<long>(l.padding);
                  const long iw = static_cast<long>(ow * l.stride + j) - static_cast<long>(l.padding);
                  if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) || iw >= static_cast<long>(W)) continue;
                  acc += gy[((b * F + f) * OH + oh) * OW + ow] * x[((b * C + c) * H + ih) * W + iw];
                }
            g[((f * C + c) * K + i) * K + j] = acc;
          }
    return g;
  }
  // group norm scale: Σ gy · x̂ with x̂ recomputed here
  const std::size_t C = l.in_channels, G = l.groups, S = x.size() / (B * C), per = C / G;
  Tensor g({C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t grp = 0; grp < G; ++grp) {
      double mean = 0.0, var = 0.0;
      const std::size_t base = (b * C + grp * per) * S, n = per * S;
      for (std::size_t e = 0; e < n; ++e) mean += x[base + e];
      mean /= static_cast<double>(n);
      for (std::size_t e = 0; e < n; ++e) var += (x[base + e] - mean) * (x[base + e] - mean);
      var /= static_cast<double>(n);
      const double rstd = 1.0 / std::sqrt(var + kGroupNormEps);
      for (std::size_t e = 0; e < n; ++e) g[grp * per + e / S] += gy[base + e] * (x[base + e] - mean) * rstd;
    }
  return g;
}

std::vector<double> random_mask(Rng& rng, std::size_t n) {
  std::vector<double> m(n);
  for (auto& v : m) v = rng.uniform() < 0.4 ? 0.0 : rng.uniform(0.1, 2.0);
  return m;
}

void criterion_4(Outcome& o) {
  Rng rng(404);
  double worst = 0.0;
  std::size_t checked = 0;
  for (int n = 0; n < 50; ++n) {
    const NetworkSpec net = random_network(rng);
    Rng wrng = rng.split();
    const auto params = init_params(net, wrng);
    Tensor h = rng.normal_tensor(net.shapes()[0].batched(1 + rng.below(3)), 1.0);
    std::size_t p = 0;
    for (const LayerSpec& l : net.layers) {
      LayerCache cache;
      std::span<const Tensor> lp;
      if (l.trainable()) lp = std::span<const Tensor>(params).subspan(p, 2);
      Tensor y = layer_forward(l, lp, h, cache);
      if (l.trainable()) {
        p += 2;
        const Tensor x = l.kind == LayerKind::fully_connected ? h.reshaped({h.dim(0), h.size() / h.dim(0)}) : h;
        const Tensor gy = rng.normal_tensor(y.shape(), 1.0);
        const ChannelMask mask{random_mask(rng, l.in_channels), random_mask(rng, l.out_channels)};
        ActivationStore store(1);
        store.store(0, l.kind == LayerKind::group_norm ? cache.xhat : x, mask.fw);
        const WeightGrad g = layer_weight_grad_masked(l, *store.get(0), gy, mask);

        Tensor oracle = naive_dense_grad(l, x, gy);
        const std::size_t per = l.kind == LayerKind::group_norm ? 1 : oracle.size() / (l.in_channels * l.out_channels);
        for (std::size_t i = 0; i < oracle.size(); ++i) {
          const std::size_t f = l.kind == LayerKind::group_norm ? i : i / per / l.in_channels;
          const std::size_t c = l.kind == LayerKind::group_norm ? i : (i / per) % l.in_channels;
          oracle[i] *= mask.bw[f] * mask.fw[c];
          if (oracle[i] == 0.0 && g.weight[i] != 0.0) worst = std::max(worst, 1.0);
        }
        worst = std::max(worst, rel_error(g.weight, oracle));
        ++checked;
      }
      h = std::move(y);
    }
  }
  char buf[96];
  std::snprintf(buf, sizeof buf, "%zu layers in 50 networks, worst rel err %.2e", checked, worst);
  o.check(worst <= 1e-12, buf);
  o.detail << buf;
}

// ---------------------------------------------------------------------------
// 5, 6: adapt runtime

AdaptPlan random_plan(const NetworkSpec& net, std::size_t K, bool attention, Rng& rng) {
  AdaptPlan p;
  p.network = net;
  p.weights = init_params(net, rng);
  p.alpha = Tensor({net.trainable_layers().size(), K});
  for (double& a : p.alpha.data()) a = rng.uniform() < 0.25 ? 0.0 : rng.uniform(0.01, 0.1);
  p.attention_enabled = attention;
  p.rho_fw = rng.uniform(0.0, 0.7);
  p.rho_bw = rng.uniform(0.0, 0.7);
  if (attention) {
    p.attention = AttentionParams::init(net, 2, rng);
    auto flat = p.attention.flatten();
    for (Tensor& t : flat) t = rng.normal_tensor(t.shape(), 0.8);
    p.attention.assign(flat);
  }
  return p;
}

void criterion_5(Outcome& o) {
  Rng rng(505);
  double worst = 0.0;
  for (int n = 0; n < 20; ++n) {
    const NetworkSpec net = random_network(rng);
    const AdaptPlan plan = random_plan(net, 1 + rng.below(3), false, rng);
    const std::size_t N = 2 + rng.below(8);
    const Tensor x = rng.normal_tensor(net.shapes()[0].batched(N), 1.0);
    Tensor y({N, net.output().words()}, 0.0);
    for (std::size_t r = 0; r < N; ++r) y[r * y.dim(1) + rng.below(y.dim(1))] = 1.0;
    const auto full = adapt(plan, N, x, y, LossKind::cross_entropy);
    const auto one = adapt(plan, 1, x, y, LossKind::cross_entropy);
    // Relative to the whole update w' - w of the network, so the untouched part
    // of w cannot hide a difference. Per-tensor ratios are meaningless for
    // tensors whose exact gradient is zero (a conv bias feeding a one-channel
    // normalization group), where both sides are rounding noise.
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < full.size(); ++i) {
      diff = std::max(diff, max_abs_diff(one[i], full[i]));
      for (std::size_t e = 0; e < full[i].size(); ++e) scale = std::max(scale, std::abs(full[i][e] - plan.weights[i][e]));
    }
    if (scale > 0.0) worst = std::max(worst, diff / scale);
    else if (diff > 0.0) worst = std::max(worst, 1.0);
  }
  char buf[96];
  std::snprintf(buf, sizeof buf, "20 group-norm networks, b=1 vs b=|S| worst rel diff %.2e", worst);
  o.check(worst <= 1e-9, buf);
  o.detail << buf;
}

void criterion_6_sessions() {
  Rng rng(606);
  for (int n = 0; n < 40; ++n) {
    const bool conv = n % 2 == 0;
    const NetworkSpec net = conv ? random_network(rng) : NetworkSpec::preset("MLP-40-40");
    const AdaptPlan plan = random_plan(net, 1 + rng.below(3), n % 4 != 3, rng);
    const std::size_t N = 2 + rng.below(8);
    const Tensor x = rng.normal_tensor(net.shapes()[0].batched(N), 1.0);
    const Tensor y = rng.normal_tensor({N, net.output().words()}, 1.0);
    adapt(plan, 1 + rng.below(N), x, y, LossKind::mse);
  }
}

// ---------------------------------------------------------------------------
// 7: sinusoid efficacy

struct SinusoidRun {
  AdaptPlan plan;
  double seconds = 0;
};

MetaTrainConfig sinusoid_config(Mode mode) {
  MetaTrainConfig c;
  c.mode = mode;
  c.inner_steps = 1;
  c.task_batch = 8;
  c.epochs = 300;
  c.iterations_per_epoch = 20;
  c.validation_tasks = 20;
  c.validation_every = 10;
  c.alpha0 = 0.01;
  c.lambda = 0.001;
  c.lr = 0.003;
  c.rho_fw = 0.3;
  c.rho_bw = 0.0;
  c.seed = 1;
  return c;
}

SinusoidRun train_sinusoid(const MetaTrainConfig& cfg) {
  const NetworkSpec net = NetworkSpec::preset("MLP-40-40");
  SinusoidTasks vsrc(2002, 5);
  std::vector<Task> validation;
  for (std::size_t i = 0; i < cfg.validation_tasks; ++i) validation.push_back(vsrc.next());
  const auto t0 = std::chrono::steady_clock::now();
  MetaTrainer trainer(net, cfg, std::make_unique<SinusoidTasks>(1001, 5), validation, LossKind::mse);
  SinusoidRun r;
  r.plan = trainer.run();
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

struct Evaluation {
  double post = 0, pre = 0;
  std::size_t improved = 0;
  std::uint64_t stored = 0;
};

Evaluation evaluate_sinusoid(const AdaptPlan& plan, const std::vector<Task>& tasks) {
  Evaluation e;
  for (const Task& t : tasks) {
    std::uint64_t stored = 0;
    const auto w = adapt(plan, t.support_x.dim(0), t.support_x, t.support_y, LossKind::mse, &stored);
    const double post = evaluate_loss(plan.network, w, t.query_x, t.query_y, LossKind::mse);
    const double pre = evaluate_loss(plan.network, plan.weights, t.query_x, t.query_y, LossKind::mse);
    e.post += post / static_cast<double>(tasks.size());
    e.pre += pre / static_cast<double>(tasks.size());
    e.improved += post < pre;
    e.stored = std::max(e.stored, stored);
  }
  return e;
}

void criterion_7(Outcome& o) {
  const SinusoidRun pm = train_sinusoid(sinusoid_config(Mode::pmeta));
  const SinusoidRun mpp = train_sinusoid(sinusoid_config(Mode::maml_pp));
  SinusoidTasks tsrc(3003, 5);
  std::vector<Task> held_out;
  for (int i = 0; i < 200; ++i) held_out.push_back(tsrc.next());
  const Evaluation ep = evaluate_sinusoid(pm.plan, held_out);
  const Evaluation em = evaluate_sinusoid(mpp.plan, held_out);

  // Dense baseline: every layer updated, every channel stored.
  AdaptPlan dense = mpp.plan;
  for (double& a : dense.alpha.data()) a = sinusoid_config(Mode::maml).alpha0;
  const Evaluation ed = evaluate_sinusoid(dense, {held_out.begin(), held_out.begin() + 1});

  const double improved = static_cast<double>(ep.improved) / 200.0;
  const double ratio = ep.post / em.post;
  const double memory = static_cast<double>(ep.stored) / static_cast<double>(ed.stored);
  const double seconds = pm.seconds + mpp.seconds;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "pmeta post MSE %.4f (pre %.4f), improved on %zu/200; maml++ post MSE %.4f; ratio %.3f; "
                "stored words pmeta %llu, maml++ plan %llu, dense %llu (%.1f%%); training %.0fs",
                ep.post, ep.pre, ep.improved, em.post, ratio, static_cast<unsigned long long>(ep.stored),
                static_cast<unsigned long long>(em.stored), static_cast<unsigned long long>(ed.stored), 100 * memory,
                seconds);
  o.detail << buf;
  o.check(improved >= 0.95, "improved fraction");
  o.check(ratio <= 1.2, "MSE ratio to maml++");
  o.check(memory <= 0.70, "memory ratio");
  o.check(seconds <= 600, "runtime");
}

// ---------------------------------------------------------------------------
// 8: pmeta with uniform attention and no penalty is maml++

void criterion_8(Outcome& o) {
  auto config = [](Mode m) {
    MetaTrainConfig c;
    c.mode = m;
    c.inner_steps = 2;
    c.task_batch = 4;
    c.epochs = 5;
    c.iterations_per_epoch = 10;
    c.validation_tasks = 5;
    c.alpha0 = 0.01;
    c.lr = 0.003;
    c.seed = 8;
    return c;
  };
  MetaTrainConfig p = config(Mode::pmeta);
  p.uniform_attention = true;
  p.lambda = 0.0;
  p.rho_fw = p.rho_bw = 0.0;
  const MetaTrainConfig m = config(Mode::maml_pp);
  auto run = [](const MetaTrainConfig& c) {
    SinusoidTasks vsrc(81, 5);
    std::vector<Task> val;
    for (std::size_t i = 0; i < c.validation_tasks; ++i) val.push_back(vsrc.next());
    auto t = std::make_unique<MetaTrainer>(NetworkSpec::preset("MLP-40-40"), c, std::make_unique<SinusoidTasks>(80, 5),
                                           val, LossKind::mse);
    t->run();
    return t;
  };
  const auto a = run(p), b = run(m);
  bool same = a->history().size() == 5 && b->history().size() == 5;
  for (std::size_t e = 0; same && e < 5; ++e)
    same = std::memcmp(&a->history()[e].mean_query_loss, &b->history()[e].mean_query_loss, sizeof(double)) == 0 &&
           std::memcmp(&a->history()[e].validation_metric, &b->history()[e].validation_metric, sizeof(double)) == 0;
  for (std::size_t i = 0; same && i < a->state().weights.size(); ++i)
    same = a->state().weights[i].identical(b->state().weights[i]);
  same = same && a->state().alpha.identical(b->state().alpha);
  o.check(same, "trajectories differ");
  o.detail << "5 epochs, per-epoch losses and final weights/step sizes " << (same ? "bitwise identical" : "differ");
}

// ---------------------------------------------------------------------------
// 9: clip-and-normalize properties

std::vector<double> reference_clip(const std::vector<double>& pi, double rho) {
  const std::size_t C = pi.size();
  std::vector<bool> removed(C, false);
  double mass = 0.0;
  std::size_t count = 0;
  while (rho > 0.0 && count + 1 < C && !(count > 0 && mass >= rho)) {
    std::size_t pick = C;
    for (std::size_t i = 0; i < C; ++i)
      if (!removed[i] && (pick == C || pi[i] < pi[pick])) pick = i;
    removed[pick] = true;
    mass += pi[pick];
    ++count;
  }
  double rest = 0.0;
  for (std::size_t i = 0; i < C; ++i)
    if (!removed[i]) rest += pi[i];
  std::vector<double> out(C, 0.0);
  for (std::size_t i = 0; i < C; ++i)
    if (!removed[i]) out[i] = pi[i] * static_cast<double>(C) / rest;
  return out;
}

void criterion_9(Outcome& o) {
  Rng rng(909);
  std::size_t bad_sign = 0, bad_sum = 0, bad_mono = 0, bad_ref = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t C = 1 + rng.below(32);
    std::vector<double> z(C);
    for (double& v : z) v = rng.normal() * 2.0;
    if (C > 2 && rng.uniform() < 0.2) z[1] = z[0];
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    std::vector<double> pi(C);
    double s = 0.0;
    for (std::size_t i = 0; i < C; ++i) s += pi[i] = std::exp(z[i] - mx);
    for (double& v : pi) v /= s;
    const double r1 = rng.uniform() < 0.1 ? 0.0 : rng.uniform(0.0, 0.999);
    const double r2 = std::min(0.999, r1 + rng.uniform(0.0, 0.5));
    const auto g1 = clip_normalize(pi, r1), g2 = clip_normalize(pi, r2), ref = reference_clip(pi, r1);
    double sum = 0.0;
    for (std::size_t i = 0; i < C; ++i) {
      bad_sign += g1[i] < 0.0;
      sum += g1[i];
      bad_mono += g2[i] != 0.0 && g1[i] == 0.0;
      bad_ref += (g1[i] == 0.0) != (ref[i] == 0.0) || std::abs(g1[i] - ref[i]) > 1e-12;
    }
    bad_sum += std::abs(sum - static_cast<double>(C)) > 1e-9;
  }
  o.check(bad_sign + bad_sum + bad_mono + bad_ref == 0, "property violations");
  o.detail << "10000 pairs; violations: negative " << bad_sign << ", sum " << bad_sum << ", monotonicity " << bad_mono
           << ", reference " << bad_ref;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i)
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    }
  auto wanted = [&](int n) { return only.empty() || only.count(n) > 0; };

  const std::vector<std::pair<int, std::function<void(Outcome&)>>> criteria = {
      {1, criterion_1}, {2, criterion_2}, {3, criterion_3}, {4, criterion_4}, {5, criterion_5}, {7, criterion_7},
      {8, criterion_8}, {9, criterion_9},
      // Runs last so it covers every session above.
      {6,
       [](Outcome& o) {
         criterion_6_sessions();
         o.check(g_sessions.sessions > 0 && g_sessions.mismatches == 0, "measured != closed form");
         o.detail << g_sessions.sessions << " sessions, " << g_sessions.batches << " partial batches, "
                  << g_sessions.mismatches << " mismatches";
       }},
  };
  std::vector<std::string> lines(10);
  bool all = true;
  for (const auto& [n, fn] : criteria) {
    if (!wanted(n)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      fn(o);
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char head[64];
    std::snprintf(head, sizeof head, "criterion %d: %s (%.1fs) ", n, o.pass ? "PASS" : "FAIL", secs);
    lines[static_cast<std::size_t>(n)] = head + o.detail.str();
    std::printf("%s\n", lines[static_cast<std::size_t>(n)].c_str());
    std::fflush(stdout);
    all = all && o.pass;
  }
  std::printf("=== summary ===\n");
  for (const auto& l : lines)
    if (!l.empty()) std::printf("%s\n", l.c_str());
  return all ? 0 : 1;
}
