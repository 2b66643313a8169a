#include "pmeta/meta_train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <thread>

#include "pmeta/error.hpp"

namespace pmeta {

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::pmeta:
      return "pmeta";
    case Mode::maml:
      return "maml";
    case Mode::maml_pp:
      return "maml++";
    case Mode::anil:
      return "anil";
    case Mode::boil:
      return "boil";
  }
  return "?";
}

Mode parse_mode(const std::string& name) {
  if (name == "pmeta" || name == "p-meta") return Mode::pmeta;
  if (name == "maml") return Mode::maml;
  if (name == "maml++" || name == "mamlpp") return Mode::maml_pp;
  if (name == "anil") return Mode::anil;
  if (name == "boil") return Mode::boil;
  fail(ErrorKind::invalid_argument, "unknown mode '" + name + "'");
}

void MetaTrainConfig::validate() const {
  require(inner_steps >= 1, ErrorKind::invalid_argument, "inner_steps must be at least 1");
  require(task_batch >= 1, ErrorKind::invalid_argument, "task_batch must be at least 1");
  require(iterations_per_epoch >= 1, ErrorKind::invalid_argument, "iterations_per_epoch must be at least 1");
  require(validation_every >= 1, ErrorKind::invalid_argument, "validation_every must be at least 1");
  require(lambda >= 0.0, ErrorKind::invalid_argument, "lambda must be non-negative");
  require(alpha0 >= 0.0, ErrorKind::invalid_argument, "alpha0 must be non-negative");
  require(lr > 0.0 && lr_min >= 0.0 && lr_min <= lr, ErrorKind::invalid_argument, "need 0 <= lr_min <= lr, lr > 0");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0, ErrorKind::invalid_argument,
          "invalid Adam moments");
  require(rho_fw >= 0.0 && rho_fw < 1.0 && rho_bw >= 0.0 && rho_bw < 1.0, ErrorKind::invalid_argument,
          "clip ratios must lie in [0, 1)");
  require(reduction >= 1, ErrorKind::invalid_argument, "reduction must be at least 1");
}

MetaState MetaState::init(const NetworkSpec& net, const MetaTrainConfig& cfg) {
  require(net.executable(), ErrorKind::unsupported, "network is cost-only and cannot be meta-trained");
  // Independent streams so switching attention on or off never changes the
  // initial weights.
  Rng root(cfg.seed);
  Rng weight_rng = root.split();
  Rng attention_rng = root.split();
  MetaState s;
  s.weights = init_params(net, weight_rng);
  const std::size_t L = net.trainable_layers().size();
  s.alpha = Tensor({L, cfg.inner_steps}, cfg.alpha0);
  for (std::size_t l = 0; l < L; ++l) {
    const bool output = l + 1 == L;
    const bool frozen = (cfg.mode == Mode::anil && !output) || (cfg.mode == Mode::boil && output);
    if (frozen)
      for (std::size_t k = 0; k < cfg.inner_steps; ++k) s.alpha[l * cfg.inner_steps + k] = 0.0;
  }
  if (cfg.uses_attention()) s.attention = AttentionParams::init(net, cfg.reduction, attention_rng);
  return s;
}

ad::Var forward_var(const NetworkSpec& net, std::span<const ad::Var> params, const Tensor& x,
                    std::vector<ad::Var>* inputs, std::vector<ad::Var>* outputs) {
  const auto in = net.shapes()[0];
  ad::Var h = ad::constant(x.reshaped(in.batched(x.dim(0))));
  std::size_t p = 0;
  for (const LayerSpec& l : net.layers) {
    if (l.trainable()) {
      if (inputs) inputs->push_back(h);
      h = layer_forward_var(l, params.subspan(p, 2), h);
      p += 2;
      if (outputs) outputs->push_back(h);
    } else {
      h = layer_forward_var(l, {}, h);
    }
  }
  return h;
}

ad::Var task_loss_var(LossKind kind, const ad::Var& pred, const Tensor& target) {
  const ad::Var p = ad::reshape(pred, target.shape());
  return kind == LossKind::mse ? ad::mse_loss(p, target) : ad::cross_entropy_loss(p, target);
}

std::vector<ad::Var> InnerLoop::step(std::span<const ad::Var> params, const Tensor& sx, const Tensor& sy, std::size_t k,
                                     InnerStats* stats) const {
  using namespace ad;
  const auto trainable = net->trainable_layers();
  const std::size_t L = trainable.size();
  require(params.size() == 2 * L, ErrorKind::shape, "inner step: parameter count does not match the network");
  require(alpha.size() % L == 0 && k < alpha.size() / L, ErrorKind::invalid_argument, "inner step index out of range");
  const std::size_t K = alpha.size() / L;
  const bool attend = !attention.empty();

  std::vector<Var> ins, outs;
  const Var loss = task_loss_var(this->loss, forward_var(*net, params, sx, &ins, &outs), sy);
  require(std::isfinite(loss.value().item()), ErrorKind::numeric, "support loss is not finite");

  std::vector<Var> wrt(params.begin(), params.end());
  if (attend)
    for (std::size_t t = 0; t < L; ++t)
      if (!attention[t].empty()) wrt.push_back(outs[t]);
  const std::vector<Var> g = grad(loss, wrt, {}, create_graph);

  std::vector<Var> next(params.begin(), params.end());
  std::size_t out_slot = 2 * L;
  for (std::size_t t = 0; t < L; ++t) {
    const Var& a = alpha[t * K + k];
    const bool attended = attend && !attention[t].empty();
    const Var g_out = attended ? g[out_slot++] : Var{};
    if (!alpha_learned && a.value()[0] == 0.0) continue;

    const LayerSpec& l = net->layers[trainable[t]];
    Var gw = g[2 * t], gb = g[2 * t + 1];
    if (attended) {
      const Tensor x_in = ins[t].value();
      const Tensor pooled_in =
          pool_mean(l.kind == LayerKind::fully_connected ? x_in.reshaped({x_in.dim(0), x_in.size() / x_in.dim(0)}) : x_in);
      const std::span<const Var> mods(attention[t]);
      const Var fw = attention_scores_var(mods.subspan(0, 4), pooled_in, rho_fw);
      const Var bw = attention_scores_var(mods.subspan(4, 4), pool_mean_abs(g_out.value()), rho_bw);
      if (stats) {
        stats->mu_fw_sum += CriticalRatio::of(fw.value().data()).value();
        stats->mu_bw_sum += CriticalRatio::of(bw.value().data()).value();
        ++stats->count;
      }
      if (l.kind == LayerKind::group_norm) {
        const Var d = mul(bw, fw);
        gw = mul(gw, d);
        gb = mul(gb, d);
      } else {
        Var m = outer(bw, fw);
        if (l.kind == LayerKind::conv2d) m = reshape(broadcast_last(m, l.kernel * l.kernel), gw.shape());
        gw = mul(gw, m);
        gb = mul(gb, bw);
      }
    } else if (stats) {
      stats->mu_fw_sum += 1.0;
      stats->mu_bw_sum += 1.0;
      ++stats->count;
    }
    next[2 * t] = sub(params[2 * t], mul_scalar(gw, a));
    next[2 * t + 1] = sub(params[2 * t + 1], mul_scalar(gb, a));
  }
  return next;
}

ad::Var InnerLoop::adapted_query_loss(std::span<const ad::Var> params, const Task& task, std::size_t K,
                                      InnerStats* stats) const {
  std::vector<ad::Var> w(params.begin(), params.end());
  for (std::size_t k = 0; k < K; ++k) w = step(w, task.support_x, task.support_y, k, stats);
  const ad::Var q = task_loss_var(loss, forward_var(*net, w, task.query_x), task.query_y);
  require(std::isfinite(q.value().item()), ErrorKind::numeric, "query loss is not finite (divergence)");
  return q;
}

namespace {

// Leaves for one task evaluation; only requested groups require grad, except
// the weights, which the inner gradient always needs.
struct Leaves {
  std::vector<ad::Var> weights;
  std::vector<ad::Var> alpha;
  std::vector<ad::Var> attention_flat;
  InnerLoop loop;
};

Leaves make_leaves(const NetworkSpec& net, const MetaTrainConfig& cfg, const MetaState& s, LossKind loss, unsigned groups) {
  Leaves v;
  for (const Tensor& w : s.weights) v.weights.push_back(ad::leaf(w, true));
  const bool alpha_grad = (groups & kAlpha) && cfg.learns_alpha();
  for (double a : s.alpha.data()) v.alpha.push_back(ad::leaf(Tensor::scalar(a), alpha_grad));
  v.loop.net = &net;
  v.loop.loss = loss;
  v.loop.create_graph = !cfg.first_order;
  v.loop.alpha_learned = cfg.learns_alpha();
  v.loop.rho_fw = cfg.rho_fw;
  v.loop.rho_bw = cfg.rho_bw;
  v.loop.alpha = v.alpha;
  if (cfg.uses_attention()) {
    const bool att_grad = (groups & kAttention) != 0;
    for (const auto& la : s.attention.layers) {
      std::vector<ad::Var> mods;
      if (la)
        for (const auto* m : {&la->fw, &la->bw})
          for (const Tensor& t : m->params) {
            mods.push_back(ad::leaf(t, att_grad));
            v.attention_flat.push_back(mods.back());
          }
      v.loop.attention.push_back(std::move(mods));
    }
  }
  return v;
}

template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += threads) {
        try {
          f(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct TaskResult {
  double loss = 0;
  std::vector<Tensor> w, a, att;
  InnerStats stats;
};

void accumulate(std::vector<Tensor>& into, const std::vector<Tensor>& g) {
  if (into.empty()) {
    into = g;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) into[i] = into[i] + g[i];
}

}  // namespace

MetaGradient meta_gradient(const NetworkSpec& net, const MetaTrainConfig& cfg, const MetaState& state,
                           std::span<const Task> tasks, LossKind loss, unsigned groups) {
  require(!tasks.empty(), ErrorKind::invalid_argument, "meta-gradient needs at least one task");
  std::vector<TaskResult> results(tasks.size());
  parallel_for(tasks.size(), cfg.threads, [&](std::size_t i) {
    Leaves v = make_leaves(net, cfg, state, loss, groups);
    TaskResult& r = results[i];
    const ad::Var q = v.loop.adapted_query_loss(v.weights, tasks[i], cfg.inner_steps, &r.stats);
    r.loss = q.value().item();
    std::vector<ad::Var> wrt;
    if (groups & kWeights) wrt.insert(wrt.end(), v.weights.begin(), v.weights.end());
    if ((groups & kAlpha) && cfg.learns_alpha()) wrt.insert(wrt.end(), v.alpha.begin(), v.alpha.end());
    if ((groups & kAttention) && cfg.uses_attention())
      wrt.insert(wrt.end(), v.attention_flat.begin(), v.attention_flat.end());
    const auto g = ad::grad(q, wrt);
    std::size_t j = 0;
    if (groups & kWeights)
      for (std::size_t p = 0; p < v.weights.size(); ++p) r.w.push_back(g[j++].value());
    if ((groups & kAlpha) && cfg.learns_alpha())
      for (std::size_t p = 0; p < v.alpha.size(); ++p) r.a.push_back(g[j++].value());
    if ((groups & kAttention) && cfg.uses_attention())
      for (std::size_t p = 0; p < v.attention_flat.size(); ++p) r.att.push_back(g[j++].value());
  });

  // Fixed task order keeps the reduction deterministic.
  MetaGradient out;
  std::vector<Tensor> alpha_parts;
  for (const TaskResult& r : results) {
    out.loss += r.loss;
    accumulate(out.weights, r.w);
    accumulate(alpha_parts, r.a);
    accumulate(out.attention, r.att);
    out.stats.mu_fw_sum += r.stats.mu_fw_sum;
    out.stats.mu_bw_sum += r.stats.mu_bw_sum;
    out.stats.count += r.stats.count;
  }
  out.alpha = Tensor(state.alpha.shape(), 0.0);
  for (std::size_t i = 0; i < alpha_parts.size(); ++i) out.alpha[i] = alpha_parts[i][0];
  for (const Tensor& t : out.weights) check_finite(t, "meta-gradient");
  check_finite(out.alpha, "meta-gradient");
  return out;
}

double meta_objective(const NetworkSpec& net, const MetaTrainConfig& cfg, const MetaState& state,
                      std::span<const Task> tasks, LossKind loss) {
  double total = 0.0;
  for (const Task& t : tasks) {
    Leaves v = make_leaves(net, cfg, state, loss, 0);
    v.loop.create_graph = false;
    total += v.loop.adapted_query_loss(v.weights, t, cfg.inner_steps).value().item();
  }
  return total;
}

std::string metrics_csv_header() {
  return "epoch,mean_query_loss,validation_metric,alpha_sparsity,mean_mu_fw,mean_mu_bw";
}

std::string metrics_csv_row(const EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.6f,%.6f,%.6f", m.epoch, m.mean_query_loss, m.validation_metric,
                m.alpha_sparsity, m.mean_mu_fw, m.mean_mu_bw);
  return buf;
}

MetaTrainer::MetaTrainer(NetworkSpec net, MetaTrainConfig cfg, std::unique_ptr<TaskSource> tasks,
                         std::vector<Task> validation, LossKind loss)
    : net_(std::move(net)), cfg_(cfg), tasks_(std::move(tasks)), validation_(std::move(validation)), loss_(loss) {
  cfg_.validate();
  require(tasks_ != nullptr, ErrorKind::invalid_argument, "meta-trainer needs a task source");
  state_ = MetaState::init(net_, cfg_);
  memory_weights_ = input_words(net_);
  best_ = current_plan();
}

double MetaTrainer::learning_rate() const {
  const double total = static_cast<double>(cfg_.epochs * cfg_.iterations_per_epoch);
  const double progress = total > 0 ? std::min(1.0, static_cast<double>(iteration_) / total) : 1.0;
  return cfg_.lr_min + 0.5 * (cfg_.lr - cfg_.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

void MetaTrainer::adam_update(std::vector<Tensor>& params, const std::vector<Tensor>& grads, Adam& st, double lr) {
  if (st.m.empty())
    for (const Tensor& p : params) {
      st.m.emplace_back(p.shape(), 0.0);
      st.v.emplace_back(p.shape(), 0.0);
    }
  ++st.t;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t e = 0; e < params[i].size(); ++e) {
      const double g = grads[i][e];
      double& m = st.m[i][e];
      double& v = st.v[i][e];
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
      params[i][e] -= lr * (m / c1) / (std::sqrt(v / c2) + cfg_.adam_eps);
    }
}

double MetaTrainer::meta_step(std::span<const Task> batch) {
  const double lr = learning_rate();
  const MetaGradient gw = meta_gradient(net_, cfg_, state_, batch, loss_, kWeights);
  adam_update(state_.weights, gw.weights, adam_w_, lr);
  epoch_stats_.mu_fw_sum += gw.stats.mu_fw_sum;
  epoch_stats_.mu_bw_sum += gw.stats.mu_bw_sum;
  epoch_stats_.count += gw.stats.count;

  if (cfg_.learns_alpha()) {
    MetaGradient ga = meta_gradient(net_, cfg_, state_, batch, loss_, kAlpha);
    const double lambda = cfg_.effective_lambda();
    const std::size_t K = cfg_.inner_steps;
    for (std::size_t l = 0; l < state_.alpha.dim(0); ++l)
      for (std::size_t k = 0; k < K; ++k) {
        const double a = state_.alpha[l * K + k];
        const double sign = a > 0.0 ? 1.0 : (a < 0.0 ? -1.0 : 0.0);
        ga.alpha[l * K + k] += lambda * memory_weights_[l] * sign;
      }
    std::vector<Tensor> alpha{state_.alpha};
    adam_update(alpha, {ga.alpha}, adam_a_, lr);
    state_.alpha = alpha[0];
    for (double& a : state_.alpha.data()) a = std::max(0.0, a);
  }

  if (cfg_.uses_attention()) {
    const MetaGradient gt = meta_gradient(net_, cfg_, state_, batch, loss_, kAttention);
    std::vector<Tensor> flat = state_.attention.flatten();
    for (const Tensor& t : gt.attention) check_finite(t, "attention meta-gradient");
    adam_update(flat, gt.attention, adam_t_, lr);
    state_.attention.assign(flat);
  }
  ++iteration_;
  return gw.loss / static_cast<double>(batch.size());
}

EpochMetrics MetaTrainer::run_epoch() {
  epoch_stats_ = {};
  double loss_sum = 0.0;
  for (std::size_t it = 0; it < cfg_.iterations_per_epoch; ++it) {
    std::vector<Task> batch;
    for (std::size_t i = 0; i < cfg_.task_batch; ++i) batch.push_back(tasks_->next());
    loss_sum += meta_step(batch);
  }
  EpochMetrics m;
  m.epoch = history_.size() + 1;
  m.mean_query_loss = loss_sum / static_cast<double>(cfg_.iterations_per_epoch);
  const AdaptPlan plan = current_plan();
  if (m.epoch % cfg_.validation_every == 0 || m.epoch == cfg_.epochs) {
    last_validation_ = validation_loss(plan);
    if (!has_best_ || last_validation_ < best_loss_) {
      best_loss_ = last_validation_;
      best_ = plan;
      has_best_ = true;
    }
  }
  m.validation_metric = last_validation_;
  const auto& a = state_.alpha.data();
  m.alpha_sparsity = static_cast<double>(std::count(a.begin(), a.end(), 0.0)) / static_cast<double>(a.size());
  if (epoch_stats_.count > 0) {
    m.mean_mu_fw = epoch_stats_.mu_fw_sum / static_cast<double>(epoch_stats_.count);
    m.mean_mu_bw = epoch_stats_.mu_bw_sum / static_cast<double>(epoch_stats_.count);
  }
  history_.push_back(m);
  return m;
}

AdaptPlan MetaTrainer::run(const std::function<void(const EpochMetrics&)>& on_epoch) {
  while (history_.size() < cfg_.epochs) {
    const EpochMetrics m = run_epoch();
    if (on_epoch) on_epoch(m);
  }
  return has_best_ ? best_ : current_plan();
}

AdaptPlan MetaTrainer::current_plan() const {
  AdaptPlan p;
  p.network = net_;
  p.weights = state_.weights;
  p.alpha = state_.alpha;
  p.attention_enabled = cfg_.uses_attention();
  if (p.attention_enabled) p.attention = state_.attention;
  p.attention.reduction = cfg_.reduction;
  p.rho_fw = cfg_.rho_fw;
  p.rho_bw = cfg_.rho_bw;
  return p;
}

double MetaTrainer::validation_loss(const AdaptPlan& plan) const {
  if (validation_.empty()) return 0.0;
  std::vector<double> losses(validation_.size());
  parallel_for(validation_.size(), cfg_.threads, [&](std::size_t i) {
    const Task& t = validation_[i];
    AdaptSession session(plan, t.support_x.dim(0), loss_);
    const auto w = session.adapt(t.support_x, t.support_y);
    losses[i] = evaluate_loss(plan.network, w, t.query_x, t.query_y, loss_);
  });
  double total = 0.0;
  for (double l : losses) total += l;
  return total / static_cast<double>(losses.size());
}

}  // namespace pmeta
