#include "pmeta/adapt_runtime.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "pmeta/error.hpp"

namespace pmeta {

namespace {

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  const std::size_t row = t.size() / t.dim(0);
  Shape shape = t.shape();
  shape[0] = end - begin;
  return Tensor(shape, std::vector<double>(t.data().begin() + static_cast<std::ptrdiff_t>(begin * row),
                                           t.data().begin() + static_cast<std::ptrdiff_t>(end * row)));
}

Tensor flat_rows(const Tensor& t) { return t.reshaped({t.dim(0), t.size() / t.dim(0)}); }

void check_targets(const Tensor& pred, const Tensor& target) {
  require(pred.shape() == target.shape(), ErrorKind::shape,
          "targets " + shape_str(target.shape()) + " do not match predictions " + shape_str(pred.shape()));
}

std::vector<double> softmax_row(const Tensor& z, std::size_t r) {
  const std::size_t n = z.dim(1);
  double mx = z[r * n];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, z[r * n + j]);
  std::vector<double> p(n);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += p[j] = std::exp(z[r * n + j] - mx);
  for (double& v : p) v /= s;
  return p;
}

std::uint64_t attention_module_macs(std::size_t channels, std::size_t reduction) {
  const std::size_t hidden = (channels + reduction - 1) / reduction;
  return 2 * static_cast<std::uint64_t>(channels) * hidden;
}

}  // namespace

double loss_value(LossKind kind, const Tensor& pred, const Tensor& target) {
  check_targets(pred, target);
  double acc = 0.0;
  if (kind == LossKind::mse) {
    for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - target[i]) * (pred[i] - target[i]);
    return acc / static_cast<double>(pred.size());
  }
  const std::size_t rows = pred.dim(0), n = pred.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto p = softmax_row(pred, r);
    for (std::size_t j = 0; j < n; ++j)
      if (target[r * n + j] != 0.0) acc -= target[r * n + j] * std::log(p[j]);
  }
  return acc / static_cast<double>(rows);
}

Tensor loss_grad(LossKind kind, const Tensor& pred, const Tensor& target) {
  check_targets(pred, target);
  Tensor g(pred.shape());
  if (kind == LossKind::mse) {
    const double scale = 2.0 / static_cast<double>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) g[i] = scale * (pred[i] - target[i]);
    return g;
  }
  const std::size_t rows = pred.dim(0), n = pred.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto p = softmax_row(pred, r);
    double t_sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) t_sum += target[r * n + j];
    for (std::size_t j = 0; j < n; ++j) g[r * n + j] = (t_sum * p[j] - target[r * n + j]) / static_cast<double>(rows);
  }
  return g;
}

Tensor predict(const NetworkSpec& net, std::span<const Tensor> weights, const Tensor& x) {
  require(net.executable(), ErrorKind::unsupported, "network is cost-only");
  const ActShape in = net.shapes()[0];
  require(x.rank() >= 1 && x.dim(0) >= 1 && x.size() / x.dim(0) == in.words(), ErrorKind::shape,
          "inputs do not match the network input " + std::to_string(in.words()));
  Tensor h = x.reshaped(in.batched(x.dim(0)));
  std::size_t p = 0;
  for (const LayerSpec& l : net.layers) {
    LayerCache cache;
    if (l.trainable()) {
      h = layer_forward(l, weights.subspan(p, 2), h, cache);
      p += 2;
    } else {
      h = layer_forward(l, {}, h, cache);
    }
  }
  return h;
}

double evaluate_loss(const NetworkSpec& net, std::span<const Tensor> weights, const Tensor& x, const Tensor& y,
                     LossKind kind) {
  return loss_value(kind, predict(net, weights, x), y);
}

std::uint64_t SessionReport::peak_stored_words() const {
  std::uint64_t m = 0;
  for (const auto& s : steps) m = std::max(m, s.peak_stored_words);
  return m;
}

std::uint64_t SessionReport::total_macs() const {
  std::uint64_t m = 0;
  for (const auto& s : steps) m += s.forward_macs + s.weight_grad_macs + s.input_grad_macs + s.attention_macs;
  return m;
}

std::uint64_t SessionReport::total_weight_grad_macs() const {
  std::uint64_t m = 0;
  for (const auto& s : steps) m += s.weight_grad_macs;
  return m;
}

AdaptSession::AdaptSession(AdaptPlan plan, std::size_t partial_batch, LossKind loss)
    : plan_(std::move(plan)), partial_batch_(partial_batch), loss_(loss) {
  require(partial_batch >= 1, ErrorKind::invalid_argument, "partial batch size must be at least 1");
  plan_.validate();
}

std::vector<Tensor> AdaptSession::adapt(const Tensor& support_x, const Tensor& support_y) {
  const NetworkSpec& net = plan_.network;
  const auto trainable = net.trainable_layers();
  const auto shapes = net.shapes();
  const std::size_t L = trainable.size(), K = plan_.steps(), n_layers = net.layers.size();
  require(support_x.rank() >= 2 && support_x.dim(0) >= 1, ErrorKind::shape, "support set must be [n, ...]");
  require(support_y.rank() >= 1 && support_y.dim(0) == support_x.dim(0), ErrorKind::shape,
          "support inputs and targets disagree on the number of rows");
  require(support_x.size() / support_x.dim(0) == shapes[0].words(), ErrorKind::shape,
          "support inputs do not match the network input " + std::to_string(shapes[0].words()));
  const std::size_t N = support_x.dim(0);
  const Tensor xs = support_x.reshaped(shapes[0].batched(N));

  std::vector<long> slot(n_layers, -1);
  for (std::size_t t = 0; t < L; ++t) slot[trainable[t]] = static_cast<long>(t);

  report_ = SessionReport{};
  report_.partial_batch = partial_batch_;
  report_.support_rows = N;
  std::vector<Tensor> w = plan_.weights;

  for (std::size_t k = 0; k < K; ++k) {
    std::size_t lmin = n_layers;
    for (std::size_t t = 0; t < L; ++t)
      if (plan_.active(t, k)) {
        lmin = trainable[t];
        break;
      }

    StepRecord step;
    step.union_masks = cost::StepMasks::for_method(net, cost::Method::maml);
    std::vector<std::vector<bool>> seen_fw(L), seen_bw(L);
    for (std::size_t t = 0; t < L; ++t) {
      step.union_masks.active[t] = plan_.active(t, k);
      seen_fw[t].assign(net.layers[trainable[t]].in_channels, false);
      seen_bw[t].assign(net.layers[trainable[t]].out_channels, false);
    }
    std::vector<Tensor> acc;
    for (const Tensor& p : w) acc.emplace_back(p.shape(), 0.0);

    for (std::size_t begin = 0; begin < N; begin += partial_batch_) {
      const std::size_t end = std::min(N, begin + partial_batch_);
      const std::size_t rows = end - begin;
      const double fraction = static_cast<double>(rows) / static_cast<double>(N);

      PartialBatchRecord rec;
      rec.step = k;
      rec.rows = rows;
      rec.masks = step.union_masks;

      ActivationStore store(n_layers);
      std::vector<LayerCache> caches(n_layers);
      std::vector<ChannelMask> masks(L);
      Tensor h = slice_rows(xs, begin, end);

      for (std::size_t i = 0; i < n_layers; ++i) {
        const LayerSpec& l = net.layers[i];
        const long t = slot[i];
        std::span<const Tensor> params;
        if (t >= 0) params = std::span<const Tensor>(w).subspan(2 * static_cast<std::size_t>(t), 2);
        const bool update = t >= 0 && plan_.active(static_cast<std::size_t>(t), k);
        if (update) {
          const std::size_t ti = static_cast<std::size_t>(t);
          const Tensor attn_in = l.kind == LayerKind::fully_connected ? flat_rows(h) : h;
          if (plan_.attended(ti)) {
            masks[ti].fw = attention_scores(plan_.attention.layers[ti]->fw, pool_mean(attn_in), plan_.rho_fw);
            step.attention_macs += rows * attention_module_macs(l.in_channels, plan_.attention.reduction);
          } else {
            masks[ti].fw.assign(l.in_channels, 1.0);
          }
        }
        Tensor y = layer_forward(l, params, h, caches[i]);
        step.forward_macs += rows * forward_macs(l, shapes[i]);
        if (update) {
          const std::size_t ti = static_cast<std::size_t>(t);
          const Tensor& kept = l.kind == LayerKind::group_norm       ? caches[i].xhat
                               : l.kind == LayerKind::fully_connected ? flat_rows(h)
                                                                      : h;
          store.store(i, kept, masks[ti].fw);
        }
        if (i >= lmin) store.add_sigma_bits(caches[i].sigma_bits(l));
        h = std::move(y);
      }
      step.peak_stored_words = std::max(step.peak_stored_words, store.stored_words());
      step.sigma_bits = std::max(step.sigma_bits, store.sigma_bits());
      rec.stored_words = store.stored_words();

      const Tensor target = slice_rows(support_y, begin, end);
      const double loss = loss_value(loss_, h.reshaped(target.shape()), target);
      require(std::isfinite(loss), ErrorKind::numeric, "adaptation loss is not finite");
      Tensor gy = loss_grad(loss_, h.reshaped(target.shape()), target).reshaped(h.shape());

      std::uint64_t attention_words = 0;
      for (std::size_t i = n_layers; i-- > 0 && lmin < n_layers;) {
        if (i < lmin) break;
        const LayerSpec& l = net.layers[i];
        const long t = slot[i];
        std::span<const Tensor> params;
        if (t >= 0) params = std::span<const Tensor>(w).subspan(2 * static_cast<std::size_t>(t), 2);
        if (t >= 0 && plan_.active(static_cast<std::size_t>(t), k)) {
          const std::size_t ti = static_cast<std::size_t>(t);
          if (plan_.attended(ti)) {
            masks[ti].bw = attention_scores(plan_.attention.layers[ti]->bw, pool_mean_abs(gy), plan_.rho_bw);
            step.attention_macs += rows * attention_module_macs(l.out_channels, plan_.attention.reduction);
            attention_words += rows * (l.in_channels + l.out_channels);
          } else {
            masks[ti].bw.assign(l.out_channels, 1.0);
          }
          const WeightGrad g = layer_weight_grad_masked(l, *store.get(i), gy, masks[ti]);
          for (std::size_t e = 0; e < g.weight.size(); ++e) acc[2 * ti][e] += fraction * g.weight[e];
          for (std::size_t e = 0; e < g.bias.size(); ++e) acc[2 * ti + 1][e] += fraction * g.bias[e];
          step.weight_grad_macs += g.macs;
          rec.masks.mu_fw[ti] = masks[ti].mu_fw();
          rec.masks.mu_bw[ti] = masks[ti].mu_bw();
          for (std::size_t c = 0; c < masks[ti].fw.size(); ++c) seen_fw[ti][c] = seen_fw[ti][c] || masks[ti].fw[c] != 0.0;
          for (std::size_t c = 0; c < masks[ti].bw.size(); ++c) seen_bw[ti][c] = seen_bw[ti][c] || masks[ti].bw[c] != 0.0;
          if (l.kind != LayerKind::group_norm) rec.conv_fc_weight_grad_macs += g.macs;
        }
        if (i > lmin) {
          gy = layer_input_grad(l, params, caches[i], gy);
          step.input_grad_macs += rows * input_grad_macs(l, shapes[i]);
        }
      }
      step.attention_words = std::max(step.attention_words, attention_words);

      for (std::size_t t = 0; t < L; ++t) {
        if (!rec.masks.active[t]) continue;
        rec.predicted_stored_words += cost::stored_words_term(net, t, rec.masks, rows);
        if (net.layers[trainable[t]].kind != LayerKind::group_norm)
          rec.predicted_conv_fc_weight_grad_macs += cost::weight_grad_macs_term(net, t, rec.masks, rows);
      }
      report_.batches.push_back(std::move(rec));
    }

    for (std::size_t t = 0; t < L; ++t) {
      auto count = [](const std::vector<bool>& v) { return static_cast<std::size_t>(std::count(v.begin(), v.end(), true)); };
      step.union_masks.mu_fw[t].nonzero = count(seen_fw[t]);
      step.union_masks.mu_bw[t].nonzero = count(seen_bw[t]);
      if (!plan_.active(t, k)) continue;
      const double a = plan_.step_size(t, k);
      for (std::size_t p : {2 * t, 2 * t + 1})
        for (std::size_t e = 0; e < w[p].size(); ++e) w[p][e] -= a * acc[p][e];
    }
    for (const Tensor& p : w) check_finite(p, "adapted weights");
    report_.steps.push_back(std::move(step));
  }
  return w;
}

cost::CostQuery session_query(const AdaptPlan& plan, const SessionReport& report) {
  cost::CostQuery q;
  q.network = plan.network;
  q.batch = std::min(report.partial_batch, report.support_rows);
  for (const auto& s : report.steps) q.steps.push_back(s.union_masks);
  q.attention = plan.attention_enabled;
  return q;
}

cost::CostQuery session_query_task_mean(const AdaptPlan& plan, const SessionReport& report) {
  cost::CostQuery q = session_query(plan, report);
  if (q.steps.empty()) return q;
  const std::size_t L = q.steps.front().active.size();
  for (std::size_t l = 0; l < L; ++l) {
    for (int dir = 0; dir < 2; ++dir) {
      std::size_t sum = 0, n = 0;
      for (const auto& st : q.steps) {
        if (!st.active[l]) continue;
        sum += (dir == 0 ? st.mu_fw : st.mu_bw)[l].nonzero;
        ++n;
      }
      if (n == 0) continue;
      const std::size_t mean = (sum + n - 1) / n;
      for (auto& st : q.steps)
        if (st.active[l]) (dir == 0 ? st.mu_fw : st.mu_bw)[l].nonzero = mean;
    }
  }
  return q;
}

namespace {

double mean_ratio(const cost::StepMasks& m, bool forward) {
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t l = 0; l < m.active.size(); ++l) {
    if (!m.active[l]) continue;
    sum += (forward ? m.mu_fw : m.mu_bw)[l].value();
    ++n;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

}  // namespace

std::string session_csv(const AdaptPlan& plan, const SessionReport& report) {
  std::ostringstream o;
  o.precision(17);
  o << "record,step,batch,rows,stored_words,predicted_stored_words,conv_fc_weight_grad_MACs,"
       "predicted_conv_fc_weight_grad_MACs,total_MACs,predicted_total_MACs,mean_mu_fw,mean_mu_bw\n";
  std::vector<std::size_t> batch_in_step(report.steps.size(), 0);
  std::vector<std::uint64_t> wgrad(report.steps.size(), 0);
  std::vector<double> wgrad_pred(report.steps.size(), 0.0);
  for (const auto& b : report.batches) {
    const std::size_t idx = batch_in_step[b.step]++;
    wgrad[b.step] += b.conv_fc_weight_grad_macs;
    wgrad_pred[b.step] += b.predicted_conv_fc_weight_grad_macs;
    o << "batch," << b.step << ',' << idx << ',' << b.rows << ',' << b.stored_words << ','
      << b.predicted_stored_words << ',' << b.conv_fc_weight_grad_macs << ','
      << b.predicted_conv_fc_weight_grad_macs << ",,," << mean_ratio(b.masks, true) << ','
      << mean_ratio(b.masks, false) << '\n';
  }
  if (report.steps.empty()) return o.str();
  cost::CostQuery mem = session_query(plan, report);
  const cost::MemoryBreakdown memory = cost::adapt_peak_memory(mem);
  cost::CostQuery mac = mem;
  mac.batch = report.support_rows;
  const cost::MacBreakdown macs = cost::adapt_macs(mac);
  for (std::size_t k = 0; k < report.steps.size(); ++k) {
    const StepRecord& s = report.steps[k];
    const std::uint64_t total = s.forward_macs + s.weight_grad_macs + s.input_grad_macs + s.attention_macs;
    o << "step," << k << ",," << report.support_rows << ',' << s.peak_stored_words << ','
      << memory.dominant_per_step[k] << ',' << wgrad[k] << ',' << wgrad_pred[k] << ',' << total << ','
      << macs.per_step[k] << ',' << mean_ratio(s.union_masks, true) << ',' << mean_ratio(s.union_masks, false)
      << '\n';
  }
  return o.str();
}

}  // namespace pmeta
