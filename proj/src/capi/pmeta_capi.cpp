#include "pmeta/pmeta.h"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <exception>
#include <memory>
#include <new>
#include <string>
#include <vector>

#include "pmeta/adapt_runtime.hpp"
#include "pmeta/checkpoint.hpp"
#include "pmeta/config.hpp"
#include "pmeta/cost_model.hpp"
#include "pmeta/error.hpp"
#include "pmeta/meta_train.hpp"

struct pmeta_trainer {
  pmeta::ExperimentConfig config;
  std::unique_ptr<pmeta::MetaTrainer> trainer;
};

struct pmeta_plan {
  pmeta::AdaptPlan plan;
};

struct pmeta_task {
  pmeta::Task task;
};

struct pmeta_session {
  pmeta::AdaptPlan plan;  // as adapted from, for cost queries
  pmeta::SessionReport report;
};

namespace {

using pmeta::ErrorKind;

thread_local std::string g_last_error;

pmeta_status status_of(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return PMETA_E_INVALID_ARGUMENT;
    case ErrorKind::shape: return PMETA_E_SHAPE;
    case ErrorKind::numeric: return PMETA_E_NUMERIC;
    case ErrorKind::state: return PMETA_E_STATE;
    case ErrorKind::parse: return PMETA_E_PARSE;
    case ErrorKind::io: return PMETA_E_IO;
    case ErrorKind::unsupported: return PMETA_E_UNSUPPORTED;
  }
  return PMETA_E_INTERNAL;
}

// Runs `f`, translating exceptions into status codes and the thread-local
// message.
template <class F>
pmeta_status guarded(F&& f) {
  g_last_error.clear();
  try {
    return f();
  } catch (const pmeta::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return PMETA_E_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return PMETA_E_INTERNAL;
  } catch (...) {
    g_last_error = "unknown exception";
    return PMETA_E_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  pmeta::require(p != nullptr, ErrorKind::invalid_argument, std::string(what) + " is NULL");
}

pmeta_status copy_out(const std::string& text, char* buf, size_t cap, size_t* needed) {
  if (needed) *needed = text.size() + 1;
  if (!buf || cap < text.size() + 1) {
    g_last_error = "buffer too small: need " + std::to_string(text.size() + 1) + " bytes";
    return PMETA_E_BUFFER_TOO_SMALL;
  }
  std::memcpy(buf, text.data(), text.size());
  buf[text.size()] = '\0';
  return PMETA_OK;
}

pmeta::Tensor matrix(const double* data, size_t rows, size_t cols, const char* what) {
  need(data, what);
  pmeta::require(rows > 0 && cols > 0, ErrorKind::invalid_argument, std::string(what) + " is empty");
  return pmeta::Tensor({rows, cols}, std::vector<double>(data, data + rows * cols));
}

pmeta::LossKind loss_kind(pmeta_loss loss) {
  switch (loss) {
    case PMETA_LOSS_MSE: return pmeta::LossKind::mse;
    case PMETA_LOSS_CROSS_ENTROPY: return pmeta::LossKind::cross_entropy;
  }
  pmeta::fail(ErrorKind::invalid_argument, "unknown loss " + std::to_string(static_cast<int>(loss)));
}

// Inputs arrive as [rows, features]; convolutional networks take them as
// [rows, C, H, W].
pmeta::Tensor network_input(const pmeta::NetworkSpec& net, const pmeta::Tensor& x) {
  const pmeta::ActShape in = net.shapes().front();
  pmeta::require(x.dim(1) == in.words(), ErrorKind::shape,
                 "inputs have " + std::to_string(x.dim(1)) + " columns, network expects " +
                     std::to_string(in.words()));
  return x.reshaped(in.batched(x.dim(0)));
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

pmeta::NetworkSpec resolve_model(const std::string& model, size_t ways, std::string& label) {
  const std::string key = lower(model);
  for (const auto& name : pmeta::NetworkSpec::preset_names()) {
    if (lower(name) == key || (key == "resnet12" && name == "ResNet12-cost-only")) {
      label = key == "resnet12" ? "ResNet12" : name;
      return pmeta::NetworkSpec::preset(name, ways);
    }
  }
  label = model;
  return pmeta::NetworkSpec::parse(pmeta::read_text_file(model));
}

pmeta::cost::Scenario scenario_of(const pmeta_scenario* s) {
  need(s, "scenario");
  need(s->model, "scenario model");
  need(s->method, "scenario method");
  pmeta::require(s->ways > 0 && s->shots > 0 && s->partial_batch > 0 && s->steps > 0,
                 ErrorKind::invalid_argument, "ways, shots, partial_batch and steps must be positive");
  pmeta::cost::Scenario out;
  out.network = resolve_model(s->model, s->ways, out.model);
  const pmeta::cost::Method m = pmeta::cost::parse_method(s->method);
  out.method = pmeta::cost::method_name(m);
  out.setting = std::to_string(s->ways) + "-way " + std::to_string(s->shots) + "-shot, b=" +
                std::to_string(s->partial_batch);
  out.mac_batch = s->ways * s->shots;
  out.memory_batch = std::min(s->partial_batch, out.mac_batch);
  out.steps = s->steps;
  out.attention = m == pmeta::cost::Method::pmeta;
  return out;
}

}  // namespace

extern "C" {

const char* pmeta_status_name(pmeta_status status) {
  switch (status) {
    case PMETA_OK: return "ok";
    case PMETA_E_INVALID_ARGUMENT: return "invalid_argument";
    case PMETA_E_SHAPE: return "shape";
    case PMETA_E_NUMERIC: return "numeric";
    case PMETA_E_STATE: return "state";
    case PMETA_E_PARSE: return "parse";
    case PMETA_E_IO: return "io";
    case PMETA_E_UNSUPPORTED: return "unsupported";
    case PMETA_E_BUFFER_TOO_SMALL: return "buffer_too_small";
    case PMETA_E_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* pmeta_last_error(void) { return g_last_error.c_str(); }

const char* pmeta_version(void) { return "1.0.0"; }

// --- training ---------------------------------------------------------------

static pmeta_status make_trainer(pmeta::ExperimentConfig cfg, pmeta_trainer** out) {
  need(out, "out");
  *out = nullptr;
  cfg.validate();
  auto t = std::make_unique<pmeta_trainer>();
  t->config = cfg;
  t->trainer = std::make_unique<pmeta::MetaTrainer>(
      cfg.resolve_network(), cfg.train, cfg.task_source(cfg.task_seed),
      cfg.tasks(cfg.validation_seed, cfg.train.validation_tasks), cfg.loss());
  *out = t.release();
  return PMETA_OK;
}

pmeta_status pmeta_trainer_create(const char* config_text, pmeta_trainer** out) {
  return guarded([&] {
    need(config_text, "config_text");
    return make_trainer(pmeta::ExperimentConfig::parse(config_text), out);
  });
}

pmeta_status pmeta_trainer_create_from_file(const char* config_path, pmeta_trainer** out) {
  return guarded([&] {
    need(config_path, "config_path");
    return make_trainer(pmeta::ExperimentConfig::load(config_path), out);
  });
}

void pmeta_trainer_destroy(pmeta_trainer* trainer) { delete trainer; }

pmeta_status pmeta_trainer_epochs(const pmeta_trainer* trainer, size_t* total, size_t* done) {
  return guarded([&] {
    need(trainer, "trainer");
    if (total) *total = trainer->config.train.epochs;
    if (done) *done = trainer->trainer->history().size();
    return PMETA_OK;
  });
}

pmeta_status pmeta_trainer_run_epoch(pmeta_trainer* trainer, pmeta_epoch_metrics* metrics) {
  return guarded([&] {
    need(trainer, "trainer");
    pmeta::require(trainer->trainer->history().size() < trainer->config.train.epochs, ErrorKind::state,
                   "all " + std::to_string(trainer->config.train.epochs) + " epochs have run");
    const pmeta::EpochMetrics m = trainer->trainer->run_epoch();
    if (metrics)
      *metrics = {m.epoch, m.mean_query_loss, m.validation_metric, m.alpha_sparsity, m.mean_mu_fw, m.mean_mu_bw};
    return PMETA_OK;
  });
}

pmeta_status pmeta_trainer_best_plan(const pmeta_trainer* trainer, pmeta_plan** out) {
  return guarded([&] {
    need(trainer, "trainer");
    need(out, "out");
    *out = nullptr;
    pmeta::require(!trainer->trainer->history().empty(), ErrorKind::state, "no epoch has run yet");
    *out = new pmeta_plan{trainer->trainer->best_plan()};
    return PMETA_OK;
  });
}

pmeta_status pmeta_trainer_config_text(const pmeta_trainer* trainer, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    need(trainer, "trainer");
    return copy_out(trainer->config.to_text(), buf, cap, needed);
  });
}

pmeta_status pmeta_metrics_csv_header(char* buf, size_t cap, size_t* needed) {
  return guarded([&] { return copy_out(pmeta::metrics_csv_header(), buf, cap, needed); });
}

pmeta_status pmeta_metrics_csv_row(const pmeta_epoch_metrics* metrics, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    need(metrics, "metrics");
    pmeta::EpochMetrics m;
    m.epoch = metrics->epoch;
    m.mean_query_loss = metrics->mean_query_loss;
    m.validation_metric = metrics->validation_metric;
    m.alpha_sparsity = metrics->alpha_sparsity;
    m.mean_mu_fw = metrics->mean_mu_fw;
    m.mean_mu_bw = metrics->mean_mu_bw;
    return copy_out(pmeta::metrics_csv_row(m), buf, cap, needed);
  });
}

// --- plans ------------------------------------------------------------------

pmeta_status pmeta_plan_load(const char* path, pmeta_plan** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = nullptr;
    *out = new pmeta_plan{pmeta::load_plan(path)};
    return PMETA_OK;
  });
}

pmeta_status pmeta_plan_save(const pmeta_plan* plan, const char* path) {
  return guarded([&] {
    need(plan, "plan");
    need(path, "path");
    pmeta::save_plan(plan->plan, path);
    return PMETA_OK;
  });
}

void pmeta_plan_destroy(pmeta_plan* plan) { delete plan; }

pmeta_status pmeta_plan_info_get(const pmeta_plan* plan, pmeta_plan_info* info) {
  return guarded([&] {
    need(plan, "plan");
    need(info, "info");
    const pmeta::AdaptPlan& p = plan->plan;
    pmeta_plan_info r{};
    r.layers = p.layers();
    r.steps = p.steps();
    r.input_words = p.network.shapes().front().words();
    r.output_words = p.network.output().words();
    for (size_t l = 0; l < p.layers(); ++l) {
      bool any = false;
      for (size_t k = 0; k < p.steps(); ++k) any = any || p.active(l, k);
      r.active_layers += any ? 1 : 0;
    }
    r.attention = p.attention_enabled ? 1 : 0;
    r.rho_fw = p.rho_fw;
    r.rho_bw = p.rho_bw;
    *info = r;
    return PMETA_OK;
  });
}

pmeta_status pmeta_plan_set_rho(pmeta_plan* plan, double rho_fw, double rho_bw) {
  return guarded([&] {
    need(plan, "plan");
    pmeta::require(rho_fw >= 0 && rho_fw < 1 && rho_bw >= 0 && rho_bw < 1, ErrorKind::invalid_argument,
                   "rho must lie in [0, 1)");
    plan->plan.rho_fw = rho_fw;
    plan->plan.rho_bw = rho_bw;
    return PMETA_OK;
  });
}

pmeta_status pmeta_plan_alpha(const pmeta_plan* plan, double* out, size_t cap, size_t* count) {
  return guarded([&] {
    need(plan, "plan");
    const auto a = plan->plan.alpha.data();
    if (count) *count = a.size();
    if (!out || cap < a.size()) {
      g_last_error = "buffer too small: need " + std::to_string(a.size()) + " values";
      return PMETA_E_BUFFER_TOO_SMALL;
    }
    std::copy(a.begin(), a.end(), out);
    return PMETA_OK;
  });
}

pmeta_status pmeta_plan_weights(const pmeta_plan* plan, double* out, size_t cap, size_t* count) {
  return guarded([&] {
    need(plan, "plan");
    size_t n = 0;
    for (const auto& w : plan->plan.weights) n += w.size();
    if (count) *count = n;
    if (!out || cap < n) {
      g_last_error = "buffer too small: need " + std::to_string(n) + " values";
      return PMETA_E_BUFFER_TOO_SMALL;
    }
    for (const auto& w : plan->plan.weights) out = std::copy(w.data().begin(), w.data().end(), out);
    return PMETA_OK;
  });
}

pmeta_status pmeta_plan_network_text(const pmeta_plan* plan, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    need(plan, "plan");
    return copy_out(plan->plan.network.to_text(), buf, cap, needed);
  });
}

// --- tasks ------------------------------------------------------------------

pmeta_status pmeta_task_sample(const char* config_text, uint64_t seed, size_t index, pmeta_task** out) {
  return guarded([&] {
    need(config_text, "config_text");
    need(out, "out");
    *out = nullptr;
    const pmeta::ExperimentConfig cfg = pmeta::ExperimentConfig::parse(config_text);
    auto src = cfg.task_source(seed);
    for (size_t i = 0; i < index; ++i) src->next();
    *out = new pmeta_task{src->next()};
    return PMETA_OK;
  });
}

void pmeta_task_destroy(pmeta_task* task) { delete task; }

pmeta_status pmeta_task_matrix(const pmeta_task* task, pmeta_task_part part, const double** data, size_t* rows,
                               size_t* cols) {
  return guarded([&] {
    need(task, "task");
    const pmeta::Tensor* t = nullptr;
    switch (part) {
      case PMETA_SUPPORT_X: t = &task->task.support_x; break;
      case PMETA_SUPPORT_Y: t = &task->task.support_y; break;
      case PMETA_QUERY_X: t = &task->task.query_x; break;
      case PMETA_QUERY_Y: t = &task->task.query_y; break;
    }
    pmeta::require(t != nullptr, ErrorKind::invalid_argument, "unknown task part");
    if (data) *data = t->data().data();
    if (rows) *rows = t->dim(0);
    if (cols) *cols = t->size() / t->dim(0);
    return PMETA_OK;
  });
}

pmeta_status pmeta_task_loss(const pmeta_task* task, pmeta_loss* loss) {
  return guarded([&] {
    need(task, "task");
    need(loss, "loss");
    *loss = task->task.classification ? PMETA_LOSS_CROSS_ENTROPY : PMETA_LOSS_MSE;
    return PMETA_OK;
  });
}

// --- adaptation -------------------------------------------------------------

pmeta_status pmeta_adapt(const pmeta_plan* plan, const double* x, size_t rows, size_t x_cols, const double* y,
                         size_t y_cols, size_t partial_batch, pmeta_loss loss, pmeta_plan** adapted,
                         pmeta_session** session) {
  return guarded([&] {
    need(plan, "plan");
    need(adapted, "adapted");
    *adapted = nullptr;
    if (session) *session = nullptr;
    const pmeta::Tensor sx = network_input(plan->plan.network, matrix(x, rows, x_cols, "x"));
    const pmeta::Tensor sy = matrix(y, rows, y_cols, "y");
    pmeta::AdaptSession s(plan->plan, partial_batch, loss_kind(loss));
    auto result = std::make_unique<pmeta_plan>(pmeta_plan{plan->plan});
    result->plan.weights = s.adapt(sx, sy);
    if (session) *session = new pmeta_session{plan->plan, s.report()};
    *adapted = result.release();
    return PMETA_OK;
  });
}

pmeta_status pmeta_evaluate(const pmeta_plan* plan, const double* x, size_t rows, size_t x_cols, const double* y,
                            size_t y_cols, pmeta_loss loss, double* value) {
  return guarded([&] {
    need(plan, "plan");
    need(value, "value");
    const pmeta::Tensor qx = network_input(plan->plan.network, matrix(x, rows, x_cols, "x"));
    *value = pmeta::evaluate_loss(plan->plan.network, plan->plan.weights, qx, matrix(y, rows, y_cols, "y"),
                                  loss_kind(loss));
    return PMETA_OK;
  });
}

void pmeta_session_destroy(pmeta_session* session) { delete session; }

pmeta_status pmeta_session_summary_get(const pmeta_session* session, pmeta_session_summary* out) {
  return guarded([&] {
    need(session, "session");
    need(out, "out");
    const pmeta::SessionReport& r = session->report;
    pmeta_session_summary s{};
    s.steps = r.steps.size();
    s.partial_batches = r.batches.size();
    s.support_rows = r.support_rows;
    s.partial_batch = r.partial_batch;
    s.peak_stored_words = r.peak_stored_words();
    s.total_macs = r.total_macs();
    s.weight_grad_macs = r.total_weight_grad_macs();
    for (const auto& b : r.batches)
      if (b.stored_words != b.predicted_stored_words ||
          static_cast<double>(b.conv_fc_weight_grad_macs) != b.predicted_conv_fc_weight_grad_macs)
        ++s.mismatches;
    *out = s;
    return PMETA_OK;
  });
}

pmeta_status pmeta_session_csv(const pmeta_session* session, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    need(session, "session");
    return copy_out(pmeta::session_csv(session->plan, session->report), buf, cap, needed);
  });
}

pmeta_status pmeta_session_report_csv(const pmeta_session* session, const char* model, char* buf, size_t cap,
                                      size_t* needed) {
  return guarded([&] {
    need(session, "session");
    need(model, "model");
    const pmeta::SessionReport& r = session->report;
    std::vector<pmeta::cost::ReportRow> rows;
    const std::string base = std::to_string(r.support_rows) + " support rows, b=" + std::to_string(r.partial_batch);
    const pmeta::cost::CostQuery per_step = pmeta::session_query(session->plan, r);
    const pmeta::cost::CostQuery task_mean = pmeta::session_query_task_mean(session->plan, r);
    for (const auto& [q, how] : {std::pair{&per_step, "per-step ratios"}, std::pair{&task_mean, "task-mean ratios"}}) {
      pmeta::cost::Scenario s;
      s.model = model;
      s.network = session->plan.network;
      s.method = "measured";
      s.setting = base + ", " + how;
      s.memory_batch = q->batch;
      s.mac_batch = r.support_rows;
      s.steps = q->steps.size();
      s.attention = q->attention;
      s.measured = q->steps;
      rows.push_back(pmeta::cost::evaluate(s));
    }
    return copy_out(pmeta::cost::report_csv(rows), buf, cap, needed);
  });
}

// --- cost model -------------------------------------------------------------

pmeta_status pmeta_profile(const pmeta_scenario* scenario, pmeta_cost_row* out) {
  return guarded([&] {
    need(out, "out");
    const pmeta::cost::ReportRow r = pmeta::cost::evaluate(scenario_of(scenario));
    *out = {r.inference_mb, r.adapt_mb, r.inference_gmac, r.adapt_gmac};
    return PMETA_OK;
  });
}

pmeta_status pmeta_profile_csv(const pmeta_scenario* scenario, int detail, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    const pmeta::cost::Scenario s = scenario_of(scenario);
    const std::string text =
        detail ? pmeta::cost::report_detail_csv({s}) : pmeta::cost::report_csv({pmeta::cost::evaluate(s)});
    return copy_out(text, buf, cap, needed);
  });
}

pmeta_status pmeta_profile_breakdown(const pmeta_scenario* scenario, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    return copy_out(pmeta::cost::breakdown_text(pmeta::cost::evaluate(scenario_of(scenario))), buf, cap, needed);
  });
}

pmeta_status pmeta_table_csv(const char* table, int detail, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    need(table, "table");
    const auto scenarios = pmeta::cost::table_scenarios(table);
    if (detail) return copy_out(pmeta::cost::report_detail_csv(scenarios), buf, cap, needed);
    std::vector<pmeta::cost::ReportRow> rows;
    for (const auto& s : scenarios) rows.push_back(pmeta::cost::evaluate(s));
    return copy_out(pmeta::cost::report_csv(rows), buf, cap, needed);
  });
}

pmeta_status pmeta_table_breakdown(const char* table, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    need(table, "table");
    std::string text;
    for (const auto& s : pmeta::cost::table_scenarios(table)) text += pmeta::cost::breakdown_text(pmeta::cost::evaluate(s));
    return copy_out(text, buf, cap, needed);
  });
}

}  // extern "C"
