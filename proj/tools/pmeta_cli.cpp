// Command-line front end. Talks to the engine only through the C interface.
//
// Failures print exactly one line to stderr,
//   error: <kind>: <message>
// and exit with the C status code (2 for usage errors).

#include <CLI11.hpp>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "pmeta/pmeta.h"

namespace {

struct Failure {
  std::string kind;
  std::string message;
  int code;
};

void check(pmeta_status s) {
  if (s != PMETA_OK) throw Failure{pmeta_status_name(s), pmeta_last_error(), static_cast<int>(s)};
}

[[noreturn]] void fail(pmeta_status s, const std::string& message) {
  throw Failure{pmeta_status_name(s), message, static_cast<int>(s)};
}

// Calls a buffer-filling function twice: once for the size, once for real.
template <class F>
std::string text_of(F&& f) {
  size_t needed = 0;
  const pmeta_status first = f(nullptr, 0, &needed);
  if (first != PMETA_E_BUFFER_TOO_SMALL) check(first);
  std::string buf(needed, '\0');
  check(f(buf.data(), buf.size(), &needed));
  buf.resize(needed ? needed - 1 : 0);
  return buf;
}

template <class T, void (*Destroy)(T*)>
struct Handle {
  T* p = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() { Destroy(p); }
  T** out() { return &p; }
  T* get() const { return p; }
};
using Plan = Handle<pmeta_plan, pmeta_plan_destroy>;
using Trainer = Handle<pmeta_trainer, pmeta_trainer_destroy>;
using Session = Handle<pmeta_session, pmeta_session_destroy>;
using TaskH = Handle<pmeta_task, pmeta_task_destroy>;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(PMETA_E_IO, "cannot open '" + path + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const std::string& path, const std::string& text) {
  if (path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(PMETA_E_IO, "cannot write '" + path + "'");
  out << text;
  if (!out) fail(PMETA_E_IO, "write to '" + path + "' failed");
}

// Sample files: CSV with a header naming input columns x0.. and target
// columns y0..; '#' lines are comments.
struct Samples {
  std::vector<double> x, y;
  size_t rows = 0, x_cols = 0, y_cols = 0;
};

Samples read_samples(const std::string& path) {
  std::istringstream in(read_file(path));
  Samples s;
  std::vector<bool> is_x;
  std::string line;
  size_t line_no = 0;
  auto bad = [&](const std::string& what) {
    fail(PMETA_E_PARSE, path + ":" + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    if (is_x.empty()) {
      for (const auto& c : cells) {
        if (c.empty() || (c[0] != 'x' && c[0] != 'y')) bad("header column '" + c + "' must start with x or y");
        is_x.push_back(c[0] == 'x');
        (c[0] == 'x' ? s.x_cols : s.y_cols)++;
      }
      if (s.x_cols == 0 || s.y_cols == 0) bad("header needs at least one x and one y column");
      continue;
    }
    if (cells.size() != is_x.size())
      bad("expected " + std::to_string(is_x.size()) + " values, found " + std::to_string(cells.size()));
    for (size_t i = 0; i < cells.size(); ++i) {
      double v = 0;
      const char* b = cells[i].data();
      while (*b == ' ') ++b;
      const char* e = cells[i].data() + cells[i].size();
      const auto r = std::from_chars(b, e, v);
      if (r.ec != std::errc() || r.ptr != e) bad("'" + cells[i] + "' is not a number");
      (is_x[i] ? s.x : s.y).push_back(v);
    }
    ++s.rows;
  }
  if (is_x.empty()) fail(PMETA_E_PARSE, path + ": missing header");
  if (s.rows == 0) fail(PMETA_E_PARSE, path + ": no samples");
  return s;
}

std::string samples_csv(const double* x, size_t rows, size_t x_cols, const double* y, size_t y_cols) {
  std::ostringstream o;
  o.precision(17);
  for (size_t c = 0; c < x_cols; ++c) o << (c ? "," : "") << 'x' << c;
  for (size_t c = 0; c < y_cols; ++c) o << ",y" << c;
  o << '\n';
  for (size_t r = 0; r < rows; ++r) {
    for (size_t c = 0; c < x_cols; ++c) o << (c ? "," : "") << x[r * x_cols + c];
    for (size_t c = 0; c < y_cols; ++c) o << ',' << y[r * y_cols + c];
    o << '\n';
  }
  return o.str();
}

pmeta_loss loss_of(const std::string& name, const Samples& s) {
  if (name == "mse") return PMETA_LOSS_MSE;
  if (name == "cross_entropy" || name == "ce") return PMETA_LOSS_CROSS_ENTROPY;
  if (name != "auto") fail(PMETA_E_INVALID_ARGUMENT, "unknown loss '" + name + "'");
  return s.y_cols > 1 ? PMETA_LOSS_CROSS_ENTROPY : PMETA_LOSS_MSE;
}

// Drops any `seed = ...` line and appends the override.
std::string with_seed(const std::string& config, unsigned long long seed) {
  std::istringstream in(config);
  std::ostringstream out;
  for (std::string line; std::getline(in, line);) {
    const auto start = line.find_first_not_of(" \t");
    if (start != std::string::npos && line.compare(start, 4, "seed") == 0) {
      const auto rest = line.find_first_not_of(" \t", start + 4);
      if (rest != std::string::npos && line[rest] == '=') continue;
    }
    out << line << '\n';
  }
  out << "seed = " << seed << '\n';
  return out.str();
}

// --- verbs -------------------------------------------------------------------

struct MetaTrainArgs {
  std::string config, checkpoint = "plan.pmeta", metrics = "metrics.csv";
  long long seed = -1;
  bool quiet = false;
};

void meta_train(const MetaTrainArgs& a) {
  std::string text = read_file(a.config);
  if (a.seed >= 0) text = with_seed(text, static_cast<unsigned long long>(a.seed));
  Trainer t;
  check(pmeta_trainer_create(text.c_str(), t.out()));
  size_t total = 0;
  check(pmeta_trainer_epochs(t.get(), &total, nullptr));
  std::string csv = text_of([](char* b, size_t c, size_t* n) { return pmeta_metrics_csv_header(b, c, n); }) + '\n';
  for (size_t e = 0; e < total; ++e) {
    pmeta_epoch_metrics m{};
    check(pmeta_trainer_run_epoch(t.get(), &m));
    const std::string row =
        text_of([&](char* b, size_t c, size_t* n) { return pmeta_metrics_csv_row(&m, b, c, n); }) + '\n';
    csv += row;
    if (!a.quiet) std::fprintf(stderr, "%s", row.c_str());
  }
  Plan best;
  check(pmeta_trainer_best_plan(t.get(), best.out()));
  check(pmeta_plan_save(best.get(), a.checkpoint.c_str()));
  write_file(a.metrics, csv);
}

struct AdaptArgs {
  std::string checkpoint, support, out = "adapted.pmeta", session = "session.csv", report, query, loss = "auto";
  size_t b = 1;
  double rho_fw = -1, rho_bw = -1;
};

void load_with_overrides(const std::string& path, double rho_fw, double rho_bw, Plan& plan) {
  check(pmeta_plan_load(path.c_str(), plan.out()));
  if (rho_fw >= 0 || rho_bw >= 0) {
    pmeta_plan_info info{};
    check(pmeta_plan_info_get(plan.get(), &info));
    check(pmeta_plan_set_rho(plan.get(), rho_fw >= 0 ? rho_fw : info.rho_fw, rho_bw >= 0 ? rho_bw : info.rho_bw));
  }
}

void adapt(const AdaptArgs& a) {
  Plan plan;
  load_with_overrides(a.checkpoint, a.rho_fw, a.rho_bw, plan);
  const Samples s = read_samples(a.support);
  const pmeta_loss loss = loss_of(a.loss, s);
  Plan adapted;
  Session session;
  check(pmeta_adapt(plan.get(), s.x.data(), s.rows, s.x_cols, s.y.data(), s.y_cols, a.b, loss, adapted.out(),
                    session.out()));
  check(pmeta_plan_save(adapted.get(), a.out.c_str()));
  write_file(a.session, text_of([&](char* b, size_t c, size_t* n) { return pmeta_session_csv(session.get(), b, c, n); }));
  if (!a.report.empty())
    write_file(a.report, text_of([&](char* b, size_t c, size_t* n) {
                 return pmeta_session_report_csv(session.get(), a.checkpoint.c_str(), b, c, n);
               }));

  pmeta_session_summary sum{};
  check(pmeta_session_summary_get(session.get(), &sum));
  std::printf("steps=%zu partial_batches=%zu support_rows=%zu b=%zu peak_stored_words=%llu total_MACs=%llu "
              "mismatches=%zu\n",
              sum.steps, sum.partial_batches, sum.support_rows, sum.partial_batch,
              static_cast<unsigned long long>(sum.peak_stored_words), static_cast<unsigned long long>(sum.total_macs),
              sum.mismatches);
  if (!a.query.empty()) {
    const Samples q = read_samples(a.query);
    double before = 0, after = 0;
    check(pmeta_evaluate(plan.get(), q.x.data(), q.rows, q.x_cols, q.y.data(), q.y_cols, loss, &before));
    check(pmeta_evaluate(adapted.get(), q.x.data(), q.rows, q.x_cols, q.y.data(), q.y_cols, loss, &after));
    std::printf("query_loss_before=%.6g query_loss_after=%.6g\n", before, after);
  }
}

struct ProfileArgs {
  bool table1 = false, table2 = false, table3 = false, breakdown = false;
  std::string model, method = "maml", out = "-", detail;
  size_t ways = 5, shots = 5, b = 1, steps = 1;
};

std::string tables_csv(const std::vector<std::string>& tables, int detail) {
  std::string all;
  for (const auto& t : tables) {
    std::string part =
        text_of([&](char* b, size_t c, size_t* n) { return pmeta_table_csv(t.c_str(), detail, b, c, n); });
    if (!all.empty()) part.erase(0, part.find('\n') + 1);  // keep one header
    all += part;
  }
  return all;
}

void profile(const ProfileArgs& a) {
  std::vector<std::string> tables;
  if (a.table1) tables.push_back("Table1");
  if (a.table2) tables.push_back("Table2");
  if (a.table3) tables.push_back("Table3");
  if (!tables.empty()) {
    if (!a.model.empty()) fail(PMETA_E_INVALID_ARGUMENT, "--model cannot be combined with --table1/2/3");
    write_file(a.out, tables_csv(tables, 0));
    if (!a.detail.empty()) write_file(a.detail, tables_csv(tables, 1));
    if (a.breakdown)
      for (const auto& t : tables)
        std::fprintf(stderr, "%s", text_of([&](char* b, size_t c, size_t* n) {
                       return pmeta_table_breakdown(t.c_str(), b, c, n);
                     }).c_str());
    return;
  }
  if (a.model.empty()) fail(PMETA_E_INVALID_ARGUMENT, "give --model or one of --table1/--table2/--table3");
  const pmeta_scenario s{a.model.c_str(), a.method.c_str(), a.ways, a.shots, a.b, a.steps};
  write_file(a.out, text_of([&](char* b, size_t c, size_t* n) { return pmeta_profile_csv(&s, 0, b, c, n); }));
  if (!a.detail.empty())
    write_file(a.detail, text_of([&](char* b, size_t c, size_t* n) { return pmeta_profile_csv(&s, 1, b, c, n); }));
  if (a.breakdown)
    std::fprintf(stderr, "%s",
                 text_of([&](char* b, size_t c, size_t* n) { return pmeta_profile_breakdown(&s, b, c, n); }).c_str());
}

struct ReportArgs {
  std::vector<std::string> tables{"Table1", "Table2", "Table3"};
  std::string out = "report.csv", detail, checkpoint, support, label, loss = "auto";
  size_t b = 1;
  double rho_fw = -1, rho_bw = -1;
};

void report(const ReportArgs& a) {
  std::string csv = tables_csv(a.tables, 0);
  if (csv.empty()) csv = "model,method,setting,inference_MB,adapt_MB,inference_GMAC,adapt_GMAC\n";
  if (!a.checkpoint.empty() || !a.support.empty()) {
    if (a.checkpoint.empty() || a.support.empty())
      fail(PMETA_E_INVALID_ARGUMENT, "--checkpoint and --support go together");
    Plan plan;
    load_with_overrides(a.checkpoint, a.rho_fw, a.rho_bw, plan);
    const Samples s = read_samples(a.support);
    Plan adapted;
    Session session;
    check(pmeta_adapt(plan.get(), s.x.data(), s.rows, s.x_cols, s.y.data(), s.y_cols, a.b, loss_of(a.loss, s),
                      adapted.out(), session.out()));
    const std::string label = a.label.empty() ? a.checkpoint : a.label;
    std::string rows = text_of([&](char* b, size_t c, size_t* n) {
      return pmeta_session_report_csv(session.get(), label.c_str(), b, c, n);
    });
    csv += rows.substr(rows.find('\n') + 1);
  }
  write_file(a.out, csv);
  if (!a.detail.empty()) write_file(a.detail, tables_csv(a.tables, 1));
}

struct SampleArgs {
  std::string config, support = "support.csv", query;
  unsigned long long seed = 3003;
  size_t index = 0;
};

void sample_task(const SampleArgs& a) {
  const std::string text = read_file(a.config);
  TaskH task;
  check(pmeta_task_sample(text.c_str(), a.seed, a.index, task.out()));
  auto emit = [&](pmeta_task_part px, pmeta_task_part py, const std::string& path) {
    const double *x = nullptr, *y = nullptr;
    size_t rows = 0, xc = 0, yc = 0;
    check(pmeta_task_matrix(task.get(), px, &x, &rows, &xc));
    check(pmeta_task_matrix(task.get(), py, &y, &rows, &yc));
    write_file(path, samples_csv(x, rows, xc, y, yc));
  };
  emit(PMETA_SUPPORT_X, PMETA_SUPPORT_Y, a.support);
  if (!a.query.empty()) emit(PMETA_QUERY_X, PMETA_QUERY_Y, a.query);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pmeta: memory-aware meta-learning, few-shot adaptation and cost profiling"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(pmeta_version()));

  MetaTrainArgs mt;
  auto* c_mt = app.add_subcommand("meta-train", "Meta-train from a config; writes a plan checkpoint and metrics CSV");
  c_mt->add_option("--config", mt.config, "Config file (key = value lines)")->required();
  c_mt->add_option("--checkpoint", mt.checkpoint, "Output plan checkpoint")->capture_default_str();
  c_mt->add_option("--metrics", mt.metrics, "Output metrics CSV ('-' for stdout)")->capture_default_str();
  c_mt->add_option("--seed", mt.seed, "Override the config seed")->check(CLI::NonNegativeNumber);
  c_mt->add_flag("--quiet", mt.quiet, "Do not echo metrics rows to stderr");

  AdaptArgs ad;
  auto* c_ad = app.add_subcommand("adapt", "Adapt a plan to a support set under partial batching");
  c_ad->add_option("--checkpoint", ad.checkpoint, "Plan checkpoint")->required();
  c_ad->add_option("--support", ad.support, "Support CSV (header x0..,y0..)")->required();
  c_ad->add_option("--out", ad.out, "Adapted checkpoint")->capture_default_str();
  c_ad->add_option("--session", ad.session, "Measured vs predicted counters CSV")->capture_default_str();
  c_ad->add_option("--report", ad.report, "Resource report CSV from the realized masks");
  c_ad->add_option("--query", ad.query, "Query CSV; prints loss before and after");
  c_ad->add_option("--b", ad.b, "Partial batch size")->capture_default_str()->check(CLI::PositiveNumber);
  c_ad->add_option("--rho-fw", ad.rho_fw, "Forward clipping threshold override")->check(CLI::Range(0.0, 0.999999));
  c_ad->add_option("--rho-bw", ad.rho_bw, "Backward clipping threshold override")->check(CLI::Range(0.0, 0.999999));
  c_ad->add_option("--loss", ad.loss, "mse, cross_entropy or auto (several y columns: cross_entropy)")
      ->capture_default_str();

  ProfileArgs pr;
  auto* c_pr = app.add_subcommand("profile", "Closed-form memory and MAC costs");
  c_pr->add_flag("--table1", pr.table1, "Inference vs adaptation for 4Conv, ResNet12, MLP-100-100");
  c_pr->add_flag("--table2", pr.table2, "Few-shot image baselines, b=1");
  c_pr->add_flag("--table3", pr.table3, "Reinforcement-learning MLP baselines");
  c_pr->add_option("--model", pr.model, "Preset (4conv, resnet12, mlp-100-100, mlp-40-40) or network file");
  c_pr->add_option("--method", pr.method, "maml, maml++, anil, boil or p-meta")->capture_default_str();
  c_pr->add_option("--ways", pr.ways, "Classes per task")->capture_default_str()->check(CLI::PositiveNumber);
  c_pr->add_option("--shots", pr.shots, "Samples per class")->capture_default_str()->check(CLI::PositiveNumber);
  c_pr->add_option("--b", pr.b, "Samples held at once during adaptation")->capture_default_str()->check(CLI::PositiveNumber);
  c_pr->add_option("--steps", pr.steps, "Adaptation steps")->capture_default_str()->check(CLI::PositiveNumber);
  c_pr->add_option("--out", pr.out, "Report CSV ('-' for stdout)")->capture_default_str();
  c_pr->add_option("--detail", pr.detail, "Per-layer detail CSV");
  c_pr->add_flag("--breakdown", pr.breakdown, "Print the term-by-term breakdown to stderr");

  ReportArgs rp;
  auto* c_rp = app.add_subcommand("report", "Resource report over table scenarios, optionally with a measured session");
  c_rp->add_option("--tables", rp.tables, "Scenario sets")->delimiter(',')->capture_default_str();
  c_rp->add_option("--out", rp.out, "Report CSV ('-' for stdout)")->capture_default_str();
  c_rp->add_option("--detail", rp.detail, "Per-layer detail CSV for the tables");
  c_rp->add_option("--checkpoint", rp.checkpoint, "Plan checkpoint for a measured p-meta row");
  c_rp->add_option("--support", rp.support, "Support CSV for the measured session");
  c_rp->add_option("--label", rp.label, "Model label for the measured rows");
  c_rp->add_option("--b", rp.b, "Partial batch size")->capture_default_str()->check(CLI::PositiveNumber);
  c_rp->add_option("--rho-fw", rp.rho_fw, "Forward clipping threshold override")->check(CLI::Range(0.0, 0.999999));
  c_rp->add_option("--rho-bw", rp.rho_bw, "Backward clipping threshold override")->check(CLI::Range(0.0, 0.999999));
  c_rp->add_option("--loss", rp.loss, "mse, cross_entropy or auto")->capture_default_str();

  SampleArgs sa;
  auto* c_sa = app.add_subcommand("sample-task", "Write one synthetic task from a config as support/query CSV");
  c_sa->add_option("--config", sa.config, "Config file")->required();
  c_sa->add_option("--seed", sa.seed, "Task stream seed")->capture_default_str();
  c_sa->add_option("--index", sa.index, "Task index in the stream")->capture_default_str();
  c_sa->add_option("--support", sa.support, "Support CSV")->capture_default_str();
  c_sa->add_option("--query", sa.query, "Query CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    for (char& ch : msg)
      if (ch == '\n') ch = ' ';
    std::fprintf(stderr, "error: usage: %s\n", msg.c_str());
    return 2;
  }

  try {
    if (*c_mt) meta_train(mt);
    if (*c_ad) adapt(ad);
    if (*c_pr) profile(pr);
    if (*c_rp) report(rp);
    if (*c_sa) sample_task(sa);
  } catch (const Failure& f) {
    std::string msg = f.message;
    for (char& ch : msg)
      if (ch == '\n') ch = ' ';
    std::fprintf(stderr, "error: %s: %s\n", f.kind.c_str(), msg.c_str());
    return f.code;
  }
  return 0;
}
