#ifndef PMETA_PMETA_H
#define PMETA_PMETA_H

/*
 * C interface to the pmeta engine: meta-training, memory-disciplined few-shot
 * adaptation and the closed-form cost model.
 *
 * Every function returns a pmeta_status. On failure a description is kept in
 * thread-local storage and pmeta_last_error() returns it until the next call
 * on the same thread. Handles are opaque and owned by the caller; destroy
 * functions accept NULL.
 *
 * Text results are written into caller buffers: `needed` receives the size
 * including the terminating NUL. Pass buf = NULL (or a short buffer) to query
 * it; the call then returns PMETA_E_BUFFER_TOO_SMALL.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define PMETA_API __declspec(dllexport)
#else
#define PMETA_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum pmeta_status {
  PMETA_OK = 0,
  PMETA_E_INVALID_ARGUMENT = 1,
  PMETA_E_SHAPE = 2,
  PMETA_E_NUMERIC = 3,
  PMETA_E_STATE = 4,
  PMETA_E_PARSE = 5,
  PMETA_E_IO = 6,
  PMETA_E_UNSUPPORTED = 7,
  PMETA_E_BUFFER_TOO_SMALL = 8,
  PMETA_E_INTERNAL = 9
} pmeta_status;

typedef enum pmeta_loss { PMETA_LOSS_MSE = 0, PMETA_LOSS_CROSS_ENTROPY = 1 } pmeta_loss;

typedef struct pmeta_trainer pmeta_trainer;
typedef struct pmeta_plan pmeta_plan;
typedef struct pmeta_task pmeta_task;
typedef struct pmeta_session pmeta_session;

/* Short lowercase name such as "parse" or "io". Never NULL. */
PMETA_API const char* pmeta_status_name(pmeta_status status);
PMETA_API const char* pmeta_last_error(void);
PMETA_API const char* pmeta_version(void);

/* ------------------------------------------------------------------------
 * Meta-training */

typedef struct pmeta_epoch_metrics {
  size_t epoch;
  double mean_query_loss;
  double validation_metric; /* mean post-adaptation query loss */
  double alpha_sparsity;    /* fraction of step sizes equal to zero */
  double mean_mu_fw;
  double mean_mu_bw;
} pmeta_epoch_metrics;

/* Config is `key = value` text; relative network paths resolve against the
 * working directory. */
PMETA_API pmeta_status pmeta_trainer_create(const char* config_text, pmeta_trainer** out);
PMETA_API pmeta_status pmeta_trainer_create_from_file(const char* config_path, pmeta_trainer** out);
PMETA_API void pmeta_trainer_destroy(pmeta_trainer* trainer);

PMETA_API pmeta_status pmeta_trainer_epochs(const pmeta_trainer* trainer, size_t* total, size_t* done);
/* PMETA_E_STATE once every configured epoch has run. */
PMETA_API pmeta_status pmeta_trainer_run_epoch(pmeta_trainer* trainer, pmeta_epoch_metrics* metrics);
/* Plan with the lowest validation metric so far. */
PMETA_API pmeta_status pmeta_trainer_best_plan(const pmeta_trainer* trainer, pmeta_plan** out);
/* Normalized config text, one key per line. */
PMETA_API pmeta_status pmeta_trainer_config_text(const pmeta_trainer* trainer, char* buf, size_t cap,
                                                 size_t* needed);

PMETA_API pmeta_status pmeta_metrics_csv_header(char* buf, size_t cap, size_t* needed);
PMETA_API pmeta_status pmeta_metrics_csv_row(const pmeta_epoch_metrics* metrics, char* buf, size_t cap,
                                             size_t* needed);

/* ------------------------------------------------------------------------
 * Plans: network, initial weights, step sizes and attention modules */

typedef struct pmeta_plan_info {
  size_t layers;         /* trainable layers */
  size_t steps;          /* inner steps K */
  size_t input_words;    /* per-sample input size */
  size_t output_words;   /* per-sample output size */
  size_t active_layers;  /* layers with a nonzero step size at some step */
  int attention;         /* nonzero when attention modules are present */
  double rho_fw;
  double rho_bw;
} pmeta_plan_info;

PMETA_API pmeta_status pmeta_plan_load(const char* path, pmeta_plan** out);
PMETA_API pmeta_status pmeta_plan_save(const pmeta_plan* plan, const char* path);
PMETA_API void pmeta_plan_destroy(pmeta_plan* plan);
PMETA_API pmeta_status pmeta_plan_info_get(const pmeta_plan* plan, pmeta_plan_info* info);
PMETA_API pmeta_status pmeta_plan_set_rho(pmeta_plan* plan, double rho_fw, double rho_bw);
/* Step sizes, row-major [layers, steps]; `count` receives layers * steps. */
PMETA_API pmeta_status pmeta_plan_alpha(const pmeta_plan* plan, double* out, size_t cap, size_t* count);
/* All weights concatenated in layer order, each row-major. */
PMETA_API pmeta_status pmeta_plan_weights(const pmeta_plan* plan, double* out, size_t cap, size_t* count);
PMETA_API pmeta_status pmeta_plan_network_text(const pmeta_plan* plan, char* buf, size_t cap, size_t* needed);

/* ------------------------------------------------------------------------
 * Synthetic tasks from an experiment config (task family, shots, ways...) */

typedef enum pmeta_task_part {
  PMETA_SUPPORT_X = 0,
  PMETA_SUPPORT_Y = 1,
  PMETA_QUERY_X = 2,
  PMETA_QUERY_Y = 3
} pmeta_task_part;

/* The `index`-th task of the stream seeded with `seed`. */
PMETA_API pmeta_status pmeta_task_sample(const char* config_text, uint64_t seed, size_t index, pmeta_task** out);
PMETA_API void pmeta_task_destroy(pmeta_task* task);
/* Row-major view valid until the task is destroyed. */
PMETA_API pmeta_status pmeta_task_matrix(const pmeta_task* task, pmeta_task_part part, const double** data,
                                         size_t* rows, size_t* cols);
PMETA_API pmeta_status pmeta_task_loss(const pmeta_task* task, pmeta_loss* loss);

/* ------------------------------------------------------------------------
 * Adaptation. Inputs are row-major [rows, x_cols] and [rows, y_cols]. */

typedef struct pmeta_session_summary {
  size_t steps;
  size_t partial_batches;
  size_t support_rows;
  size_t partial_batch;
  uint64_t peak_stored_words;
  uint64_t total_macs;
  uint64_t weight_grad_macs;
  /* Partial batches whose stored words or conv/fc weight-gradient MACs
   * differ from the closed form. Zero for a correct engine. */
  size_t mismatches;
} pmeta_session_summary;

PMETA_API pmeta_status pmeta_adapt(const pmeta_plan* plan, const double* x, size_t rows, size_t x_cols,
                                   const double* y, size_t y_cols, size_t partial_batch, pmeta_loss loss,
                                   pmeta_plan** adapted, pmeta_session** session);
PMETA_API pmeta_status pmeta_evaluate(const pmeta_plan* plan, const double* x, size_t rows, size_t x_cols,
                                      const double* y, size_t y_cols, pmeta_loss loss, double* value);

PMETA_API void pmeta_session_destroy(pmeta_session* session);
PMETA_API pmeta_status pmeta_session_summary_get(const pmeta_session* session, pmeta_session_summary* out);
/* Measured counters next to closed-form predictions, per partial batch and
 * per step. */
PMETA_API pmeta_status pmeta_session_csv(const pmeta_session* session, char* buf, size_t cap, size_t* needed);
/* Resource report rows (method "measured") costed from the realized masks:
 * one with per-step ratios and one with the task mean. `model` labels the
 * rows. */
PMETA_API pmeta_status pmeta_session_report_csv(const pmeta_session* session, const char* model, char* buf,
                                                size_t cap, size_t* needed);

/* ------------------------------------------------------------------------
 * Cost model. `model` is a preset name (case-insensitive; "resnet12" maps to
 * the cost-only ResNet12) or a path to a network text file. Methods: maml,
 * maml++, anil, boil, p-meta. Adaptation holds `partial_batch` samples at a
 * time and processes ways * shots samples per step. */

typedef struct pmeta_cost_row {
  double inference_mb;
  double adapt_mb;
  double inference_gmac;
  double adapt_gmac;
} pmeta_cost_row;

typedef struct pmeta_scenario {
  const char* model;
  const char* method;
  size_t ways;
  size_t shots;
  size_t partial_batch;
  size_t steps;
} pmeta_scenario;

PMETA_API pmeta_status pmeta_profile(const pmeta_scenario* scenario, pmeta_cost_row* out);
/* detail = 0: resource report CSV; detail != 0: per-layer detail CSV. */
PMETA_API pmeta_status pmeta_profile_csv(const pmeta_scenario* scenario, int detail, char* buf, size_t cap,
                                         size_t* needed);
/* Term-by-term memory and MAC breakdown as text. */
PMETA_API pmeta_status pmeta_profile_breakdown(const pmeta_scenario* scenario, char* buf, size_t cap,
                                               size_t* needed);
/* Built-in scenario sets "Table1", "Table2", "Table3". */
PMETA_API pmeta_status pmeta_table_csv(const char* table, int detail, char* buf, size_t cap, size_t* needed);
PMETA_API pmeta_status pmeta_table_breakdown(const char* table, char* buf, size_t cap, size_t* needed);

#ifdef __cplusplus
}
#endif

#endif /* PMETA_PMETA_H */
