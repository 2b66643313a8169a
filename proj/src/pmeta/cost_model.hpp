#pragma once

// Closed-form memory and MAC accounting for inference and few-shot
// adaptation.
//
// Words are 32-bit deployment words. σ' bookkeeping is counted in bits (one
// per ReLU output, ⌈log2 window²⌉ per max-pool output) so totals stay exact.
//
// Adaptation peak memory is the maximum, over a forward sweep, of
//   retained stores + σ' bits + held residual inputs + working buffers,
// scaled by the batch, plus one weight-gradient accumulator per updated layer
// and the attention pooling vectors. At a layer the working set is
// max(m(in), s + m(out)) where s is the layer's own store: the input buffer
// is reused for the store and output. A conv/fc layer keeping every input
// channel stores its input in place (s aliases the input). The backward sweep
// releases each layer's store before materializing its input gradient, so it
// never exceeds the forward peak.

#include <cstdint>
#include <string>
#include <vector>

#include "pmeta/layers.hpp"

namespace pmeta::cost {

struct MemoryUnits {
  double bytes_per_word = 4.0;
  double bytes_per_mb = 1e6;

  double mb(double words) const { return words * bytes_per_word / bytes_per_mb; }
};

enum class Method { maml, maml_pp, anil, boil, pmeta };
std::string method_name(Method m);
Method parse_method(const std::string& name);

// Per-step masks over the trainable layers of a network.
struct StepMasks {
  std::vector<bool> active;                 // α̂_l
  std::vector<CriticalRatio> mu_fw, mu_bw;  // realized ratios

  // All active/inactive per `method` with full ratios.
  static StepMasks for_method(const NetworkSpec& net, Method method);
};

struct CostQuery {
  NetworkSpec network;
  std::size_t batch = 1;
  std::vector<StepMasks> steps;
  bool attention = false;
};

CostQuery method_query(const NetworkSpec& net, Method method, std::size_t batch, std::size_t steps);

struct LayerMemory {
  std::size_t act_words = 0;     // m(x_l), output of the layer
  std::size_t weight_words = 0;  // m(w_l)
};
LayerMemory layer_memory(const NetworkSpec& net, std::size_t layer);

struct InferenceCost {
  double peak_words = 0;  // one sample of `rows` rows streamed at a time
  double macs = 0;        // whole batch
  std::size_t peak_layer = 0;
};
InferenceCost inference_cost(const NetworkSpec& net, std::size_t batch, std::size_t rows_per_sample = 1);

struct MemoryBreakdown {
  // Liveness peak and its composition at the peak point (per-sample parts are
  // already multiplied by the batch).
  double peak_words = 0;
  std::size_t peak_step = 0;
  std::size_t peak_layer = 0;
  double stores_words = 0;
  double sigma_words = 0;
  double held_words = 0;
  double working_words = 0;
  double accumulator_words = 0;
  double attention_words = 0;

  // Literal terms of the peak-memory formula for the worst step.
  double formula_max_activation = 0;
  double formula_weights = 0;
  double formula_stores = 0;
  double formula_sigma = 0;
  double formula_words = 0;
  // Dominant term: B Σ α̂ ⌈μ^fw C_{l-1}⌉ H_{l-1} W_{l-1}, worst step.
  double dominant_words = 0;
  std::vector<std::uint64_t> dominant_per_step;
};
MemoryBreakdown adapt_peak_memory(const CostQuery& q);

// Exact per-layer dominant-term words B · α̂ ⌈μ^fw C⌉ H W for one step.
std::uint64_t stored_words_term(const NetworkSpec& net, std::size_t trainable_index, const StepMasks& step,
                                std::size_t batch);
// Weight-gradient MAC term B · α̂ μ^fw μ^bw H_l W_l m(w_l) for one step; exact
// for conv and fc. Group norm uses its 2C weight words scaled by μ^fw μ^bw.
double weight_grad_macs_term(const NetworkSpec& net, std::size_t trainable_index, const StepMasks& step,
                             std::size_t batch);

struct MacBreakdown {
  std::vector<double> per_step;
  std::vector<double> forward, weight_grad, input_grad, attention;  // per step
  double total = 0;
  double mean_per_step = 0;
};
MacBreakdown adapt_macs(const CostQuery& q);

// ---------------------------------------------------------------------------
// Table reports

struct Scenario {
  std::string model;  // preset name or label
  NetworkSpec network;
  std::string method;  // maml, anil, boil, maml++, p-meta, inference
  std::string setting;
  std::size_t memory_batch = 1;  // batch held at once during adaptation
  std::size_t mac_batch = 1;     // batch processed per adaptation step
  std::size_t rows_per_sample = 1;
  std::size_t steps = 1;
  bool attention = false;
  std::vector<StepMasks> measured;  // realized masks; overrides the method's
};

struct ReportRow {
  std::string model, method, setting;
  double inference_mb = 0, adapt_mb = 0, inference_gmac = 0, adapt_gmac = 0;
  MemoryBreakdown memory;
  MacBreakdown macs;
};

ReportRow evaluate(const Scenario& s, const MemoryUnits& units = {});

// "Table1", "Table2", "Table3".
std::vector<Scenario> table_scenarios(const std::string& table);

std::string report_csv(const std::vector<ReportRow>& rows);
std::string report_detail_csv(const std::vector<Scenario>& scenarios);
std::string breakdown_text(const ReportRow& row, const MemoryUnits& units = {});

}  // namespace pmeta::cost
