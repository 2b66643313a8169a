#pragma once

// Synthetic few-shot task families.

#include <cstdint>
#include <memory>

#include "pmeta/rng.hpp"
#include "pmeta/tensor.hpp"

namespace pmeta {

// Inputs are [n, features]; regression targets are [n, 1], classification
// targets one-hot [n, ways].
struct Task {
  Tensor support_x, support_y;
  Tensor query_x, query_y;
  bool classification = false;
};

class TaskSource {
 public:
  virtual ~TaskSource() = default;
  virtual Task next() = 0;
};

// y = A sin(x - φ), A ~ U[0.1, 5], φ ~ U[0, π], x ~ U[-5, 5].
class SinusoidTasks : public TaskSource {
 public:
  SinusoidTasks(std::uint64_t seed, std::size_t shots, std::size_t query = 10);
  Task next() override;

  static double target(double amplitude, double phase, double x);
  double last_amplitude() const noexcept { return amplitude_; }
  double last_phase() const noexcept { return phase_; }

 private:
  Rng rng_;
  std::size_t shots_, query_;
  double amplitude_ = 0, phase_ = 0;
};

// N Gaussian clusters (σ = 0.3) around centers drawn uniformly on the unit
// sphere. Support and query rows are class-major.
class ClusterTasks : public TaskSource {
 public:
  ClusterTasks(std::uint64_t seed, std::size_t ways, std::size_t shots, std::size_t dim, std::size_t query_per_class = 15,
               double sigma = 0.3);
  Task next() override;

 private:
  Rng rng_;
  std::size_t ways_, shots_, dim_, query_;
  double sigma_;
};

}  // namespace pmeta
