#pragma once

#include <cstdint>

#include "pmeta/tensor.hpp"

namespace pmeta {

// xoshiro256** (Blackman & Vigna), state expanded from a 64-bit seed with
// splitmix64. next_u64/uniform/below are bit-identical on every platform;
// normal() additionally goes through libm log/cos.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  // [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n); n > 0.
  std::uint64_t below(std::uint64_t n);
  // Standard normal via Box-Muller; no cached second value.
  double normal();

  Tensor normal_tensor(const Shape& shape, double stddev);
  Tensor uniform_tensor(const Shape& shape, double lo, double hi);

  // Independent child stream, e.g. one per task.
  Rng split();

 private:
  std::uint64_t s_[4];
};

}  // namespace pmeta
