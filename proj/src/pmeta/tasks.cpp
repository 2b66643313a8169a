#include "pmeta/tasks.hpp"

#include <cmath>
#include <numbers>

#include "pmeta/error.hpp"

namespace pmeta {

SinusoidTasks::SinusoidTasks(std::uint64_t seed, std::size_t shots, std::size_t query)
    : rng_(seed), shots_(shots), query_(query) {
  require(shots >= 1 && query >= 1, ErrorKind::invalid_argument, "sinusoid tasks need shots and query >= 1");
}

double SinusoidTasks::target(double amplitude, double phase, double x) { return amplitude * std::sin(x - phase); }

Task SinusoidTasks::next() {
  amplitude_ = rng_.uniform(0.1, 5.0);
  phase_ = rng_.uniform(0.0, std::numbers::pi);
  auto draw = [&](std::size_t n, Tensor& x, Tensor& y) {
    x = Tensor({n, 1});
    y = Tensor({n, 1});
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng_.uniform(-5.0, 5.0);
      y[i] = target(amplitude_, phase_, x[i]);
    }
  };
  Task t;
  draw(shots_, t.support_x, t.support_y);
  draw(query_, t.query_x, t.query_y);
  return t;
}

ClusterTasks::ClusterTasks(std::uint64_t seed, std::size_t ways, std::size_t shots, std::size_t dim,
                           std::size_t query_per_class, double sigma)
    : rng_(seed), ways_(ways), shots_(shots), dim_(dim), query_(query_per_class), sigma_(sigma) {
  require(ways >= 2, ErrorKind::invalid_argument, "cluster tasks need at least 2 ways");
  require(shots >= 1 && dim >= 1 && query_per_class >= 1, ErrorKind::invalid_argument,
          "cluster tasks need shots, dim and query >= 1");
  require(sigma >= 0.0, ErrorKind::invalid_argument, "cluster sigma must be non-negative");
}

Task ClusterTasks::next() {
  std::vector<std::vector<double>> centers(ways_, std::vector<double>(dim_));
  for (auto& c : centers) {
    double norm = 0.0;
    while (norm < 1e-12) {
      norm = 0.0;
      for (double& v : c) {
        v = rng_.normal();
        norm += v * v;
      }
    }
    norm = std::sqrt(norm);
    for (double& v : c) v /= norm;
  }
  auto draw = [&](std::size_t per_class, Tensor& x, Tensor& y) {
    x = Tensor({ways_ * per_class, dim_});
    y = Tensor({ways_ * per_class, ways_});
    for (std::size_t c = 0; c < ways_; ++c)
      for (std::size_t s = 0; s < per_class; ++s) {
        const std::size_t row = c * per_class + s;
        for (std::size_t d = 0; d < dim_; ++d) x[row * dim_ + d] = centers[c][d] + sigma_ * rng_.normal();
        y[row * ways_ + c] = 1.0;
      }
  };
  Task t;
  t.classification = true;
  draw(shots_, t.support_x, t.support_y);
  draw(query_, t.query_x, t.query_y);
  return t;
}

}  // namespace pmeta
