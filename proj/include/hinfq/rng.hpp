#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>

namespace hinfq {

// Deterministic random source. The gaussian and Poisson transforms are
// implemented here rather than taken from <random> so that a given seed
// produces the identical stream on every platform and standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // Uniform on [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; caches the spare deviate.
  double gauss();

  Eigen::VectorXd gauss_vector(Eigen::Index n);

  // Poisson count: CDF inversion for rate < 30, rounded-and-clamped normal
  // approximation above (exact at case-study rates, robust for stress rates).
  long poisson(double rate);

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace hinfq
