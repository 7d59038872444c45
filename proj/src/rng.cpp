#include "hinfq/rng.hpp"

#include <cmath>

#include "hinfq/errors.hpp"

namespace hinfq {

double Rng::gauss() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

Eigen::VectorXd Rng::gauss_vector(Eigen::Index n) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = gauss();
  return v;
}

long Rng::poisson(double rate) {
  if (rate < 0.0) throw DimensionError("poisson: negative rate");
  if (rate == 0.0) return 0;
  if (rate < 30.0) {
    const double u = uniform();
    double p = std::exp(-rate);
    double cdf = p;
    long k = 0;
    while (u > cdf && k < 10000) {
      ++k;
      p *= rate / static_cast<double>(k);
      cdf += p;
    }
    return k;
  }
  const double draw = rate + std::sqrt(rate) * gauss();
  return draw <= 0.0 ? 0 : static_cast<long>(std::llround(draw));
}

}  // namespace hinfq
