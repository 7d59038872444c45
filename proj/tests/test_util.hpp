#pragma once

#include <Eigen/Dense>

#include "hinfq/riccati.hpp"
#include "hinfq/rng.hpp"
#include "hinfq/system.hpp"

namespace testutil {

inline Eigen::MatrixXd random_matrix(hinfq::Rng& rng, Eigen::Index rows, Eigen::Index cols,
                                     double scale = 1.0) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * rng.gauss();
  }
  return m;
}

inline Eigen::MatrixXd random_symmetric(hinfq::Rng& rng, Eigen::Index n, double scale = 1.0) {
  const Eigen::MatrixXd m = random_matrix(rng, n, n, scale);
  return 0.5 * (m + m.transpose());
}

inline Eigen::MatrixXd random_spd(hinfq::Rng& rng, Eigen::Index n, double ridge = 0.5) {
  const Eigen::MatrixXd m = random_matrix(rng, n, n);
  return m * m.transpose() + ridge * Eigen::MatrixXd::Identity(n, n);
}

// Open-loop stable plant with spectral radius at most rho_cap.
inline hinfq::SystemDynamics random_stable_dynamics(hinfq::Rng& rng, const hinfq::Dims& dims,
                                                    double rho_cap = 0.8) {
  Eigen::MatrixXd a = random_matrix(rng, dims.m1, dims.m1, 0.5);
  const double rho = hinfq::spectral_radius(a);
  if (rho > rho_cap) a *= rho_cap / rho;
  return hinfq::SystemDynamics(std::move(a), random_matrix(rng, dims.m1, dims.m2, 0.6),
                               random_matrix(rng, dims.m1, dims.m3, 0.4));
}

struct SolvableInstance {
  hinfq::SystemDynamics dyn;
  hinfq::CostSpec cost;
};

// Random instance whose game value exists: gamma is doubled from 1 until the
// fixed-point sweep goes through, then doubled once more so the instance sits
// comfortably inside the solvable region and the sweep contracts quickly.
inline SolvableInstance random_solvable_instance(hinfq::Rng& rng, const hinfq::Dims& dims) {
  hinfq::SystemDynamics dyn = random_stable_dynamics(rng, dims);
  const Eigen::MatrixXd rx = Eigen::MatrixXd::Identity(dims.m1, dims.m1);
  const Eigen::MatrixXd rv = Eigen::MatrixXd::Identity(dims.m2, dims.m2);
  double gamma = 1.0;
  for (int attempt = 0; attempt < 24; ++attempt) {
    try {
      (void)hinfq::solve_riccati(dyn, hinfq::CostSpec(rx, rv, gamma), 1e-10, 5000);
      return SolvableInstance{std::move(dyn), hinfq::CostSpec(rx, rv, 2.0 * gamma)};
    } catch (const hinfq::NumericError&) {
      gamma *= 2.0;
    }
  }
  throw std::runtime_error("random_solvable_instance: no feasible gamma found");
}

}  // namespace testutil
