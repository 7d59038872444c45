#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "hinfq/errors.hpp"
#include "hinfq/linalg.hpp"

namespace hinfq {

// State / control / disturbance dimensions of a plant.
struct Dims {
  Eigen::Index m1 = 0;
  Eigen::Index m2 = 0;
  Eigen::Index m3 = 0;

  Eigen::Index nz() const { return m1 + m2 + m3; }

  // Number of free parameters of a symmetric nz x nz kernel.
  Eigen::Index critic_params() const { return nz() * (nz() + 1) / 2; }

  // Number of free parameters of a symmetric m1 x m1 kernel.
  Eigen::Index value_params() const { return m1 * (m1 + 1) / 2; }

  bool operator==(const Dims&) const = default;
};

// Linear plant x' = A x + B v + L d. Validated once, immutable afterwards.
struct SystemDynamics {
  Eigen::MatrixXd A;  // m1 x m1
  Eigen::MatrixXd B;  // m1 x m2
  Eigen::MatrixXd L;  // m1 x m3

  SystemDynamics(Eigen::MatrixXd a, Eigen::MatrixXd b, Eigen::MatrixXd l);

  Dims dims() const { return Dims{A.rows(), B.cols(), L.cols()}; }
};

// Stage cost x'Rx x + v'Rv v - gamma^2 d'd. Rx and Rv are symmetrized as
// (M + M^T)/2 on construction; the raw max-abs asymmetry is kept for
// reporting. Asymmetry beyond sym_tol is rejected.
struct CostSpec {
  Eigen::MatrixXd Rx;
  Eigen::MatrixXd Rv;
  double gamma = 0.0;
  double rx_asymmetry = 0.0;
  double rv_asymmetry = 0.0;

  CostSpec(Eigen::MatrixXd rx, Eigen::MatrixXd rv, double gamma_bound,
           double sym_tol = kDefaultSymTol);
};

// Linear state-feedback gains for the two players.
struct PolicyPair {
  Eigen::MatrixXd Kv;  // m2 x m1
  Eigen::MatrixXd Kd;  // m3 x m1

  static PolicyPair zero(const Dims& d) {
    return PolicyPair{Eigen::MatrixXd::Zero(d.m2, d.m1),
                      Eigen::MatrixXd::Zero(d.m3, d.m1)};
  }
};

// One observed sample (x, v, d, x_next).
struct Transition {
  Eigen::VectorXd x;
  Eigen::VectorXd v;
  Eigen::VectorXd d;
  Eigen::VectorXd x_next;
};

struct Trajectory {
  std::vector<Transition> steps;
  double cost = 0.0;
};

// Rollout aborts when ||x||_inf exceeds this; a bad transient policy must
// not overflow into infinities that corrupt downstream least squares.
inline constexpr double kDivergenceLimit = 1e12;

Eigen::VectorXd step(const SystemDynamics& dyn, const Eigen::VectorXd& x,
                     const Eigen::VectorXd& v, const Eigen::VectorXd& d);

double stage_cost(const CostSpec& cost, const Eigen::VectorXd& x,
                  const Eigen::VectorXd& v, const Eigen::VectorXd& d);

// Supplies the disturbance for a given step index.
using DisturbanceFn = std::function<Eigen::VectorXd(Eigen::Index)>;

// Closed-loop rollout with v_t = Kv x_t and d_t = Kd x_t.
Trajectory rollout(const SystemDynamics& dyn, const CostSpec& cost,
                   const PolicyPair& policies, const Eigen::VectorXd& x0,
                   Eigen::Index horizon);

// Same, with an exogenous per-step disturbance source.
Trajectory rollout(const SystemDynamics& dyn, const CostSpec& cost,
                   const PolicyPair& policies, const Eigen::VectorXd& x0,
                   Eigen::Index horizon, const DisturbanceFn& disturbance);

Eigen::MatrixXd closed_loop_matrix(const SystemDynamics& dyn,
                                   const PolicyPair& policies);

// Diagnostic: open-loop eigenvalues of A. Stabilizability of (A, B) is
// assumed, not verified; this lets a caller eyeball the open-loop modes.
Eigen::VectorXcd open_loop_eigenvalues(const SystemDynamics& dyn);

}  // namespace hinfq
