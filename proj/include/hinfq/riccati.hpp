#pragma once

#include <Eigen/Dense>
#include <vector>

#include "hinfq/system.hpp"

namespace hinfq {

// Symmetric value kernel P of x' P x.
struct ValueKernel {
  Eigen::MatrixXd P;

  explicit ValueKernel(Eigen::MatrixXd p, double sym_tol = kDefaultSymTol);

  static ValueKernel zero(Eigen::Index m1) {
    return ValueKernel(Eigen::MatrixXd::Zero(m1, m1));
  }
};

// Symmetric action-value kernel S over z = (x, v, d), with block accessors
// keyed by the (x, v, d) partition.
class QKernel {
 public:
  QKernel(Eigen::MatrixXd s, Dims dims, double sym_tol = kDefaultSymTol);

  const Eigen::MatrixXd& S() const { return S_; }
  const Dims& dims() const { return dims_; }

  auto xx() const { return S_.block(0, 0, dims_.m1, dims_.m1); }
  auto xv() const { return S_.block(0, dims_.m1, dims_.m1, dims_.m2); }
  auto xd() const { return S_.block(0, dims_.m1 + dims_.m2, dims_.m1, dims_.m3); }
  auto vx() const { return S_.block(dims_.m1, 0, dims_.m2, dims_.m1); }
  auto vv() const { return S_.block(dims_.m1, dims_.m1, dims_.m2, dims_.m2); }
  auto vd() const { return S_.block(dims_.m1, dims_.m1 + dims_.m2, dims_.m2, dims_.m3); }
  auto dx() const { return S_.block(dims_.m1 + dims_.m2, 0, dims_.m3, dims_.m1); }
  auto dv() const { return S_.block(dims_.m1 + dims_.m2, dims_.m1, dims_.m3, dims_.m2); }
  auto dd() const { return S_.block(dims_.m1 + dims_.m2, dims_.m1 + dims_.m2, dims_.m3, dims_.m3); }

 private:
  Eigen::MatrixXd S_;
  Dims dims_;
};

// Block-diagonal stage-cost kernel blkdiag(Rx, Rv, -gamma^2 I).
QKernel g_matrix(const CostSpec& cost, const Dims& dims);

// One action-value backup: G + [A B L]' P [A B L].
QKernel bellman_S_update(const SystemDynamics& dyn, const CostSpec& cost,
                         const ValueKernel& P);

// Saddle-point gains of z' S z over (v, d) at v = Kv x, d = Kd x.
PolicyPair gains_from_S(const QKernel& S, double cond_max = kDefaultCondMax);

// Contraction P = T' S T with T = [I; Kv; Kd]; output symmetrized.
ValueKernel p_from_S(const QKernel& S, const PolicyPair& policies);

// One game-Riccati sweep of the value kernel; output symmetrized.
ValueKernel riccati_step(const SystemDynamics& dyn, const CostSpec& cost,
                         const ValueKernel& P, double cond_max = kDefaultCondMax);

struct RiccatiSolution {
  ValueKernel P_star;
  QKernel S_star;
  PolicyPair policies;
  Eigen::Index iterations = 0;
  double residual = 0.0;           // ||riccati_step(P*) - P*||_2
  std::vector<double> deltas;      // per-sweep ||P_{i+1} - P_i||_2
};

inline constexpr double kRiccatiDefaultTol = 1e-10;
inline constexpr Eigen::Index kRiccatiDefaultMaxIter = 10000;

// Iterates riccati_step from P = 0 until the sweep moves the kernel by at
// most tol in spectral norm. `iterations` counts the sweeps that changed the
// iterate beyond tol (a fixed point reached on the first sweep reports 1).
RiccatiSolution solve_riccati(const SystemDynamics& dyn, const CostSpec& cost,
                              double tol = kRiccatiDefaultTol,
                              Eigen::Index max_iter = kRiccatiDefaultMaxIter,
                              double cond_max = kDefaultCondMax);

}  // namespace hinfq
