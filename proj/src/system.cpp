#include "hinfq/system.hpp"

#include <string>

namespace hinfq {

namespace {

void require_finite(const Eigen::MatrixXd& m, const char* name) {
  if (!m.allFinite()) {
    throw DimensionError(std::string(name) + ": non-finite entries");
  }
}

void check_vec(const Eigen::VectorXd& v, Eigen::Index n, const char* name) {
  if (v.size() != n) {
    throw DimensionError(std::string(name) + ": expected length " +
                         std::to_string(n) + ", got " + std::to_string(v.size()));
  }
}

}  // namespace

SystemDynamics::SystemDynamics(Eigen::MatrixXd a, Eigen::MatrixXd b, Eigen::MatrixXd l)
    : A(std::move(a)), B(std::move(b)), L(std::move(l)) {
  if (A.rows() != A.cols()) throw DimensionError("SystemDynamics: A must be square");
  if (A.rows() == 0) throw DimensionError("SystemDynamics: empty state");
  if (B.rows() != A.rows()) throw DimensionError("SystemDynamics: B row count != state dim");
  if (L.rows() != A.rows()) throw DimensionError("SystemDynamics: L row count != state dim");
  if (B.cols() == 0) throw DimensionError("SystemDynamics: empty control");
  if (L.cols() == 0) throw DimensionError("SystemDynamics: empty disturbance");
  require_finite(A, "A");
  require_finite(B, "B");
  require_finite(L, "L");
}

CostSpec::CostSpec(Eigen::MatrixXd rx, Eigen::MatrixXd rv, double gamma_bound, double sym_tol)
    : gamma(gamma_bound) {
  if (rx.rows() != rx.cols()) throw DimensionError("CostSpec: Rx must be square");
  if (rv.rows() != rv.cols()) throw DimensionError("CostSpec: Rv must be square");
  require_finite(rx, "Rx");
  require_finite(rv, "Rv");
  if (!(gamma > 0.0)) throw DimensionError("CostSpec: gamma must be positive");

  rx_asymmetry = max_asymmetry(rx);
  rv_asymmetry = max_asymmetry(rv);
  if (rx_asymmetry > sym_tol) {
    throw DimensionError("CostSpec: Rx asymmetry " + std::to_string(rx_asymmetry) +
                         " exceeds tolerance");
  }
  if (rv_asymmetry > sym_tol) {
    throw DimensionError("CostSpec: Rv asymmetry " + std::to_string(rv_asymmetry) +
                         " exceeds tolerance");
  }
  Rx = sym_part(rx);
  Rv = sym_part(rv);

  if (min_eigenvalue_sym(Rx) < -sym_tol) {
    throw DimensionError("CostSpec: Rx is not positive semidefinite");
  }
  if (!(min_eigenvalue_sym(Rv) > 0.0)) {
    throw DimensionError("CostSpec: Rv is not positive definite");
  }
}

Eigen::VectorXd step(const SystemDynamics& dyn, const Eigen::VectorXd& x,
                     const Eigen::VectorXd& v, const Eigen::VectorXd& d) {
  const Dims dm = dyn.dims();
  check_vec(x, dm.m1, "step: x");
  check_vec(v, dm.m2, "step: v");
  check_vec(d, dm.m3, "step: d");
  return dyn.A * x + dyn.B * v + dyn.L * d;
}

double stage_cost(const CostSpec& cost, const Eigen::VectorXd& x,
                  const Eigen::VectorXd& v, const Eigen::VectorXd& d) {
  check_vec(x, cost.Rx.rows(), "stage_cost: x");
  check_vec(v, cost.Rv.rows(), "stage_cost: v");
  return x.dot(cost.Rx * x) + v.dot(cost.Rv * v) - cost.gamma * cost.gamma * d.squaredNorm();
}

namespace {

Trajectory rollout_impl(const SystemDynamics& dyn, const CostSpec& cost,
                        const PolicyPair& policies, const Eigen::VectorXd& x0,
                        Eigen::Index horizon, const DisturbanceFn* disturbance) {
  const Dims dm = dyn.dims();
  if (horizon < 1) throw DimensionError("rollout: horizon must be >= 1");
  check_vec(x0, dm.m1, "rollout: x0");
  if (policies.Kv.rows() != dm.m2 || policies.Kv.cols() != dm.m1 ||
      policies.Kd.rows() != dm.m3 || policies.Kd.cols() != dm.m1) {
    throw DimensionError("rollout: policy dimensions do not match plant");
  }

  Trajectory traj;
  traj.steps.reserve(static_cast<std::size_t>(horizon));
  Eigen::VectorXd x = x0;
  for (Eigen::Index t = 0; t < horizon; ++t) {
    if (!x.allFinite() || x.cwiseAbs().maxCoeff() > kDivergenceLimit) {
      throw DivergenceError("rollout: state diverged at step " + std::to_string(t),
                            static_cast<long>(t));
    }
    Eigen::VectorXd v = policies.Kv * x;
    Eigen::VectorXd d = disturbance ? (*disturbance)(t) : Eigen::VectorXd(policies.Kd * x);
    check_vec(d, dm.m3, "rollout: disturbance");
    Eigen::VectorXd x_next = dyn.A * x + dyn.B * v + dyn.L * d;
    traj.cost += stage_cost(cost, x, v, d);
    traj.steps.push_back(Transition{x, std::move(v), std::move(d), x_next});
    x = std::move(x_next);
  }
  return traj;
}

}  // namespace

Trajectory rollout(const SystemDynamics& dyn, const CostSpec& cost,
                   const PolicyPair& policies, const Eigen::VectorXd& x0,
                   Eigen::Index horizon) {
  return rollout_impl(dyn, cost, policies, x0, horizon, nullptr);
}

Trajectory rollout(const SystemDynamics& dyn, const CostSpec& cost,
                   const PolicyPair& policies, const Eigen::VectorXd& x0,
                   Eigen::Index horizon, const DisturbanceFn& disturbance) {
  if (!disturbance) throw DimensionError("rollout: null disturbance source");
  return rollout_impl(dyn, cost, policies, x0, horizon, &disturbance);
}

Eigen::MatrixXd closed_loop_matrix(const SystemDynamics& dyn, const PolicyPair& policies) {
  const Dims dm = dyn.dims();
  if (policies.Kv.rows() != dm.m2 || policies.Kv.cols() != dm.m1 ||
      policies.Kd.rows() != dm.m3 || policies.Kd.cols() != dm.m1) {
    throw DimensionError("closed_loop_matrix: policy dimensions do not match plant");
  }
  return dyn.A + dyn.B * policies.Kv + dyn.L * policies.Kd;
}

Eigen::VectorXcd open_loop_eigenvalues(const SystemDynamics& dyn) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(dyn.A, /*computeEigenvectors=*/false);
  return es.eigenvalues();
}

}  // namespace hinfq
