#include "hinfq/riccati.hpp"

#include <string>

namespace hinfq {

namespace {

// [A B L], the map from z = (x, v, d) to the successor state.
Eigen::MatrixXd stacked_input_map(const SystemDynamics& dyn) {
  const Dims dm = dyn.dims();
  Eigen::MatrixXd c(dm.m1, dm.nz());
  c << dyn.A, dyn.B, dyn.L;
  return c;
}

}  // namespace

ValueKernel::ValueKernel(Eigen::MatrixXd p, double sym_tol) {
  if (p.rows() != p.cols()) throw DimensionError("ValueKernel: P must be square");
  if (max_asymmetry(p) > sym_tol) {
    throw DimensionError("ValueKernel: P asymmetric beyond tolerance");
  }
  P = sym_part(p);
}

QKernel::QKernel(Eigen::MatrixXd s, Dims dims, double sym_tol) : dims_(dims) {
  if (s.rows() != s.cols()) throw DimensionError("QKernel: S must be square");
  if (s.rows() != dims.nz()) {
    throw DimensionError("QKernel: S order " + std::to_string(s.rows()) +
                         " does not match block dimensions " + std::to_string(dims.nz()));
  }
  if (max_asymmetry(s) > sym_tol) {
    throw DimensionError("QKernel: S asymmetric beyond tolerance");
  }
  S_ = sym_part(s);
}

QKernel g_matrix(const CostSpec& cost, const Dims& dims) {
  if (cost.Rx.rows() != dims.m1 || cost.Rv.rows() != dims.m2) {
    throw DimensionError("g_matrix: cost dimensions do not match dims");
  }
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(dims.nz(), dims.nz());
  g.block(0, 0, dims.m1, dims.m1) = cost.Rx;
  g.block(dims.m1, dims.m1, dims.m2, dims.m2) = cost.Rv;
  g.block(dims.m1 + dims.m2, dims.m1 + dims.m2, dims.m3, dims.m3) =
      -cost.gamma * cost.gamma * Eigen::MatrixXd::Identity(dims.m3, dims.m3);
  return QKernel(std::move(g), dims);
}

QKernel bellman_S_update(const SystemDynamics& dyn, const CostSpec& cost,
                         const ValueKernel& P) {
  const Dims dm = dyn.dims();
  if (P.P.rows() != dm.m1) throw DimensionError("bellman_S_update: P order != state dim");
  const Eigen::MatrixXd c = stacked_input_map(dyn);
  Eigen::MatrixXd s = g_matrix(cost, dm).S() + c.transpose() * P.P * c;
  return QKernel(sym_part(s), dm);
}

PolicyPair gains_from_S(const QKernel& S, double cond_max) {
  const Dims& dm = S.dims();

  const SymEig vv_eig{Eigen::MatrixXd(S.vv())};
  if (!vv_eig.positive_definite()) {
    throw SaddleIllPosed("gains_from_S: S_vv has a non-positive eigenvalue");
  }
  if (vv_eig.cond() > cond_max) {
    throw SaddleIllPosed("gains_from_S: S_vv condition number exceeds threshold");
  }
  const SymEig dd_eig{Eigen::MatrixXd(S.dd())};
  if (dd_eig.cond() > cond_max) {
    throw SaddleIllPosed("gains_from_S: S_dd condition number exceeds threshold");
  }

  const Eigen::MatrixXd dd_inv_dv = dd_eig.solve(S.dv());
  const Eigen::MatrixXd dd_inv_dx = dd_eig.solve(S.dx());
  const Eigen::MatrixXd vv_inv_vd = vv_eig.solve(S.vd());
  const Eigen::MatrixXd vv_inv_vx = vv_eig.solve(S.vx());

  const Eigen::MatrixXd schur_v = sym_part(S.vv() - S.vd() * dd_inv_dv);
  const Eigen::MatrixXd schur_d = sym_part(S.dd() - S.dv() * vv_inv_vd);

  const SymEig schur_v_eig{schur_v};
  if (schur_v_eig.cond() > cond_max) {
    throw SaddleIllPosed("gains_from_S: control Schur complement ill conditioned");
  }
  const SymEig schur_d_eig{schur_d};
  if (schur_d_eig.cond() > cond_max) {
    throw SaddleIllPosed("gains_from_S: disturbance Schur complement ill conditioned");
  }

  PolicyPair out{
      schur_v_eig.solve(S.vd() * dd_inv_dx - S.vx()),
      schur_d_eig.solve(S.dv() * vv_inv_vx - S.dx()),
  };
  if (out.Kv.rows() != dm.m2 || out.Kd.rows() != dm.m3) {
    throw DimensionError("gains_from_S: internal dimension error");
  }
  return out;
}

ValueKernel p_from_S(const QKernel& S, const PolicyPair& policies) {
  const Dims& dm = S.dims();
  if (policies.Kv.rows() != dm.m2 || policies.Kv.cols() != dm.m1 ||
      policies.Kd.rows() != dm.m3 || policies.Kd.cols() != dm.m1) {
    throw DimensionError("p_from_S: policy dimensions do not match kernel");
  }
  Eigen::MatrixXd t(dm.nz(), dm.m1);
  t << Eigen::MatrixXd::Identity(dm.m1, dm.m1), policies.Kv, policies.Kd;
  return ValueKernel(sym_part(t.transpose() * S.S() * t));
}

ValueKernel riccati_step(const SystemDynamics& dyn, const CostSpec& cost,
                         const ValueKernel& P, double cond_max) {
  const Dims dm = dyn.dims();
  if (P.P.rows() != dm.m1) throw DimensionError("riccati_step: P order != state dim");

  const Eigen::MatrixXd ltpl = dyn.L.transpose() * P.P * dyn.L;
  const Eigen::MatrixXd slack = sym_part(
      cost.gamma * cost.gamma * Eigen::MatrixXd::Identity(dm.m3, dm.m3) - ltpl);
  if (min_eigenvalue_sym(slack) <= 0.0) {
    throw GammaTooSmall(
        "riccati_step: gamma^2 I - L'PL has a non-positive eigenvalue; "
        "the game has no value at this attenuation level");
  }

  Eigen::MatrixXd block(dm.m2 + dm.m3, dm.m2 + dm.m3);
  block.topLeftCorner(dm.m2, dm.m2) = cost.Rv + dyn.B.transpose() * P.P * dyn.B;
  block.topRightCorner(dm.m2, dm.m3) = dyn.B.transpose() * P.P * dyn.L;
  block.bottomLeftCorner(dm.m3, dm.m2) = dyn.L.transpose() * P.P * dyn.B;
  block.bottomRightCorner(dm.m3, dm.m3) = -slack;
  block = sym_part(block);

  const SymEig block_eig{block};
  if (block_eig.cond() > cond_max) {
    throw SingularBlock("riccati_step: saddle block condition number exceeds threshold");
  }

  Eigen::MatrixXd cross(dm.m1, dm.m2 + dm.m3);
  cross.leftCols(dm.m2) = dyn.A.transpose() * P.P * dyn.B;
  cross.rightCols(dm.m3) = dyn.A.transpose() * P.P * dyn.L;

  Eigen::MatrixXd next = cost.Rx + dyn.A.transpose() * P.P * dyn.A -
                         cross * block_eig.solve(cross.transpose());
  return ValueKernel(sym_part(next));
}

RiccatiSolution solve_riccati(const SystemDynamics& dyn, const CostSpec& cost,
                              double tol, Eigen::Index max_iter, double cond_max) {
  if (!(tol > 0.0)) throw DimensionError("solve_riccati: tol must be positive");
  const Dims dm = dyn.dims();

  ValueKernel P = ValueKernel::zero(dm.m1);
  std::vector<double> deltas;
  for (Eigen::Index sweep = 1; sweep <= max_iter; ++sweep) {
    ValueKernel P_next = riccati_step(dyn, cost, P, cond_max);
    const double delta = spectral_norm_sym(P_next.P - P.P);
    deltas.push_back(delta);
    P = std::move(P_next);
    if (delta <= tol) {
      QKernel S_star = bellman_S_update(dyn, cost, P);
      PolicyPair policies = gains_from_S(S_star, cond_max);
      const double residual = spectral_norm_sym(riccati_step(dyn, cost, P, cond_max).P - P.P);
      return RiccatiSolution{std::move(P), std::move(S_star), std::move(policies),
                             sweep - 1, residual, std::move(deltas)};
    }
  }
  throw MaxIterExceeded("solve_riccati: no fixed point within " +
                        std::to_string(max_iter) + " sweeps (last delta " +
                        std::to_string(deltas.empty() ? 0.0 : deltas.back()) + ")");
}

}  // namespace hinfq
