#include "hinfq/qlearn.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include "hinfq/rng.hpp"

namespace hinfq {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Eigen::VectorXd stack3(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                       const Eigen::VectorXd& c) {
  Eigen::VectorXd z(a.size() + b.size() + c.size());
  z << a, b, c;
  return z;
}

// Symmetric square root of a PSD covariance, for probe sampling.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& w, const char* name) {
  if (w.size() == 0) return w;
  if (w.rows() != w.cols()) throw DimensionError(std::string(name) + ": covariance not square");
  if (max_asymmetry(w) > kDefaultSymTol) {
    throw DimensionError(std::string(name) + ": covariance asymmetric");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym_part(w));
  if (es.eigenvalues().minCoeff() < -kDefaultSymTol) {
    throw DimensionError(std::string(name) + ": covariance not positive semidefinite");
  }
  Eigen::VectorXd roots = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * roots.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

PolicyPair improve_policies(const Eigen::VectorXd& s, const Dims& dims, double cond_max) {
  if (s.size() != dims.critic_params()) {
    throw DimensionError("improve_policies: estimate length does not match dims");
  }
  return gains_from_S(QKernel(unvecs(s, dims.nz()), dims), cond_max);
}

SimEnv::SimEnv(SystemDynamics dyn, Eigen::VectorXd x0)
    : dyn_(std::move(dyn)), x_(std::move(x0)) {
  if (x_.size() != dyn_.dims().m1) throw DimensionError("SimEnv: x0 length != state dim");
}

SimEnv::SimEnv(SystemDynamics dyn, Eigen::VectorXd x0, DisturbanceFn exogenous)
    : SimEnv(std::move(dyn), std::move(x0)) {
  exogenous_ = std::move(exogenous);
}

void SimEnv::reset(Eigen::VectorXd x0) {
  if (x0.size() != dyn_.dims().m1) throw DimensionError("SimEnv::reset: x0 length != state dim");
  x_ = std::move(x0);
}

Transition SimEnv::step(const Eigen::VectorXd& v, const Eigen::VectorXd& d_request) {
  const Dims dm = dyn_.dims();
  Eigen::VectorXd d = exogenous_ ? exogenous_(steps_) : d_request;
  if (d.size() != dm.m3) throw DimensionError("SimEnv::step: disturbance length != m3");
  Eigen::VectorXd x_next = hinfq::step(dyn_, x_, v, d);
  if (!x_next.allFinite() || x_next.cwiseAbs().maxCoeff() > kDivergenceLimit) {
    throw DivergenceError("SimEnv: state diverged at step " + std::to_string(steps_), steps_);
  }
  Transition tr{x_, v, std::move(d), x_next};
  x_ = std::move(x_next);
  if (state_norm_cap_ > 0.0) {
    const double norm = x_.cwiseAbs().maxCoeff();
    if (norm > state_norm_cap_) x_ /= norm;
  }
  ++steps_;
  return tr;
}

InitBatch collect_init(Environment& env, const PolicyPair& policies0,
                       const Eigen::MatrixXd& noise_cov_v,
                       const Eigen::MatrixXd& noise_cov_d, Eigen::Index q,
                       std::uint64_t rng_seed) {
  const Dims dm = env.dims();
  if (q < dm.critic_params()) {
    throw DimensionError("collect_init: q must be at least the parameter count " +
                         std::to_string(dm.critic_params()));
  }
  const Eigen::MatrixXd sqrt_v =
      noise_cov_v.size() ? psd_sqrt(noise_cov_v, "collect_init: W_v") : Eigen::MatrixXd();
  const Eigen::MatrixXd sqrt_d =
      noise_cov_d.size() ? psd_sqrt(noise_cov_d, "collect_init: W_d") : Eigen::MatrixXd();
  if (sqrt_v.size() && sqrt_v.rows() != dm.m2) {
    throw DimensionError("collect_init: W_v order != control dim");
  }
  if (sqrt_d.size() && sqrt_d.rows() != dm.m3) {
    throw DimensionError("collect_init: W_d order != disturbance dim");
  }

  Rng rng(rng_seed);
  InitBatch batch;
  batch.dims = dm;
  batch.Psi0.resize(q, dm.critic_params());
  batch.Xplus0.resize(q, dm.value_params());
  batch.transitions.reserve(static_cast<std::size_t>(q));

  const bool selectable = env.disturbance_selectable();
  for (Eigen::Index t = 0; t < q; ++t) {
    const Eigen::VectorXd& x = env.state();
    Eigen::VectorXd v = policies0.Kv * x;
    if (sqrt_v.size()) v += sqrt_v * rng.gauss_vector(dm.m2);
    Eigen::VectorXd d_request = Eigen::VectorXd::Zero(dm.m3);
    if (selectable) {
      d_request = policies0.Kd * x;
      if (sqrt_d.size()) d_request += sqrt_d * rng.gauss_vector(dm.m3);
    }
    Transition tr = env.step(v, d_request);
    batch.Psi0.row(t) = vecv(stack3(tr.x, tr.v, tr.d));
    batch.Xplus0.row(t) = vecv(tr.x_next);
    batch.transitions.push_back(std::move(tr));
  }
  return batch;
}

CriticState init_solve(const InitBatch& batch, const CostSpec& cost,
                       const Eigen::VectorXd& s0, const PolicyPair& policies0,
                       double rank_tol, double cond_max) {
  const Dims dm = batch.dims;
  const Eigen::Index q = batch.Psi0.rows();
  const Eigen::Index qp = dm.critic_params();
  if (batch.Psi0.cols() != qp || batch.Xplus0.cols() != dm.value_params() ||
      batch.Xplus0.rows() != q || static_cast<Eigen::Index>(batch.transitions.size()) != q) {
    throw DimensionError("init_solve: inconsistent batch");
  }
  if (s0.size() != qp) throw DimensionError("init_solve: s0 length != parameter count");

  const Eigen::VectorXd xi = vecs(g_matrix(cost, dm).S());

  // Bootstrap targets of the initial rows under the initial policies.
  Eigen::MatrixXd phi0(q, qp);
  for (Eigen::Index t = 0; t < q; ++t) {
    const Eigen::VectorXd& xn = batch.transitions[static_cast<std::size_t>(t)].x_next;
    phi0.row(t) = vecv(stack3(xn, policies0.Kv * xn, policies0.Kd * xn));
  }
  const Eigen::VectorXd gamma0 = batch.Psi0 * xi + phi0 * s0;

  Eigen::BDCSVD<Eigen::MatrixXd> svd(batch.Psi0, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) <= 0.0 || sv(sv.size() - 1) < rank_tol * sv(0)) {
    throw RankDeficient(
        "init_solve: regression matrix is rank deficient (insufficient excitation); "
        "smallest/largest singular value ratio " +
        std::to_string(sv.size() && sv(0) > 0.0 ? sv(sv.size() - 1) / sv(0) : 0.0));
  }

  CriticState st;
  st.dims = dm;
  st.cond_max = cond_max;
  st.xi = xi;
  st.M = svd.matrixV() * sv.cwiseAbs2().cwiseInverse().asDiagonal() * svd.matrixV().transpose();
  st.M = sym_part(st.M);
  st.s = svd.matrixV() * sv.cwiseInverse().asDiagonal() * (svd.matrixU().transpose() * gamma0);
  st.cross_gram = batch.Psi0.transpose() * batch.Xplus0;
  st.policies = improve_policies(st.s, dm, cond_max);
  st.iteration = 1;
  return st;
}

CriticState rls_update(CriticState st, const Transition& obs) {
  const Dims& dm = st.dims;
  if (obs.x.size() != dm.m1 || obs.v.size() != dm.m2 || obs.d.size() != dm.m3 ||
      obs.x_next.size() != dm.m1) {
    throw DimensionError("rls_update: transition dimensions do not match critic");
  }
  const Eigen::VectorXd policy_v = st.policies.Kv * obs.x;
  if ((obs.v - policy_v).cwiseAbs().maxCoeff() > st.act_tol) {
    throw std::invalid_argument(
        "rls_update: control is not the current policy action (off-policy v "
        "breaks the bootstrap target)");
  }

  // Feature row from the policy action and the measured disturbance.
  const Eigen::VectorXd r = vecv(stack3(obs.x, policy_v, obs.d));
  const Eigen::VectorXd phi_next =
      vecv(stack3(obs.x_next, st.policies.Kv * obs.x_next, st.policies.Kd * obs.x_next));

  const double target = r.dot(st.xi) + phi_next.dot(st.s);
  const double innovation = target - r.dot(st.s);
  if (!std::isfinite(innovation)) {
    throw DivergenceError("rls_update: non-finite innovation at iteration " +
                          std::to_string(st.iteration),
                          static_cast<long>(st.iteration));
  }

  Eigen::VectorXd mr = st.M * r;
  const double denom = st.forgetting + r.dot(mr);
  if (!(denom > 0.0) || !std::isfinite(denom)) {
    throw GramCorrupted("rls_update: rank-one denominator " + std::to_string(denom) +
                        " is not positive; inverse Gram lost definiteness");
  }
  st.M.noalias() -= (mr * mr.transpose()) / denom;
  if (st.forgetting != 1.0) st.M /= st.forgetting;
  st.M = ((st.M + st.M.transpose()) * 0.5).eval();

  if (st.forgetting != 1.0) st.cross_gram *= st.forgetting;
  st.cross_gram.noalias() += r * vecv(obs.x_next).transpose();

  // Refresh the estimate against the value kernel implied by the pre-update
  // state, so the new kernel is its exact one-sweep backup.
  const Eigen::VectorXd p_now = vecs(st.value_kernel().P);
  st.s = st.xi + st.M * (st.cross_gram * p_now);

  st.policies = improve_policies(st.s, dm, st.cond_max);
  ++st.iteration;
  return st;
}

LearnResult learn_online(Environment& env, const CostSpec& cost, const LearnConfig& config) {
  const Dims dm = env.dims();
  const Eigen::Index qp = dm.critic_params();
  const Eigen::Index q = config.q > 0 ? config.q : qp;
  const Eigen::Index max_iter = config.max_iter > 0 ? config.max_iter : 10 * qp;
  if (!(config.epsilon > 0.0)) throw DimensionError("learn_online: epsilon must be positive");

  const PolicyPair policies0 =
      config.initial_policies ? *config.initial_policies : PolicyPair::zero(dm);
  const Eigen::VectorXd s0 =
      config.s0.size() ? config.s0 : Eigen::VectorXd(Eigen::VectorXd::Zero(qp));

  LearnResult result;
  const double nan = std::numeric_limits<double>::quiet_NaN();

  auto p_err = [&](const CriticState& st) {
    if (!config.reference_P) return nan;
    return (st.value_kernel().P - *config.reference_P).norm();
  };

  CriticState st;
  try {
    const auto t0 = Clock::now();
    InitBatch batch = collect_init(env, policies0, config.noise_cov_v, config.noise_cov_d,
                                   q, config.seed);
    st = init_solve(batch, cost, s0, policies0, config.rank_tol, config.cond_max);
    st.forgetting = config.forgetting;
    st.act_tol = config.act_tol;
    const double init_seconds = seconds_since(t0);
    result.env_steps = q;

    const double init_delta = spectral_norm_sym(unvecs(st.s - s0, dm.nz()));
    result.trace.rows.push_back(TraceRow{st.iteration, init_delta, st.policies.Kv.norm(),
                                         st.policies.Kd.norm(), p_err(st), init_seconds});
  } catch (const NumericError& e) {
    result.error = e.what();
    result.numeric_failure = true;
    return result;
  }

  const bool fixed = config.fixed_iterations > 0;
  const Eigen::Index loop_budget = fixed ? config.fixed_iterations : max_iter;
  const bool selectable = env.disturbance_selectable();

  try {
    for (Eigen::Index k = 0; k < loop_budget; ++k) {
      const Eigen::VectorXd x = env.state();
      Eigen::VectorXd v = st.policies.Kv * x;
      Eigen::VectorXd d_request =
          selectable ? Eigen::VectorXd(st.policies.Kd * x) : Eigen::VectorXd::Zero(dm.m3);
      Transition tr = env.step(v, d_request);

      const Eigen::VectorXd s_prev = st.s;
      const auto t0 = Clock::now();
      st = rls_update(std::move(st), tr);
      const double update_seconds = seconds_since(t0);
      ++result.env_steps;

      const double s_delta = spectral_norm_sym(unvecs(st.s - s_prev, dm.nz()));
      result.trace.rows.push_back(TraceRow{st.iteration, s_delta, st.policies.Kv.norm(),
                                           st.policies.Kd.norm(), p_err(st), update_seconds});
      if (!fixed && s_delta <= config.epsilon) {
        result.converged = true;
        break;
      }
    }
  } catch (const NumericError& e) {
    result.error = e.what();
    result.numeric_failure = true;
    result.critic = std::move(st);
    return result;
  }

  if (fixed) {
    result.converged = !result.trace.rows.empty() &&
                       result.trace.rows.back().s_delta_norm <= config.epsilon;
  } else if (!result.converged) {
    result.error = "learn_online: kernel change still above epsilon after " +
                   std::to_string(max_iter) + " updates";
    result.numeric_failure = true;
  }
  result.critic = std::move(st);
  return result;
}

namespace {

// Deterministic plant used by the update benchmark; gamma is generous so the
// saddle stays well posed at every size.
struct BenchSetup {
  SystemDynamics dyn;
  CostSpec cost;
};

BenchSetup make_bench_setup(const Dims& dm, Rng& rng) {
  // Strongly mixing rotation keeps the low-dimensional input excitation
  // spread across the whole state space, so the quadratic regression stays
  // full rank through long timing loops.
  Eigen::MatrixXd seed(dm.m1, dm.m1);
  for (Eigen::Index i = 0; i < seed.size(); ++i) seed(i) = rng.gauss();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(seed);
  Eigen::MatrixXd a = 0.95 * Eigen::MatrixXd(qr.householderQ());
  Eigen::MatrixXd b(dm.m1, dm.m2);
  for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = 0.5 * rng.gauss();
  Eigen::MatrixXd l(dm.m1, dm.m3);
  for (Eigen::Index i = 0; i < l.size(); ++i) l(i) = 0.5 * rng.gauss();
  SystemDynamics dyn(std::move(a), std::move(b), std::move(l));
  CostSpec cost(Eigen::MatrixXd::Identity(dm.m1, dm.m1),
                Eigen::MatrixXd::Identity(dm.m2, dm.m2), /*gamma=*/30.0);
  return BenchSetup{std::move(dyn), std::move(cost)};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<BenchRow> bench_update_cost(const std::vector<Dims>& dims_list, int repetitions) {
  if (dims_list.empty()) throw DimensionError("bench_update_cost: empty dims list");
  for (std::size_t i = 1; i < dims_list.size(); ++i) {
    if (dims_list[i].critic_params() <= dims_list[i - 1].critic_params()) {
      throw DimensionError("bench_update_cost: dims must yield strictly increasing sizes");
    }
  }
  const int reps = std::max(repetitions, 1);
  std::vector<BenchRow> rows;
  rows.reserve(dims_list.size());

  for (const Dims& dm : dims_list) {
    Rng rng(0x9e3779b97f4a7c15ULL ^ static_cast<std::uint64_t>(dm.critic_params()));
    BenchSetup setup = make_bench_setup(dm, rng);
    const Eigen::Index qp = dm.critic_params();

    SimEnv env(setup.dyn, rng.gauss_vector(dm.m1));
    env.set_state_norm_cap(50.0);
    InitBatch batch = collect_init(env, PolicyPair::zero(dm),
                                   Eigen::MatrixXd::Identity(dm.m2, dm.m2),
                                   Eigen::MatrixXd::Identity(dm.m3, dm.m3), qp,
                                   /*rng_seed=*/11);
    CriticState st = init_solve(batch, setup.cost, Eigen::VectorXd::Zero(qp),
                                PolicyPair::zero(dm));

    // The disturbance channel stays excited (it may act off-policy), which
    // keeps the growing Gram well conditioned through long timing loops.
    auto next_transition = [&]() {
      const Eigen::VectorXd x = env.state();
      return env.step(st.policies.Kv * x, st.policies.Kd * x + rng.gauss_vector(dm.m3));
    };

    // Warm up and estimate the per-update time to size the inner loop.
    for (int i = 0; i < 10; ++i) st = rls_update(std::move(st), next_transition());
    auto t_probe = Clock::now();
    for (int i = 0; i < 3; ++i) st = rls_update(std::move(st), next_transition());
    const double est = std::max(seconds_since(t_probe) / 3.0, 1e-9);
    const int inner = std::clamp(static_cast<int>(50e-6 / est), 1, 2000);

    // Transition generation stays outside the timed windows.
    std::vector<double> rls_samples;
    rls_samples.reserve(static_cast<std::size_t>(reps));
    for (int m = 0; m < reps; ++m) {
      double elapsed = 0.0;
      for (int i = 0; i < inner; ++i) {
        Transition tr = next_transition();
        const auto u0 = Clock::now();
        st = rls_update(std::move(st), tr);
        elapsed += seconds_since(u0);
      }
      rls_samples.push_back(elapsed / inner);
    }

    // Batch side: a from-scratch normal-equation solve over q rows, the
    // per-iteration cost of re-estimating without the recursive state.
    const Eigen::MatrixXd& psi = batch.Psi0;
    const Eigen::MatrixXd& xplus = batch.Xplus0;
    const Eigen::VectorXd p_now = vecs(st.value_kernel().P);
    double sink = 0.0;
    auto batch_solve = [&]() {
      Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(qp, qp);
      gram.selfadjointView<Eigen::Lower>().rankUpdate(psi.transpose());
      Eigen::VectorXd target = psi * st.xi + xplus * p_now;
      Eigen::VectorXd rhs = psi.transpose() * target;
      Eigen::LLT<Eigen::MatrixXd> llt(gram.selfadjointView<Eigen::Lower>());
      Eigen::VectorXd sol = llt.solve(rhs);
      sink += sol(0);
    };
    batch_solve();  // warm
    auto t_bprobe = Clock::now();
    batch_solve();
    const double best = std::max(seconds_since(t_bprobe), 1e-9);
    const int binner = std::clamp(static_cast<int>(50e-6 / best), 1, 2000);
    std::vector<double> batch_samples;
    batch_samples.reserve(static_cast<std::size_t>(reps));
    for (int m = 0; m < reps; ++m) {
      const auto t0 = Clock::now();
      for (int i = 0; i < binner; ++i) batch_solve();
      batch_samples.push_back(seconds_since(t0) / binner);
    }
    if (!std::isfinite(sink)) throw NumericError("bench_update_cost: batch solve produced NaN");

    rows.push_back(BenchRow{qp, median(std::move(rls_samples)), median(std::move(batch_samples))});
  }
  return rows;
}

namespace {

SlopeFit fit_one(const std::vector<double>& lx, const std::vector<double>& ly) {
  const double n = static_cast<double>(lx.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sx += lx[i];
    sy += ly[i];
    sxx += lx[i] * lx[i];
    sxy += lx[i] * ly[i];
  }
  const double denom = n * sxx - sx * sx;
  const double slope = (n * sxy - sx * sy) / denom;
  const double intercept = (sy - slope * sx) / n;
  double sse = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    const double e = ly[i] - (intercept + slope * lx[i]);
    sse += e * e;
  }
  SlopeFit fit;
  fit.slope = slope;
  if (lx.size() > 2) {
    const double se = std::sqrt(sse / (n - 2.0) * n / denom);
    // two-sided 97.5% t quantiles for 1..8 residual degrees of freedom
    static constexpr double kT[] = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306};
    const std::size_t df = lx.size() - 2;
    const double t = kT[std::min<std::size_t>(df, 8) - 1];
    fit.ci_low = slope - t * se;
    fit.ci_high = slope + t * se;
  } else {
    fit.ci_low = fit.ci_high = slope;
  }
  return fit;
}

}  // namespace

BenchFit fit_loglog(const std::vector<BenchRow>& rows) {
  if (rows.size() < 2) throw DimensionError("fit_loglog: need at least two sizes");
  std::vector<double> lx, lr, lb;
  for (const BenchRow& row : rows) {
    lx.push_back(std::log(static_cast<double>(row.q_params)));
    lr.push_back(std::log(row.rls_seconds));
    lb.push_back(std::log(row.batch_seconds));
  }
  return BenchFit{fit_one(lx, lr), fit_one(lx, lb)};
}

}  // namespace hinfq
