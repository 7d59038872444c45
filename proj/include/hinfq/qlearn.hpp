#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hinfq/riccati.hpp"
#include "hinfq/sym_basis.hpp"
#include "hinfq/system.hpp"

namespace hinfq {

// Default on-policy tolerance for controls fed to rls_update.
inline constexpr double kDefaultActTol = 1e-9;

// Default relative singular-value cutoff for the init regression rank check.
inline constexpr double kDefaultRankTol = 1e-10;

PolicyPair improve_policies(const Eigen::VectorXd& s, const Dims& dims,
                            double cond_max = kDefaultCondMax);

// Running state of the recursive least-squares critic.
//
// Besides the kernel estimate s and the inverse Gram M, the state carries the
// cross Gram Psi' X+ between regression features and next-state features.
// That lets every accumulated target row be re-expressed against the current
// value kernel at each update (s <- xi + M * (Psi'X+) * p), still at
// O(q^2) per sample, so each estimate is the exact one-sweep backup of the
// current value kernel rather than a blend of stale targets.
struct CriticState {
  Eigen::VectorXd s;           // vecs of the kernel estimate, length critic_params
  Eigen::MatrixXd M;           // inverse Gram (Psi' Psi)^-1, symmetric PD
  Eigen::MatrixXd cross_gram;  // Psi' X+, critic_params x value_params
  Eigen::VectorXd xi;          // vecs of the stage-cost kernel
  PolicyPair policies;
  Eigen::Index iteration = 0;
  Dims dims;
  double forgetting = 1.0;     // experimental; 1.0 reproduces plain recursive LS
  double act_tol = kDefaultActTol;
  double cond_max = kDefaultCondMax;

  QKernel kernel() const { return QKernel(unvecs(s, dims.nz()), dims); }

  // P implied by the current kernel and policies.
  ValueKernel value_kernel() const { return p_from_S(kernel(), policies); }
};

// Regression data of the excited initial batch.
struct InitBatch {
  Eigen::MatrixXd Psi0;    // q x critic_params, rows vecv(z_t)
  Eigen::MatrixXd Xplus0;  // q x value_params, rows vecv(x_{t+1})
  std::vector<Transition> transitions;
  Dims dims;
};

struct TraceRow {
  Eigen::Index iteration = 0;
  double s_delta_norm = 0.0;
  double kv_norm = 0.0;
  double kd_norm = 0.0;
  double p_err_norm = 0.0;  // NaN when no reference kernel was supplied
  double update_seconds = 0.0;
};

struct LearningTrace {
  std::vector<TraceRow> rows;
};

// Plant interface seen by the learner. `step` applies the control; the
// requested disturbance is honored only when the channel is selectable,
// otherwise the environment draws its own. The realized (x, v, d, x_next)
// is always reported back.
class Environment {
 public:
  virtual ~Environment() = default;
  virtual Dims dims() const = 0;
  virtual const Eigen::VectorXd& state() const = 0;
  virtual bool disturbance_selectable() const = 0;
  virtual Transition step(const Eigen::VectorXd& v, const Eigen::VectorXd& d_request) = 0;
};

// Simulated linear plant. When a transient policy is unstable the state is
// rescaled to unit sup-norm once it passes `state_norm_cap`; each emitted
// transition is still exactly consistent with the dynamics, the environment
// merely restarts from a scaled state so regressors stay well conditioned.
class SimEnv : public Environment {
 public:
  SimEnv(SystemDynamics dyn, Eigen::VectorXd x0);
  SimEnv(SystemDynamics dyn, Eigen::VectorXd x0, DisturbanceFn exogenous);

  Dims dims() const override { return dyn_.dims(); }
  const Eigen::VectorXd& state() const override { return x_; }
  bool disturbance_selectable() const override { return !exogenous_; }
  Transition step(const Eigen::VectorXd& v, const Eigen::VectorXd& d_request) override;

  void reset(Eigen::VectorXd x0);
  // 0 disables rescaling; the hard divergence guard still applies.
  void set_state_norm_cap(double cap) { state_norm_cap_ = cap; }
  long steps_taken() const { return steps_; }

 private:
  SystemDynamics dyn_;
  Eigen::VectorXd x_;
  DisturbanceFn exogenous_;
  long steps_ = 0;
  double state_norm_cap_ = 1e6;
};

// Runs q excited steps under the initial policies and records the regression
// rows. Probing noise is drawn from N(0, W_v) on the control and, when the
// disturbance channel is selectable, from N(0, W_d) on the disturbance.
InitBatch collect_init(Environment& env, const PolicyPair& policies0,
                       const Eigen::MatrixXd& noise_cov_v,
                       const Eigen::MatrixXd& noise_cov_d, Eigen::Index q,
                       std::uint64_t rng_seed);

// Solves the initial batch least squares and returns the critic at iteration
// 1 with improved policies.
CriticState init_solve(const InitBatch& batch, const CostSpec& cost,
                       const Eigen::VectorXd& s0, const PolicyPair& policies0,
                       double rank_tol = kDefaultRankTol,
                       double cond_max = kDefaultCondMax);

// Single-sample critic update: rank-one inverse-Gram and cross-Gram updates,
// kernel refresh against the current value kernel, then policy improvement.
// The incoming control must match the current policy within act_tol; the
// measured disturbance is used as-is (the learner is off-policy in d).
CriticState rls_update(CriticState st, const Transition& obs);

struct LearnConfig {
  std::optional<PolicyPair> initial_policies;  // default: zero gains
  Eigen::MatrixXd noise_cov_v;  // empty: no probing on v
  Eigen::MatrixXd noise_cov_d;  // empty: no probing on d
  Eigen::Index q = 0;           // init batch size; 0 -> critic_params (minimal)
  double epsilon = 1e-6;
  Eigen::Index max_iter = 0;    // 0 -> 10 * critic_params
  std::uint64_t seed = 0;
  double forgetting = 1.0;
  std::optional<Eigen::MatrixXd> reference_P;  // fills the p_err trace column
  Eigen::Index fixed_iterations = 0;  // > 0: run exactly this many updates
  Eigen::VectorXd s0;           // empty: zero kernel
  double cond_max = kDefaultCondMax;
  double rank_tol = kDefaultRankTol;
  double act_tol = kDefaultActTol;
};

struct LearnResult {
  std::optional<CriticState> critic;  // absent only when init itself failed
  LearningTrace trace;
  bool converged = false;
  std::string error;           // empty on success
  bool numeric_failure = false;
  Eigen::Index env_steps = 0;  // init samples + loop updates
};

// Full online run: excited init batch, init solve, then one environment step
// and one critic update per iteration until the kernel moves by at most
// epsilon in spectral norm (or for exactly fixed_iterations updates).
// Numerical failures are reported in the result together with the partial
// trace instead of being thrown.
LearnResult learn_online(Environment& env, const CostSpec& cost, const LearnConfig& config);

struct BenchRow {
  Eigen::Index q_params = 0;
  double rls_seconds = 0.0;
  double batch_seconds = 0.0;
};

struct SlopeFit {
  double slope = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

struct BenchFit {
  SlopeFit rls;
  SlopeFit batch;
};

// Times the warm single-sample update against a from-scratch normal-equation
// solve at each size. Per size: 10 discarded warm-up updates, then the median
// of `repetitions` timed measurements on a monotonic clock (small sizes are
// timed in inner loops long enough for clock resolution).
std::vector<BenchRow> bench_update_cost(const std::vector<Dims>& dims_list,
                                        int repetitions = 100);

// Log-log regression of seconds against parameter count, with 95% intervals.
BenchFit fit_loglog(const std::vector<BenchRow>& rows);

}  // namespace hinfq
