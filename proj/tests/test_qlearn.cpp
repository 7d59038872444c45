#include <doctest.h>

#include "hinfq/qlearn.hpp"
#include "test_util.hpp"

using namespace hinfq;

namespace {

Eigen::VectorXd stack3(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                       const Eigen::VectorXd& c) {
  Eigen::VectorXd z(a.size() + b.size() + c.size());
  z << a, b, c;
  return z;
}

// Independent dense least-squares path: keeps the full regression matrix and
// re-solves the normal equations from scratch at every step, with its own
// estimate/policy sequence. Used to pin the recursive bookkeeping.
struct DenseLsOracle {
  Dims dims;
  Eigen::MatrixXd psi;
  Eigen::MatrixXd xplus;
  Eigen::VectorXd xi;
  Eigen::VectorXd s;
  PolicyPair policies = PolicyPair{{}, {}};

  void init(const InitBatch& batch, const CostSpec& cost, const Eigen::VectorXd& s0,
            const PolicyPair& p0) {
    dims = batch.dims;
    psi = batch.Psi0;
    xplus = batch.Xplus0;
    xi = vecs(g_matrix(cost, dims).S());
    Eigen::MatrixXd phi0(psi.rows(), dims.critic_params());
    for (Eigen::Index t = 0; t < psi.rows(); ++t) {
      const Eigen::VectorXd& xn = batch.transitions[static_cast<std::size_t>(t)].x_next;
      phi0.row(t) = vecv(stack3(xn, p0.Kv * xn, p0.Kd * xn));
    }
    const Eigen::VectorXd gamma0 = psi * xi + phi0 * s0;
    s = psi.colPivHouseholderQr().solve(gamma0);
    policies = improve_policies(s, dims);
  }

  void update(const Transition& tr) {
    const Eigen::VectorXd r = vecv(stack3(tr.x, policies.Kv * tr.x, tr.d));
    psi.conservativeResize(psi.rows() + 1, Eigen::NoChange);
    psi.row(psi.rows() - 1) = r;
    xplus.conservativeResize(xplus.rows() + 1, Eigen::NoChange);
    xplus.row(xplus.rows() - 1) = vecv(tr.x_next);

    const Eigen::VectorXd p_now =
        vecs(p_from_S(QKernel(unvecs(s, dims.nz()), dims), policies).P);
    const Eigen::VectorXd gamma = psi * xi + xplus * p_now;
    s = psi.colPivHouseholderQr().solve(gamma);
    policies = improve_policies(s, dims);
  }

  Eigen::MatrixXd inverse_gram() const { return (psi.transpose() * psi).inverse(); }
};

struct TestRig {
  SystemDynamics dyn;
  CostSpec cost;
  SimEnv env;
  InitBatch batch;
  CriticState critic;
};

TestRig make_rig(Rng& rng, const Dims& dims, std::uint64_t seed, double noise = 0.05) {
  auto instance = testutil::random_solvable_instance(rng, dims);
  SimEnv env(instance.dyn, rng.gauss_vector(dims.m1));
  InitBatch batch = collect_init(env, PolicyPair::zero(dims),
                                 noise * Eigen::MatrixXd::Identity(dims.m2, dims.m2),
                                 noise * Eigen::MatrixXd::Identity(dims.m3, dims.m3),
                                 dims.critic_params(), seed);
  CriticState critic = init_solve(batch, instance.cost,
                                  Eigen::VectorXd::Zero(dims.critic_params()),
                                  PolicyPair::zero(dims));
  return TestRig{std::move(instance.dyn), std::move(instance.cost), std::move(env),
                 std::move(batch), std::move(critic)};
}

Transition on_policy_step(SimEnv& env, const CriticState& st) {
  const Eigen::VectorXd x = env.state();
  return env.step(st.policies.Kv * x, st.policies.Kd * x);
}

}  // namespace

TEST_SUITE("qlearn") {

TEST_CASE("vecs of small matrices") {
  Eigen::MatrixXd m(2, 2);
  m << 1, 2, 2, 3;
  const Eigen::VectorXd v = vecs(m);
  REQUIRE(v.size() == 3);
  CHECK(v[0] == 1.0);
  CHECK(v[1] == 2.0);
  CHECK(v[2] == 3.0);

  const Eigen::VectorXd id = vecs(Eigen::MatrixXd::Identity(3, 3));
  Eigen::VectorXd expect(6);
  expect << 1, 0, 0, 1, 0, 1;
  CHECK(id.isApprox(expect));
}

TEST_CASE("vecs rejects asymmetric input") {
  Eigen::MatrixXd m(2, 2);
  m << 1, 2, 0, 3;
  CHECK_THROWS_AS(vecs(m), DimensionError);
}

TEST_CASE("unvecs inverts vecs") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::MatrixXd m = testutil::random_symmetric(rng, 4);
    CHECK(unvecs(vecs(m), 4).isApprox(m, 1e-14));
  }
  CHECK_THROWS_AS(unvecs(Eigen::VectorXd::Zero(5), 3), DimensionError);
}

TEST_CASE("vecv of small vectors") {
  Eigen::VectorXd z(2);
  z << 1, 2;
  const Eigen::VectorXd q = vecv(z);
  Eigen::VectorXd expect(3);
  expect << 1, 4, 4;
  CHECK(q.isApprox(expect));
  CHECK(vecv(Eigen::VectorXd::Zero(3)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("vecv and vecs are dual") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.uniform() * 4);
    const Eigen::MatrixXd s = testutil::random_symmetric(rng, n);
    const Eigen::VectorXd z = rng.gauss_vector(n);
    const double direct = z.dot(s * z);
    const double via_basis = vecv(z).dot(vecs(s));
    CHECK(via_basis == doctest::Approx(direct).epsilon(1e-12));
  }
}

TEST_CASE("parameter counts follow the triangular formula") {
  CHECK(Dims{2, 1, 1}.critic_params() == 10);
  CHECK(Dims{4, 2, 1}.critic_params() == 28);
  CHECK(Dims{4, 2, 2}.critic_params() == 36);
  CHECK(sym_dim(10) == 4);
  CHECK_THROWS_AS(sym_dim(11), DimensionError);
}

TEST_CASE("collect_init produces a full-rank regression with probing noise") {
  Rng rng(7);
  const Dims dims{2, 1, 1};
  TestRig rig = make_rig(rng, dims, 123);
  CHECK(rig.batch.Psi0.rows() == 10);
  CHECK(rig.batch.Psi0.cols() == 10);
  Eigen::BDCSVD<Eigen::MatrixXd> svd(rig.batch.Psi0);
  const auto& sv = svd.singularValues();
  CHECK(sv(sv.size() - 1) > 1e-10 * sv(0));
}

TEST_CASE("init without excitation is flagged as rank deficient") {
  const Dims dims{2, 1, 1};
  SystemDynamics dyn(0.5 * Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Ones(2, 1),
                     Eigen::MatrixXd::Ones(2, 1));
  CostSpec cost(Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(1, 1), 2.0);
  SimEnv env(dyn, Eigen::VectorXd::Zero(2));
  InitBatch batch = collect_init(env, PolicyPair::zero(dims), Eigen::MatrixXd(),
                                 Eigen::MatrixXd(), dims.critic_params(), 1);
  CHECK(batch.Psi0.cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(init_solve(batch, cost, Eigen::VectorXd::Zero(10), PolicyPair::zero(dims)),
                  RankDeficient);
}

TEST_CASE("init from a zero kernel lands on the stage-cost kernel") {
  Rng rng(11);
  const Dims dims{2, 1, 1};
  TestRig rig = make_rig(rng, dims, 321);
  const Eigen::VectorXd xi = vecs(g_matrix(rig.cost, dims).S());
  CHECK((rig.critic.s - xi).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(rig.critic.iteration == 1);
}

TEST_CASE("init matches an independent dense normal-equations solve") {
  Rng rng(13);
  const Dims dims{2, 1, 1};
  auto instance = testutil::random_solvable_instance(rng, dims);
  SimEnv env(instance.dyn, rng.gauss_vector(dims.m1));
  InitBatch batch = collect_init(env, PolicyPair::zero(dims),
                                 0.05 * Eigen::MatrixXd::Identity(1, 1),
                                 0.05 * Eigen::MatrixXd::Identity(1, 1), 10, 99);
  // A nonzero starting kernel exercises the bootstrap-target assembly too.
  const Eigen::VectorXd s0 = vecs(sym_part(unvecs(0.1 * rng.gauss_vector(10), 4)));
  CriticState st = init_solve(batch, instance.cost, s0, PolicyPair::zero(dims));

  DenseLsOracle oracle;
  oracle.init(batch, instance.cost, s0, PolicyPair::zero(dims));
  CHECK((st.s - oracle.s).cwiseAbs().maxCoeff() < 1e-9);

  // Square full-rank system: the residual vanishes.
  Eigen::MatrixXd phi0(10, 10);
  for (Eigen::Index t = 0; t < 10; ++t) {
    const Eigen::VectorXd& xn = batch.transitions[static_cast<std::size_t>(t)].x_next;
    phi0.row(t) = vecv(stack3(xn, Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1)));
  }
  const Eigen::VectorXd gamma0 = batch.Psi0 * oracle.xi + phi0 * s0;
  CHECK((batch.Psi0 * st.s - gamma0).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("inverse Gram matches direct inversion after updates") {
  Rng rng(17);
  const Dims dims{2, 1, 1};
  TestRig rig = make_rig(rng, dims, 777);
  Eigen::MatrixXd gram = rig.batch.Psi0.transpose() * rig.batch.Psi0;
  for (int k = 0; k < 5; ++k) {
    const Transition tr = on_policy_step(rig.env, rig.critic);
    const Eigen::VectorXd r = vecv(stack3(tr.x, rig.critic.policies.Kv * tr.x, tr.d));
    gram += r * r.transpose();
    rig.critic = rls_update(std::move(rig.critic), tr);
    CHECK((rig.critic.M * gram - Eigen::MatrixXd::Identity(10, 10)).cwiseAbs().maxCoeff() < 1e-7);
  }
}

TEST_CASE("update at the fixed point leaves the kernel alone but shrinks the Gram") {
  Rng rng(19);
  const Dims dims{2, 1, 1};
  auto instance = testutil::random_solvable_instance(rng, dims);
  const RiccatiSolution sol = solve_riccati(instance.dyn, instance.cost);

  SimEnv env(instance.dyn, rng.gauss_vector(2));
  InitBatch batch = collect_init(env, PolicyPair::zero(dims),
                                 0.05 * Eigen::MatrixXd::Identity(1, 1),
                                 0.05 * Eigen::MatrixXd::Identity(1, 1), 10, 5);
  CriticState st = init_solve(batch, instance.cost, Eigen::VectorXd::Zero(10),
                              PolicyPair::zero(dims));
  // Pin the critic at the solved fixed point.
  st.s = vecs(sol.S_star.S());
  st.policies = sol.policies;

  const Eigen::MatrixXd m_before = st.M;
  const Eigen::VectorXd s_before = st.s;
  const Transition tr = on_policy_step(env, st);
  const Eigen::VectorXd r = vecv(stack3(tr.x, st.policies.Kv * tr.x, tr.d));
  const double innovation =
      (r.dot(st.xi) +
       vecv(stack3(tr.x_next, st.policies.Kv * tr.x_next, st.policies.Kd * tr.x_next))
           .dot(st.s)) -
      r.dot(st.s);
  CHECK(std::abs(innovation) < 1e-9);

  st = rls_update(std::move(st), tr);
  CHECK((st.s - s_before).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((st.M - m_before).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("recursive estimate equals the dense batch solution") {
  Rng rng(23);
  for (int sequence = 0; sequence < 20; ++sequence) {
    const Dims dims = sequence % 2 ? Dims{2, 1, 1} : Dims{3, 2, 1};
    auto instance = testutil::random_solvable_instance(rng, dims);
    SimEnv env(instance.dyn, rng.gauss_vector(dims.m1).normalized());
    env.set_state_norm_cap(5.0);
    InitBatch batch = collect_init(env, PolicyPair::zero(dims),
                                   0.5 * Eigen::MatrixXd::Identity(dims.m2, dims.m2),
                                   0.5 * Eigen::MatrixXd::Identity(dims.m3, dims.m3),
                                   dims.critic_params(), 1000 + sequence);
    CriticState st = init_solve(batch, instance.cost,
                                Eigen::VectorXd::Zero(dims.critic_params()),
                                PolicyPair::zero(dims));
    DenseLsOracle oracle;
    oracle.init(batch, instance.cost, Eigen::VectorXd::Zero(dims.critic_params()),
                PolicyPair::zero(dims));

    const int steps = 3 + static_cast<int>(rng.uniform() * 20);
    for (int k = 0; k < steps; ++k) {
      // The disturbance channel may act off-policy; feeding it noise keeps
      // the growing regression well conditioned.
      const Eigen::VectorXd x = env.state();
      const Transition tr = env.step(st.policies.Kv * x,
                                     st.policies.Kd * x + 0.5 * rng.gauss_vector(dims.m3));
      st = rls_update(std::move(st), tr);
      oracle.update(tr);
      CHECK((st.s - oracle.s).cwiseAbs().maxCoeff() <
            1e-8 * (1.0 + oracle.s.cwiseAbs().maxCoeff()));
      const Eigen::MatrixXd m_oracle = oracle.inverse_gram();
      CHECK((st.M - m_oracle).cwiseAbs().maxCoeff() <
            1e-8 * (1.0 + m_oracle.cwiseAbs().maxCoeff()));
    }
  }
}

TEST_CASE("improve_policies delegates to the kernel gain formulas") {
  Rng rng(29);
  SystemDynamics dyn = testutil::random_stable_dynamics(rng, Dims{2, 2, 1});
  CostSpec cost(Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(2, 2), 3.0);
  const QKernel s = bellman_S_update(dyn, cost, ValueKernel(testutil::random_spd(rng, 2, 0.3)));
  const PolicyPair direct = gains_from_S(s);
  const PolicyPair via_vec = improve_policies(vecs(s.S()), s.dims());
  CHECK(direct.Kv.isApprox(via_vec.Kv, 1e-13));
  CHECK(direct.Kd.isApprox(via_vec.Kd, 1e-13));
}

TEST_CASE("off-policy controls are rejected") {
  Rng rng(31);
  TestRig rig = make_rig(rng, Dims{2, 1, 1}, 55);
  const Eigen::VectorXd x = rig.env.state();
  Transition tr = rig.env.step(rig.critic.policies.Kv * x + Eigen::VectorXd::Constant(1, 0.5),
                               rig.critic.policies.Kd * x);
  CHECK_THROWS_AS(rig.critic = rls_update(std::move(rig.critic), tr), std::invalid_argument);
}

TEST_CASE("a corrupted inverse Gram is detected") {
  Rng rng(37);
  TestRig rig = make_rig(rng, Dims{2, 1, 1}, 66);
  rig.critic.M = -1e8 * Eigen::MatrixXd::Identity(10, 10);
  const Transition tr = on_policy_step(rig.env, rig.critic);
  CHECK_THROWS_AS(rig.critic = rls_update(std::move(rig.critic), tr), GramCorrupted);
}

TEST_CASE("learned kernel is the exact one-sweep backup at every iteration") {
  Rng rng(41);
  const Dims dims{2, 1, 1};
  TestRig rig = make_rig(rng, dims, 404);
  for (int k = 0; k < 20; ++k) {
    const Eigen::MatrixXd p_before = rig.critic.value_kernel().P;
    const Eigen::MatrixXd expected =
        bellman_S_update(rig.dyn, rig.cost, ValueKernel(p_before)).S();
    const Transition tr = on_policy_step(rig.env, rig.critic);
    rig.critic = rls_update(std::move(rig.critic), tr);
    const Eigen::MatrixXd learned = unvecs(rig.critic.s, dims.nz());
    CHECK((learned - expected).cwiseAbs().maxCoeff() < 1e-7);
  }
}

TEST_CASE("a zero-state plant converges within two post-init updates") {
  Rng rng(43);
  const Dims dims{2, 1, 1};
  SystemDynamics dyn(Eigen::MatrixXd::Zero(2, 2), testutil::random_matrix(rng, 2, 1),
                     0.5 * testutil::random_matrix(rng, 2, 1));
  CostSpec cost(testutil::random_spd(rng, 2, 0.5), Eigen::MatrixXd::Identity(1, 1), 10.0);
  SimEnv env(dyn, rng.gauss_vector(2));
  LearnConfig lc;
  lc.noise_cov_v = 0.05 * Eigen::MatrixXd::Identity(1, 1);
  lc.noise_cov_d = 0.05 * Eigen::MatrixXd::Identity(1, 1);
  lc.seed = 17;
  lc.epsilon = 1e-7;
  const LearnResult result = learn_online(env, cost, lc);
  REQUIRE(result.converged);
  CHECK(result.env_steps - 10 <= 2);

  const RiccatiSolution sol = solve_riccati(dyn, cost);
  CHECK((unvecs(result.critic->s, dims.nz()) - sol.S_star.S()).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("online run reproduces the model-based fixed point") {
  Rng rng(47);
  const Dims dims{2, 1, 1};
  auto instance = testutil::random_solvable_instance(rng, dims);
  const RiccatiSolution sol = solve_riccati(instance.dyn, instance.cost);

  SimEnv env(instance.dyn, rng.gauss_vector(2));
  LearnConfig lc;
  lc.noise_cov_v = 0.01 * Eigen::MatrixXd::Identity(1, 1);
  lc.noise_cov_d = 0.01 * Eigen::MatrixXd::Identity(1, 1);
  lc.seed = 2024;
  lc.epsilon = 1e-9;
  lc.max_iter = 2000;
  lc.reference_P = sol.P_star.P;
  const LearnResult result = learn_online(env, instance.cost, lc);
  REQUIRE(result.converged);

  const Eigen::MatrixXd learned = unvecs(result.critic->s, dims.nz());
  CHECK((learned - sol.S_star.S()).norm() / sol.S_star.S().norm() <= 1e-6);
  CHECK((result.critic->policies.Kv - sol.policies.Kv).cwiseAbs().maxCoeff() < 1e-5);
  CHECK((result.critic->policies.Kd - sol.policies.Kd).cwiseAbs().maxCoeff() < 1e-5);

  // Trace bookkeeping: one row for the init solve plus one per update, and
  // the environment saw q init samples plus the loop steps.
  CHECK(result.trace.rows.size() == static_cast<std::size_t>(result.env_steps - 10 + 1));
  CHECK(result.trace.rows.front().iteration == 1);
  CHECK(std::isfinite(result.trace.rows.back().p_err_norm));
  for (std::size_t i = 1; i < result.trace.rows.size(); ++i) {
    CHECK(result.trace.rows[i].iteration == result.trace.rows[i - 1].iteration + 1);
  }
}

TEST_CASE("converged kernel is invariant to the probing-noise seed") {
  Rng rng(53);
  const Dims dims{2, 1, 1};
  auto instance = testutil::random_solvable_instance(rng, dims);
  std::vector<Eigen::VectorXd> finals;
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL}) {
    SimEnv env(instance.dyn, Eigen::VectorXd::Ones(2));
    LearnConfig lc;
    lc.noise_cov_v = 0.01 * Eigen::MatrixXd::Identity(1, 1);
    lc.noise_cov_d = 0.01 * Eigen::MatrixXd::Identity(1, 1);
    lc.seed = seed;
    lc.epsilon = 1e-9;
    lc.max_iter = 3000;
    const LearnResult result = learn_online(env, instance.cost, lc);
    REQUIRE(result.converged);
    finals.push_back(result.critic->s);
  }
  for (std::size_t i = 1; i < finals.size(); ++i) {
    CHECK((finals[i] - finals[0]).cwiseAbs().maxCoeff() <= 1e-6);
  }
}

TEST_CASE("stopping rule failure is reported with the partial trace") {
  Rng rng(59);
  auto instance = testutil::random_solvable_instance(rng, Dims{2, 1, 1});
  SimEnv env(instance.dyn, rng.gauss_vector(2));
  LearnConfig lc;
  lc.noise_cov_v = 0.01 * Eigen::MatrixXd::Identity(1, 1);
  lc.noise_cov_d = 0.01 * Eigen::MatrixXd::Identity(1, 1);
  lc.seed = 9;
  lc.epsilon = 1e-30;
  lc.max_iter = 40;
  const LearnResult result = learn_online(env, instance.cost, lc);
  CHECK_FALSE(result.converged);
  CHECK(result.numeric_failure);
  CHECK(!result.error.empty());
  CHECK(result.trace.rows.size() == 41);
  CHECK(result.critic.has_value());
}

TEST_CASE("forgetting factor below one still tracks the fixed point") {
  Rng rng(61);
  auto instance = testutil::random_solvable_instance(rng, Dims{2, 1, 1});
  SimEnv env(instance.dyn, rng.gauss_vector(2));
  LearnConfig lc;
  lc.noise_cov_v = 0.01 * Eigen::MatrixXd::Identity(1, 1);
  lc.noise_cov_d = 0.01 * Eigen::MatrixXd::Identity(1, 1);
  lc.seed = 77;
  lc.epsilon = 1e-9;
  lc.max_iter = 3000;
  lc.forgetting = 0.999;
  const LearnResult result = learn_online(env, instance.cost, lc);
  REQUIRE(result.converged);
  const RiccatiSolution sol = solve_riccati(instance.dyn, instance.cost);
  CHECK((unvecs(result.critic->s, 4) - sol.S_star.S()).norm() / sol.S_star.S().norm() < 1e-6);
}

TEST_CASE("benchmark rows are well formed on tiny sizes") {
  const std::vector<Dims> sizes{{2, 1, 1}, {3, 1, 1}};
  const auto rows = bench_update_cost(sizes, 5);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].q_params == 10);
  CHECK(rows[1].q_params == 15);
  for (const auto& row : rows) {
    CHECK(row.rls_seconds > 0.0);
    CHECK(row.batch_seconds > 0.0);
  }
  CHECK_THROWS_AS(bench_update_cost({{3, 1, 1}, {2, 1, 1}}, 5), DimensionError);
}

}  // TEST_SUITE
