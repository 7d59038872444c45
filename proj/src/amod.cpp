#include "hinfq/amod.hpp"

#include <algorithm>
#include <string>

namespace hinfq::amod {

NetworkSpec::NetworkSpec(Eigen::Index stations, Eigen::VectorXd travel, Eigen::VectorXd rates,
                         std::vector<RatePhase> schedule)
    : n(stations),
      travel_times(std::move(travel)),
      arrival_rates(std::move(rates)),
      rate_schedule(std::move(schedule)) {
  if (n < 2) throw DimensionError("NetworkSpec: need at least two stations");
  const Eigen::Index m = links();
  if (travel_times.size() != m) throw DimensionError("NetworkSpec: travel_times length != link count");
  if (arrival_rates.size() != m) throw DimensionError("NetworkSpec: arrival_rates length != link count");
  if ((travel_times.array() < 1.0).any()) {
    throw DimensionError("NetworkSpec: every travel time must be at least one step");
  }
  if ((arrival_rates.array() < 0.0).any()) {
    throw DimensionError("NetworkSpec: arrival rates must be nonnegative");
  }
  Eigen::Index prev = -1;
  for (std::size_t i = 0; i < rate_schedule.size(); ++i) {
    const RatePhase& phase = rate_schedule[i];
    if (phase.rates.size() != m) throw DimensionError("NetworkSpec: schedule rates length != link count");
    if ((phase.rates.array() < 0.0).any()) {
      throw DimensionError("NetworkSpec: schedule rates must be nonnegative");
    }
    if (i == 0 && phase.start_iteration != 0) {
      throw DimensionError("NetworkSpec: schedule must start at iteration 0");
    }
    if (phase.start_iteration <= prev) {
      throw DimensionError("NetworkSpec: schedule start iterations must be strictly increasing");
    }
    prev = phase.start_iteration;
  }
}

Eigen::Index NetworkSpec::link_index(Eigen::Index n, Eigen::Index origin, Eigen::Index dest) {
  if (origin < 0 || origin >= n || dest < 0 || dest >= n || origin == dest) {
    throw DimensionError("link_index: invalid (origin, dest)");
  }
  return origin * (n - 1) + (dest < origin ? dest : dest - 1);
}

std::pair<Eigen::Index, Eigen::Index> NetworkSpec::link_nodes(Eigen::Index n, Eigen::Index link) {
  if (link < 0 || link >= n * (n - 1)) throw DimensionError("link_nodes: link out of range");
  const Eigen::Index origin = link / (n - 1);
  Eigen::Index dest = link % (n - 1);
  if (dest >= origin) ++dest;
  return {origin, dest};
}

const Eigen::VectorXd& NetworkSpec::rates_at(Eigen::Index iteration) const {
  if (rate_schedule.empty()) return arrival_rates;
  const Eigen::VectorXd* current = &rate_schedule.front().rates;
  for (const RatePhase& phase : rate_schedule) {
    if (phase.start_iteration <= iteration) current = &phase.rates;
  }
  return *current;
}

Incidence incidence(const NetworkSpec& spec) {
  const Eigen::Index m = spec.links();
  Incidence inc;
  inc.E_in = Eigen::MatrixXd::Zero(spec.n, m);
  inc.E_out = Eigen::MatrixXd::Zero(spec.n, m);
  for (Eigen::Index l = 0; l < m; ++l) {
    const auto [origin, dest] = NetworkSpec::link_nodes(spec.n, l);
    inc.E_out(origin, l) = 1.0;
    inc.E_in(dest, l) = 1.0;
  }
  inc.E = inc.E_in - inc.E_out;
  return inc;
}

AmodPlant build_dynamics(const NetworkSpec& spec) {
  const Eigen::Index m = spec.links();
  const Eigen::Index n = spec.n;
  const Eigen::Index m1 = 2 * m + n;
  Incidence inc = incidence(spec);

  const Eigen::VectorXd inv_t = spec.travel_times.cwiseInverse();

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(m1, m1);
  a.block(0, 0, m, m).setIdentity();
  a.block(m, m, n, n).setIdentity();
  a.block(m, m + n, n, m) = inc.E_in * inv_t.asDiagonal();
  a.block(m + n, m + n, m, m) =
      Eigen::MatrixXd::Identity(m, m) - Eigen::MatrixXd(inv_t.asDiagonal());

  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(m1, 2 * m);
  b.block(0, 0, m, m) = -Eigen::MatrixXd::Identity(m, m);
  b.block(m, 0, n, m) = -inc.E_out;
  b.block(m, m, n, m) = -inc.E_out;
  b.block(m + n, 0, m, m).setIdentity();
  b.block(m + n, m, m, m).setIdentity();

  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(m1, m);
  l.block(0, 0, m, m).setIdentity();

  AmodPlant plant{SystemDynamics(std::move(a), std::move(b), std::move(l)), std::move(inc),
                  n, spec.travel_times};
  return plant;
}

Eigen::VectorXd AmodPlant::pack_state(const Eigen::VectorXd& w, const Eigen::VectorXd& p,
                                      const Eigen::VectorXd& g) const {
  if (w.size() != links() || p.size() != n || g.size() != links()) {
    throw DimensionError("pack_state: block sizes do not match plant");
  }
  Eigen::VectorXd x(dynamics.dims().m1);
  x << w, p, g;
  return x;
}

Eigen::VectorXd AmodPlant::pack_control(const Eigen::VectorXd& u, const Eigen::VectorXd& r) const {
  if (u.size() != links() || r.size() != links()) {
    throw DimensionError("pack_control: block sizes do not match plant");
  }
  Eigen::VectorXd v(2 * links());
  v << u, r;
  return v;
}

AmodState amod_step_componentwise(const NetworkSpec& spec, const Eigen::VectorXd& w,
                                  const Eigen::VectorXd& p, const Eigen::VectorXd& g,
                                  const Eigen::VectorXd& u, const Eigen::VectorXd& r,
                                  const Eigen::VectorXd& d) {
  const Eigen::Index m = spec.links();
  if (w.size() != m || g.size() != m || u.size() != m || r.size() != m || d.size() != m ||
      p.size() != spec.n) {
    throw DimensionError("amod_step_componentwise: block sizes do not match network");
  }
  AmodState next;
  next.w = w + d - u;
  next.g = (Eigen::VectorXd::Ones(m) - spec.travel_times.cwiseInverse()).cwiseProduct(g) + u + r;
  next.p = p;
  for (Eigen::Index station = 0; station < spec.n; ++station) {
    double outflow = 0.0;
    double inflow = 0.0;
    for (Eigen::Index other = 0; other < spec.n; ++other) {
      if (other == station) continue;
      const Eigen::Index out_link = NetworkSpec::link_index(spec.n, station, other);
      const Eigen::Index in_link = NetworkSpec::link_index(spec.n, other, station);
      outflow += u[out_link] + r[out_link];
      inflow += g[in_link] / spec.travel_times[in_link];
    }
    next.p[station] += inflow - outflow;
  }
  return next;
}

namespace {

// Feasible nonnegative rebalancing flow: greedily ship each node's vehicle
// surplus to deficit nodes over direct links, lowest indices first.
Eigen::VectorXd initial_feasible_flow(const NetworkSpec& spec, const Incidence& inc) {
  Eigen::VectorXd surplus = inc.E * spec.arrival_rates;  // net vehicle inflow from demand
  Eigen::VectorXd flow = Eigen::VectorXd::Zero(spec.links());
  Eigen::Index src = 0;
  Eigen::Index dst = 0;
  const double tiny = 1e-15;
  while (true) {
    while (src < spec.n && surplus[src] <= tiny) ++src;
    while (dst < spec.n && surplus[dst] >= -tiny) ++dst;
    if (src >= spec.n || dst >= spec.n) break;
    const double amount = std::min(surplus[src], -surplus[dst]);
    flow[NetworkSpec::link_index(spec.n, src, dst)] += amount;
    surplus[src] -= amount;
    surplus[dst] += amount;
  }
  return flow;
}

}  // namespace

RebalanceSolution solve_rebalancing(const NetworkSpec& spec, double kkt_tol,
                                    Eigen::Index max_iter) {
  const Eigen::Index m = spec.links();
  const Eigen::Index n_eq = spec.n - 1;  // rows of E sum to zero; drop the last
  if (max_iter <= 0) max_iter = 50 * m + 200;
  const Incidence inc = incidence(spec);
  const Eigen::MatrixXd e_red = inc.E.topRows(n_eq);
  const Eigen::VectorXd b = -e_red * spec.arrival_rates;
  const Eigen::VectorXd diag = 2.0 * spec.travel_times;  // Hessian of R'TR

  Eigen::VectorXd r_cur = initial_feasible_flow(spec, inc);
  std::vector<bool> active(static_cast<std::size_t>(m));
  for (Eigen::Index l = 0; l < m; ++l) active[static_cast<std::size_t>(l)] = r_cur[l] <= 0.0;

  Eigen::VectorXd nu = Eigen::VectorXd::Zero(n_eq);
  const double scale = std::max(1.0, spec.arrival_rates.cwiseAbs().maxCoeff());

  Eigen::Index iterations = 0;
  for (; iterations < max_iter; ++iterations) {
    std::vector<Eigen::Index> free_links;
    for (Eigen::Index l = 0; l < m; ++l) {
      if (!active[static_cast<std::size_t>(l)]) free_links.push_back(l);
    }
    const Eigen::Index nf = static_cast<Eigen::Index>(free_links.size());

    // Equality-constrained subproblem on the free links via the multiplier
    // (Schur) system: (E_F D_F^-1 E_F' / 2) nu = b, R_F = D_F^-1 E_F' nu / 2.
    Eigen::VectorXd r_sub = Eigen::VectorXd::Zero(m);
    if (nf > 0) {
      Eigen::MatrixXd ef(n_eq, nf);
      Eigen::VectorXd dinv(nf);
      for (Eigen::Index k = 0; k < nf; ++k) {
        ef.col(k) = e_red.col(free_links[static_cast<std::size_t>(k)]);
        dinv[k] = 1.0 / diag[free_links[static_cast<std::size_t>(k)]];
      }
      const Eigen::MatrixXd schur = ef * dinv.asDiagonal() * ef.transpose();
      Eigen::LDLT<Eigen::MatrixXd> ldlt(schur);
      nu = ldlt.solve(b);
      if ((schur * nu - b).cwiseAbs().maxCoeff() > 1e-9 * scale) {
        // Working set made the multipliers non-unique; the system is still
        // consistent, take the minimum-norm solution.
        nu = schur.completeOrthogonalDecomposition().solve(b);
        if ((schur * nu - b).cwiseAbs().maxCoeff() > 1e-7 * scale) {
          throw Infeasible("solve_rebalancing: balance equations inconsistent with working set");
        }
      }
      const Eigen::VectorXd rf = dinv.asDiagonal() * (ef.transpose() * nu);
      for (Eigen::Index k = 0; k < nf; ++k) r_sub[free_links[static_cast<std::size_t>(k)]] = rf[k];
    } else {
      nu.setZero();
    }

    double step_inf = 0.0;
    for (Eigen::Index k = 0; k < nf; ++k) {
      const Eigen::Index l = free_links[static_cast<std::size_t>(k)];
      step_inf = std::max(step_inf, std::abs(r_sub[l] - r_cur[l]));
    }

    if (step_inf <= 1e-13 * scale) {
      // At the subproblem optimum; check the bound multipliers.
      const Eigen::VectorXd grad_minus_eq = diag.cwiseProduct(r_cur) - e_red.transpose() * nu;
      Eigen::Index worst = -1;
      double worst_mu = -kkt_tol;
      for (Eigen::Index l = 0; l < m; ++l) {
        if (!active[static_cast<std::size_t>(l)]) continue;
        if (grad_minus_eq[l] < worst_mu) {
          worst_mu = grad_minus_eq[l];
          worst = l;
        }
      }
      if (worst < 0) break;  // KKT satisfied
      active[static_cast<std::size_t>(worst)] = false;
      continue;
    }

    // Step toward the subproblem optimum, stopping at the first bound.
    double alpha = 1.0;
    Eigen::Index blocking = -1;
    for (Eigen::Index k = 0; k < nf; ++k) {
      const Eigen::Index l = free_links[static_cast<std::size_t>(k)];
      const double delta = r_sub[l] - r_cur[l];
      if (delta < -1e-15) {
        const double a = r_cur[l] / -delta;
        if (a < alpha - 1e-15) {
          alpha = a;
          blocking = l;
        }
      }
    }
    for (Eigen::Index k = 0; k < nf; ++k) {
      const Eigen::Index l = free_links[static_cast<std::size_t>(k)];
      r_cur[l] += alpha * (r_sub[l] - r_cur[l]);
      if (r_cur[l] < 0.0) r_cur[l] = 0.0;
    }
    if (blocking >= 0) {
      r_cur[blocking] = 0.0;
      active[static_cast<std::size_t>(blocking)] = true;
    }
  }
  if (iterations >= max_iter) {
    throw SolverStalled("solve_rebalancing: active-set loop exceeded " +
                        std::to_string(max_iter) + " iterations");
  }

  RebalanceSolution sol;
  sol.R_star = r_cur;
  sol.nu = Eigen::VectorXd::Zero(spec.n);
  sol.nu.head(n_eq) = nu;
  sol.iterations = iterations + 1;

  const Eigen::VectorXd eq_pull = inc.E.transpose() * sol.nu;
  sol.mu = Eigen::VectorXd::Zero(m);
  for (Eigen::Index l = 0; l < m; ++l) {
    if (active[static_cast<std::size_t>(l)]) sol.mu[l] = diag[l] * r_cur[l] - eq_pull[l];
  }
  sol.residuals.primal = (inc.E * (r_cur + spec.arrival_rates)).cwiseAbs().maxCoeff();
  sol.residuals.stationarity =
      (diag.cwiseProduct(r_cur) - eq_pull - sol.mu).cwiseAbs().maxCoeff();
  sol.residuals.dual = std::max(0.0, -sol.mu.minCoeff());
  sol.residuals.complementarity = sol.mu.cwiseProduct(r_cur).cwiseAbs().maxCoeff();
  return sol;
}

Equilibrium equilibrium(const NetworkSpec& spec, const Eigen::VectorXd& R_bar,
                        std::optional<double> fleet_size, double kkt_tol) {
  const Eigen::Index m = spec.links();
  if (R_bar.size() != m) throw DimensionError("equilibrium: R_bar length != link count");
  if (R_bar.minCoeff() < -kkt_tol) throw Infeasible("equilibrium: R_bar has negative entries");
  const Incidence inc = incidence(spec);
  if ((inc.E * (R_bar + spec.arrival_rates)).cwiseAbs().maxCoeff() > kkt_tol) {
    throw Infeasible("equilibrium: E (R_bar + lambda) != 0");
  }

  Equilibrium eq;
  eq.R_bar = R_bar;
  eq.U_bar = spec.arrival_rates;
  eq.g_bar = spec.travel_times.cwiseProduct(spec.arrival_rates + R_bar);
  eq.w_bar = Eigen::VectorXd::Zero(m);
  eq.fleet_lower_bound = spec.travel_times.dot(spec.arrival_rates + R_bar);
  if (fleet_size) {
    const double slack = *fleet_size - eq.fleet_lower_bound;
    if (slack < 0.0) {
      throw Infeasible("equilibrium: fleet size below the lower bound " +
                       std::to_string(eq.fleet_lower_bound));
    }
    eq.p_bar = Eigen::VectorXd::Constant(spec.n, slack / static_cast<double>(spec.n));
  } else {
    eq.p_bar = Eigen::VectorXd::Ones(spec.n);
  }
  return eq;
}

CoordinateShift make_shift(const AmodPlant& plant, const Equilibrium& eq,
                           const Eigen::VectorXd& rates) {
  CoordinateShift shift;
  shift.x_bar = plant.pack_state(eq.w_bar, eq.p_bar, eq.g_bar);
  shift.v_bar = plant.pack_control(eq.U_bar, eq.R_bar);
  shift.d_bar = rates;
  return shift;
}

ShiftedTriple shift_coordinates(const CoordinateShift& shift, const Eigen::VectorXd& x,
                                const Eigen::VectorXd& v, const Eigen::VectorXd& d) {
  if (x.size() != shift.x_bar.size() || v.size() != shift.v_bar.size() ||
      d.size() != shift.d_bar.size()) {
    throw DimensionError("shift_coordinates: dimensions do not match");
  }
  return ShiftedTriple{x - shift.x_bar, v - shift.v_bar, d - shift.d_bar};
}

ShiftedTriple unshift_coordinates(const CoordinateShift& shift, const Eigen::VectorXd& x,
                                  const Eigen::VectorXd& v, const Eigen::VectorXd& d) {
  if (x.size() != shift.x_bar.size() || v.size() != shift.v_bar.size() ||
      d.size() != shift.d_bar.size()) {
    throw DimensionError("unshift_coordinates: dimensions do not match");
  }
  return ShiftedTriple{x + shift.x_bar, v + shift.v_bar, d + shift.d_bar};
}

PoissonDemand::PoissonDemand(Eigen::VectorXd rates, std::uint64_t seed)
    : rates_(std::move(rates)), rng_(seed) {
  if ((rates_.array() < 0.0).any()) throw DimensionError("PoissonDemand: negative rate");
}

Eigen::VectorXd PoissonDemand::operator()() {
  Eigen::VectorXd d(rates_.size());
  for (Eigen::Index l = 0; l < rates_.size(); ++l) {
    d[l] = static_cast<double>(rng_.poisson(rates_[l]));
  }
  return d;
}

void PoissonDemand::set_rates(Eigen::VectorXd rates) {
  if (rates.size() != rates_.size()) throw DimensionError("PoissonDemand: rate vector resized");
  if ((rates.array() < 0.0).any()) throw DimensionError("PoissonDemand: negative rate");
  rates_ = std::move(rates);
}

CostSpec cost_from_network(const Eigen::VectorXd& rates, const Eigen::VectorXd& travel_times,
                           Eigen::Index n, double rho, double gamma) {
  if (!(rho > 0.0)) throw DimensionError("cost_from_network: rho must be positive");
  const Eigen::Index m = rates.size();
  if (travel_times.size() != m) throw DimensionError("cost_from_network: vector sizes differ");
  const Eigen::Index m1 = 2 * m + n;
  Eigen::MatrixXd rx = Eigen::MatrixXd::Zero(m1, m1);
  rx.block(0, 0, m, m) = Eigen::MatrixXd(rates.asDiagonal());
  Eigen::MatrixXd rv = Eigen::MatrixXd::Zero(2 * m, 2 * m);
  rv.block(0, 0, m, m) = rho * Eigen::MatrixXd(travel_times.asDiagonal());
  rv.block(m, m, m, m) = rho * Eigen::MatrixXd(travel_times.asDiagonal());
  return CostSpec(std::move(rx), std::move(rv), gamma);
}

CostSpec cost_from_network(const NetworkSpec& spec, double rho, double gamma) {
  return cost_from_network(spec.arrival_rates, spec.travel_times, spec.n, rho, gamma);
}

std::vector<MetricsRow> metrics(const Trajectory& traj, const AmodPlant& plant,
                                Eigen::Index window) {
  if (window < 1) throw DimensionError("metrics: window must be at least 1");
  std::vector<MetricsRow> rows;
  const Eigen::Index total = static_cast<Eigen::Index>(traj.steps.size());
  for (Eigen::Index start = 0; start < total; start += window) {
    const Eigen::Index end = std::min(start + window, total);
    MetricsRow row;
    row.window_start = start;
    double queue = 0.0, carrying = 0.0, rebalancing = 0.0;
    for (Eigen::Index t = start; t < end; ++t) {
      const Transition& tr = traj.steps[static_cast<std::size_t>(t)];
      queue += plant.state_w(tr.x).mean();
      carrying += plant.control_u(tr.v).mean();
      rebalancing += plant.control_r(tr.v).mean();
      row.negative_state_entries += (tr.x.array() < -1e-9).count();
      row.negative_control_entries += (tr.v.array() < -1e-9).count();
    }
    const double count = static_cast<double>(end - start);
    row.avg_queue = queue / count;
    row.avg_carrying = carrying / count;
    row.avg_rebalancing = rebalancing / count;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace hinfq::amod
