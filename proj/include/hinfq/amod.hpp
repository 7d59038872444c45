#pragma once

#include <Eigen/Dense>
#include <optional>
#include <utility>
#include <vector>

#include "hinfq/rng.hpp"
#include "hinfq/system.hpp"

namespace hinfq::amod {

inline constexpr double kDefaultKktTol = 1e-8;

struct RatePhase {
  Eigen::Index start_iteration = 0;
  Eigen::VectorXd rates;
};

// Complete station digraph with per-link travel times and demand rates.
// Links are the ordered pairs (r, s), r != s, in lexicographic order.
struct NetworkSpec {
  Eigen::Index n = 0;
  Eigen::VectorXd travel_times;        // per link, in time steps, >= 1
  Eigen::VectorXd arrival_rates;       // per link, customers per step, >= 0
  std::vector<RatePhase> rate_schedule;  // optional piecewise-constant demand

  NetworkSpec(Eigen::Index stations, Eigen::VectorXd travel, Eigen::VectorXd rates,
              std::vector<RatePhase> schedule = {});

  Eigen::Index links() const { return n * (n - 1); }

  static Eigen::Index link_index(Eigen::Index n, Eigen::Index origin, Eigen::Index dest);
  static std::pair<Eigen::Index, Eigen::Index> link_nodes(Eigen::Index n, Eigen::Index link);

  // Rates in force at a given loop iteration (first phase applies from 0).
  const Eigen::VectorXd& rates_at(Eigen::Index iteration) const;
};

struct Incidence {
  Eigen::MatrixXd E_in;   // n x links, 1 at the head of each link
  Eigen::MatrixXd E_out;  // n x links, 1 at the tail
  Eigen::MatrixXd E;      // E_in - E_out
};

Incidence incidence(const NetworkSpec& spec);

// The global linear plant over state (w, p, g) and control (U, R), plus the
// index maps between block views and the packed coordinates.
struct AmodPlant {
  SystemDynamics dynamics;
  Incidence inc;
  Eigen::Index n = 0;
  Eigen::VectorXd travel_times;

  Eigen::Index links() const { return n * (n - 1); }
  Eigen::Index w_offset() const { return 0; }
  Eigen::Index p_offset() const { return links(); }
  Eigen::Index g_offset() const { return links() + n; }
  Eigen::Index u_offset() const { return 0; }
  Eigen::Index r_offset() const { return links(); }

  Eigen::VectorXd pack_state(const Eigen::VectorXd& w, const Eigen::VectorXd& p,
                             const Eigen::VectorXd& g) const;
  Eigen::VectorXd pack_control(const Eigen::VectorXd& u, const Eigen::VectorXd& r) const;

  Eigen::VectorXd state_w(const Eigen::VectorXd& x) const { return x.segment(w_offset(), links()); }
  Eigen::VectorXd state_p(const Eigen::VectorXd& x) const { return x.segment(p_offset(), n); }
  Eigen::VectorXd state_g(const Eigen::VectorXd& x) const { return x.segment(g_offset(), links()); }
  Eigen::VectorXd control_u(const Eigen::VectorXd& v) const { return v.segment(u_offset(), links()); }
  Eigen::VectorXd control_r(const Eigen::VectorXd& v) const { return v.segment(r_offset(), links()); }
};

AmodPlant build_dynamics(const NetworkSpec& spec);

struct AmodState {
  Eigen::VectorXd w;
  Eigen::VectorXd p;
  Eigen::VectorXd g;
};

// Per-block dynamics, written out componentwise; agrees with the packed
// matrix form of AmodPlant::dynamics.
AmodState amod_step_componentwise(const NetworkSpec& spec, const Eigen::VectorXd& w,
                                  const Eigen::VectorXd& p, const Eigen::VectorXd& g,
                                  const Eigen::VectorXd& u, const Eigen::VectorXd& r,
                                  const Eigen::VectorXd& d);

struct KktResiduals {
  double primal = 0.0;           // ||E (R + lambda)||_inf
  double stationarity = 0.0;     // ||2 T R - E' nu - mu||_inf
  double dual = 0.0;             // max(0, -min mu)
  double complementarity = 0.0;  // max |mu .* R|
};

struct RebalanceSolution {
  Eigen::VectorXd R_star;
  Eigen::VectorXd nu;  // per-node equality multipliers (last node pinned to 0)
  Eigen::VectorXd mu;  // per-link bound multipliers
  KktResiduals residuals;
  Eigen::Index iterations = 0;
};

// Minimal steady-state rebalancing flow: minimize R' T R subject to
// E (R + lambda) = 0 and R >= 0, by a primal active-set method on the
// nonnegativity bounds. Ties are broken by lowest link index.
RebalanceSolution solve_rebalancing(const NetworkSpec& spec,
                                    double kkt_tol = kDefaultKktTol,
                                    Eigen::Index max_iter = 0);

struct Equilibrium {
  Eigen::VectorXd w_bar;
  Eigen::VectorXd p_bar;
  Eigen::VectorXd g_bar;
  Eigen::VectorXd U_bar;
  Eigen::VectorXd R_bar;
  double fleet_lower_bound = 0.0;  // T' (lambda + R_bar)
};

// Steady state sustained by a balanced rebalancing flow. p_bar splits the
// slack above the fleet lower bound uniformly when a fleet size is given and
// defaults to one idle vehicle per station otherwise; w_bar defaults to zero.
Equilibrium equilibrium(const NetworkSpec& spec, const Eigen::VectorXd& R_bar,
                        std::optional<double> fleet_size = std::nullopt,
                        double kkt_tol = kDefaultKktTol);

struct CoordinateShift {
  Eigen::VectorXd x_bar;
  Eigen::VectorXd v_bar;
  Eigen::VectorXd d_bar;
};

CoordinateShift make_shift(const AmodPlant& plant, const Equilibrium& eq,
                           const Eigen::VectorXd& rates);

struct ShiftedTriple {
  Eigen::VectorXd x;
  Eigen::VectorXd v;
  Eigen::VectorXd d;
};

ShiftedTriple shift_coordinates(const CoordinateShift& shift, const Eigen::VectorXd& x,
                                const Eigen::VectorXd& v, const Eigen::VectorXd& d);
ShiftedTriple unshift_coordinates(const CoordinateShift& shift, const Eigen::VectorXd& x,
                                  const Eigen::VectorXd& v, const Eigen::VectorXd& d);

// Independent per-link Poisson counts, deterministic under a fixed seed.
class PoissonDemand {
 public:
  PoissonDemand(Eigen::VectorXd rates, std::uint64_t seed);

  Eigen::VectorXd operator()();
  void set_rates(Eigen::VectorXd rates);
  const Eigen::VectorXd& rates() const { return rates_; }

 private:
  Eigen::VectorXd rates_;
  Rng rng_;
};

// Stage cost of the regulation game: queue weights from the demand rates on
// the w block, control effort rho * T on both dispatch and rebalancing.
CostSpec cost_from_network(const Eigen::VectorXd& rates, const Eigen::VectorXd& travel_times,
                           Eigen::Index n, double rho, double gamma);
CostSpec cost_from_network(const NetworkSpec& spec, double rho, double gamma);

struct MetricsRow {
  Eigen::Index window_start = 0;
  double avg_queue = 0.0;
  double avg_carrying = 0.0;
  double avg_rebalancing = 0.0;
  Eigen::Index negative_state_entries = 0;    // nonnegativity violations, reported not enforced
  Eigen::Index negative_control_entries = 0;
};

// Windowed means over a trajectory in original (unshifted) coordinates.
std::vector<MetricsRow> metrics(const Trajectory& traj, const AmodPlant& plant,
                                Eigen::Index window = 5);

}  // namespace hinfq::amod
