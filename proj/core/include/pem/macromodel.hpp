#pragma once

#include <Eigen/Dense>
#include <deque>
#include <iosfwd>
#include <span>

#include "pem/device.hpp"

namespace pem {

// Discretization of the deadband into bins, replicated across the three
// operating modes (charge, standby, discharge copies of the same SoC axis).
struct BinGrid {
  int bins_per_mode = 20;
  double low = 48.9;
  double high = 55.1;

  double width() const { return (high - low) / bins_per_mode; }
  double center(int i) const { return low + (i + 0.5) * width(); }
  int total_states() const { return 3 * bins_per_mode; }

  // SoC value associated with every state (three identical copies).
  Eigen::VectorXd soc_vector() const;
};

// Accepted-request proportions and expiring-packet proportions.
struct ControlInput {
  double accept_charge = 0.0;
  double accept_discharge = 0.0;
  double expire_charge = 0.0;
  double expire_discharge = 0.0;
};

struct MacroParams {
  DeviceParams device;        // homogeneous representative parameters
  double mean_draw_kw = 0.0;  // average end-use power per device (EWH)
  double step_s = 60.0;       // macromodel cadence
  double device_tick_s = 1.0;  // request-law compounding base
  int fleet_size = 1;
  double uncontrolled_base_kw = 0.0;
};

struct MacroOutput {
  double demand_kw = 0.0;
  double requests_charge = 0.0;
  double requests_discharge = 0.0;
  double opt_outs = 0.0;
};

struct BaselineResult {
  double accept_charge = 0.0;
  double accept_discharge = 0.0;
  double nominal_power_kw = 0.0;
  Eigen::VectorXd pmf;
};

struct SocLimits {
  double max_soc = 0.0;  // mean SoC of the all-charge stationary distribution
  double min_soc = 0.0;
  double max_normalized = 0.0;
  double min_normalized = 0.0;
};

struct SocAssessment {
  double normalized = 0.0;  // deadband-normalized fleet SoC
  bool near_upper_limit = false;
  bool near_lower_limit = false;
};

// Fleet SoC normalized against the deadband (0 at the lower edge, 1 at the
// upper edge). Sample-based and PMF-based forms.
double fleet_soc(std::span<const double> socs, double low, double high);
double fleet_soc(const Eigen::VectorXd& pmf, const BinGrid& grid);

class Macromodel {
 public:
  // Per-bin one-step advance probabilities and request rates at bin centers.
  struct TransitionStructure {
    Eigen::VectorXd charge_up;        // charge bin i -> i+1 (top: cutoff to standby)
    Eigen::VectorXd standby_down;     // standby i -> i-1 (bottom: opt-out to charge)
    Eigen::VectorXd discharge_down;   // discharge i -> i-1 (bottom: opt-out to charge)
    Eigen::VectorXd request_rate_charge;     // 1/s at bin centers
    Eigen::VectorXd request_rate_discharge;  // 1/s
    int device_ticks_per_step = 60;
  };

  Macromodel(const MacroParams& params, const BinGrid& grid);

  const BinGrid& grid() const { return grid_; }
  const MacroParams& params() const { return params_; }
  const TransitionStructure& transitions() const { return structure_; }

  // Probability that a standby device in `bin` is accepted into `dir` within
  // one macro step, and the expected number of requests it emits meanwhile.
  // Per-tick acceptance Bernoullis compound over the step.
  double accept_prob(int bin, PacketDirection dir, double beta_c, double beta_d) const;
  double expected_requests(int bin, PacketDirection dir, double beta_c,
                           double beta_d) const;

  // Column-stochastic one-step matrix: pmf' = T(u) * pmf. Because the PMF map
  // is linear in the PMF for fixed input, this matrix is also the exact
  // state Jacobian used by the estimator.
  Eigen::MatrixXd transition_matrix(const ControlInput& u) const;

  Eigen::VectorXd step(const Eigen::VectorXd& pmf, const ControlInput& u) const;
  MacroOutput output(const Eigen::VectorXd& pmf, const ControlInput& u) const;

  // Output Jacobian (3 rows, or 4 with the opt-out row appended).
  Eigen::MatrixXd output_matrix(const ControlInput& u, bool include_opt_outs) const;

  // Mass entering charge mode in one step (packet acceptances plus forced
  // opt-out inflow); feeds the expiry delay line.
  double charge_inflow(const Eigen::VectorXd& pmf, const ControlInput& u) const;
  double discharge_inflow(const Eigen::VectorXd& pmf, const ControlInput& u) const;

  // Stationary distribution with the timer dynamics pinned at their steady
  // value (expiry proportion = step / packet length). Throws on
  // non-convergence, reporting the residual.
  Eigen::VectorXd stationary_distribution(double beta_c, double beta_d,
                                          double tol = 1e-12) const;

  // Steady expiry proportions implied by the packet lengths.
  ControlInput steady_input(double beta_c, double beta_d) const;

  double mean_soc(const Eigen::VectorXd& pmf) const;

  // Minimum steady-state demand subject to the stationary-point and setpoint
  // constraints. Scalar bisection for charge-only fleets, coarse-to-fine 2-D
  // search otherwise. Throws std::runtime_error when infeasible.
  BaselineResult baseline_optimization() const;

  SocLimits soc_limits() const;

  // Text snapshot of (grid, structure hash inputs, pmf) for warm starts.
  void save_snapshot(std::ostream& os, const Eigen::VectorXd& pmf) const;
  Eigen::VectorXd load_snapshot(std::istream& is) const;

 private:
  void build_structure();

  MacroParams params_;
  BinGrid grid_;
  TransitionStructure structure_;
};

// Steps the macromodel through time, tracking packet-expiry cohorts with a
// delay line so the expiring proportions replay the acceptance inflow one
// packet length later.
class MacroRunner {
 public:
  MacroRunner(const Macromodel& model, Eigen::VectorXd initial_pmf);

  // Advances one macro step under the given acceptance proportions. When
  // expire_override is non-null it is used verbatim (estimator feed path).
  MacroOutput step(double beta_c, double beta_d,
                   const ControlInput* expire_override = nullptr);

  const Eigen::VectorXd& pmf() const { return pmf_; }
  ControlInput last_input() const { return last_input_; }

 private:
  const Macromodel& model_;
  Eigen::VectorXd pmf_;
  std::deque<double> inflow_charge_;
  std::deque<double> inflow_discharge_;
  std::size_t lag_charge_;
  std::size_t lag_discharge_;
  ControlInput last_input_;
};

}  // namespace pem
