#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "pem/macromodel.hpp"

namespace pem {

enum class GridArea : int { Internal = 0, External = 1 };

struct AgcParticipant {
  std::string name;
  GridArea area = GridArea::Internal;
  double droop_mw_per_hz = 0.0;   // proportional (governor) response
  double agc_gain = 0.0;          // integral gain on the area control error
  double scheduled_mw = 0.0;      // scheduled output (generators) or load (DER)
  double min_mw = 0.0;            // absolute output floor
  double max_mw = 0.0;            // absolute output ceiling
  bool is_der = false;            // participates as flexible load
  bool is_battery = false;        // energy-constrained storage
};

struct GridConfig {
  double step_s = 0.1;
  double nominal_freq_hz = 60.0;
  // Swing-equation constants per area, in MW-and-Hz units.
  double inertia_int_mw_s_per_hz = 101.5;
  double inertia_ext_mw_s_per_hz = 1015.0;
  double damping_int_mw_per_hz = 10.15;
  double damping_ext_mw_per_hz = 101.5;
  double tie_stiffness_mw_per_hz_s = 60.9;
  double bias_int_mw_per_hz = 10.0;  // frequency bias factor in the ACE
  double bias_ext_mw_per_hz = 10.0;
  double governor_time_const_s = 0.5;
  // Time scale of the secondary loop: participant gains from the dispatch
  // table are unitless and multiply this common integration rate.
  double agc_rate_per_s = 0.02;
  double battery_capacity_mwh = 45.0;
  double battery_initial_mwh = 22.5;
  std::vector<AgcParticipant> participants;

  // Vermont test system: external import generator plus two lumped local
  // units, a bulk battery and the DER fleet.
  static GridConfig vermont_defaults();
};

struct GridState {
  double freq_dev_int_hz = 0.0;
  double freq_dev_ext_hz = 0.0;
  double tie_flow_dev_mw = 0.0;  // unscheduled export, internal -> external
  std::vector<double> governor_mw;      // droop response after governor lag
  std::vector<double> agc_delta_mw;     // integrated setpoint deviation (injection)
  std::vector<double> output_mw;        // realized absolute output
  double battery_energy_mwh = 0.0;
  double der_reference_mw = 0.0;  // consumption reference handed to the coordinator
};

// Reduced two-area frequency/tie-line model driven by injection deviations.
// All resources are signed as injections; the DER fleet appears as negative
// injection (load) whose reference the coordinator tracks.
class TwoAreaGrid {
 public:
  explicit TwoAreaGrid(GridConfig cfg);

  void set_agc_enabled(bool enabled) { agc_enabled_ = enabled; }

  // Fleet feedback for co-simulation: the realized DER consumption. When
  // never set, the DER participant is assumed to track its reference.
  void set_der_demand_mw(double demand_mw);

  // SoC-aware DER gain scheduling input.
  void set_der_soc(const SocAssessment& assessment, const SocLimits& limits);

  // Advances one step under the given injection disturbances (solar is an
  // extra internal injection; load_dev an extra internal load).
  void step(double solar_dev_mw, double load_dev_mw);

  double ace_mw(GridArea area) const;
  const GridState& state() const { return state_; }
  const GridConfig& config() const { return cfg_; }
  double time_s() const { return time_s_; }

  // Injection-balance residual of the last step, in MW (exact bookkeeping
  // check; zero up to rounding).
  double last_balance_residual_mw() const { return balance_residual_mw_; }

  // Closed-form steady-state frequency deviation under droop only.
  double droop_only_freq_dev_hz(double injection_step_mw) const;

  // DER participation weight: 1 in the middle of the SoC range, ramping to 0
  // over the last fifth of the range toward the binding limit.
  static double der_participation_weight(double z, const SocLimits& limits,
                                         bool toward_charging);

 private:
  GridConfig cfg_;
  GridState state_;
  bool agc_enabled_ = true;
  double time_s_ = 0.0;
  double der_demand_mw_ = 0.0;
  bool have_der_feedback_ = false;
  double der_weight_charge_ = 1.0;
  double der_weight_discharge_ = 1.0;
  double balance_residual_mw_ = 0.0;
  int battery_index_ = -1;
  int der_index_ = -1;
};

// Solar profile: delimited text rows of (timestamp_s, power_mw).
struct SolarProfile {
  std::vector<double> time_s;
  std::vector<double> power_mw;

  static SolarProfile parse(std::istream& is);
  static SolarProfile load(const std::string& path);

  double at(double t) const;  // linear interpolation, clamped ends
  // Uniformly resampled copy at dt_s covering [front, back], endpoints exact.
  SolarProfile resampled(double dt_s) const;
  // Deviation from the first sample (scenario baseline).
  double deviation_at(double t) const { return at(t) - power_mw.front(); }
  double trapezoid_energy_mwh() const;
};

}  // namespace pem
