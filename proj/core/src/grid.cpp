#include "pem/grid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace pem {

GridConfig GridConfig::vermont_defaults() {
  GridConfig cfg;
  cfg.participants = {
      {"external", GridArea::External, 33.0, 1.0, 218.0, 0.0, 240.0, false, false},
      {"local1", GridArea::Internal, 33.0, 1.0, 86.2, 0.0, 130.0, false, false},
      {"local2", GridArea::Internal, 33.0, 1.0, 26.6, 0.0, 35.0, false, false},
      {"battery", GridArea::Internal, 0.0, 1.0, 0.0, -15.0, 15.0, false, true},
      {"der", GridArea::Internal, 20.0, 5.1, 4.68, 0.0, 18.0, true, false},
  };
  return cfg;
}

TwoAreaGrid::TwoAreaGrid(GridConfig cfg) : cfg_(std::move(cfg)) {
  const std::size_t n = cfg_.participants.size();
  state_.governor_mw.assign(n, 0.0);
  state_.agc_delta_mw.assign(n, 0.0);
  state_.output_mw.assign(n, 0.0);
  state_.battery_energy_mwh = cfg_.battery_initial_mwh;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = cfg_.participants[i];
    state_.output_mw[i] = p.scheduled_mw;
    if (p.is_battery) battery_index_ = static_cast<int>(i);
    if (p.is_der) {
      der_index_ = static_cast<int>(i);
      state_.der_reference_mw = p.scheduled_mw;
    }
  }
}

double TwoAreaGrid::ace_mw(GridArea area) const {
  if (area == GridArea::Internal)
    return cfg_.bias_int_mw_per_hz * state_.freq_dev_int_hz + state_.tie_flow_dev_mw;
  return cfg_.bias_ext_mw_per_hz * state_.freq_dev_ext_hz - state_.tie_flow_dev_mw;
}

void TwoAreaGrid::set_der_demand_mw(double demand_mw) {
  der_demand_mw_ = demand_mw;
  have_der_feedback_ = true;
}

void TwoAreaGrid::set_der_soc(const SocAssessment& assessment, const SocLimits& limits) {
  der_weight_charge_ =
      der_participation_weight(assessment.normalized, limits, /*toward_charging=*/true);
  der_weight_discharge_ =
      der_participation_weight(assessment.normalized, limits, /*toward_charging=*/false);
}

double TwoAreaGrid::der_participation_weight(double z, const SocLimits& limits,
                                             bool toward_charging) {
  double span = limits.max_normalized - limits.min_normalized;
  if (span <= 0.0) return 1.0;
  double ramp = 0.2 * span;
  double distance = toward_charging ? limits.max_normalized - z : z - limits.min_normalized;
  return std::clamp(distance / ramp, 0.0, 1.0);
}

void TwoAreaGrid::step(double solar_dev_mw, double load_dev_mw) {
  const double dt = cfg_.step_s;
  const std::size_t n = cfg_.participants.size();

  // Secondary control: every participant integrates -k * ACE of its area
  // into its injection setpoint. The DER gain is scheduled by fleet SoC.
  if (agc_enabled_) {
    const double ace_int = ace_mw(GridArea::Internal);
    const double ace_ext = ace_mw(GridArea::External);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& p = cfg_.participants[i];
      double ace = (p.area == GridArea::Internal) ? ace_int : ace_ext;
      double gain = p.agc_gain * cfg_.agc_rate_per_s;
      if (p.is_der) {
        // Positive ACE asks the fleet to charge more; the weight collapses
        // as the estimated SoC approaches the binding limit.
        gain *= (ace > 0.0) ? der_weight_charge_ : der_weight_discharge_;
      }
      state_.agc_delta_mw[i] -= gain * ace * dt;
      // Anti-windup: keep the integrated injection deviation inside the
      // participant's physical range. DER injection = -(consumption - sched).
      double lo = p.is_der ? p.scheduled_mw - p.max_mw : p.min_mw - p.scheduled_mw;
      double hi = p.is_der ? p.scheduled_mw - p.min_mw : p.max_mw - p.scheduled_mw;
      state_.agc_delta_mw[i] = std::clamp(state_.agc_delta_mw[i], lo, hi);
    }
  }

  // Governor-lagged droop responses.
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = cfg_.participants[i];
    double f = (p.area == GridArea::Internal) ? state_.freq_dev_int_hz
                                              : state_.freq_dev_ext_hz;
    double target = -p.droop_mw_per_hz * f;
    state_.governor_mw[i] += dt / cfg_.governor_time_const_s * (target - state_.governor_mw[i]);
  }

  // Realized injection deviations.
  double inj_int = solar_dev_mw - load_dev_mw;
  double inj_ext = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = cfg_.participants[i];
    double deviation = state_.governor_mw[i] + state_.agc_delta_mw[i];

    if (p.is_der) {
      state_.der_reference_mw = p.scheduled_mw - state_.agc_delta_mw[i] - state_.governor_mw[i];
      state_.der_reference_mw = std::clamp(state_.der_reference_mw, p.min_mw, p.max_mw);
      if (have_der_feedback_) {
        deviation = -(der_demand_mw_ - p.scheduled_mw);  // realized fleet load
      } else {
        deviation = p.scheduled_mw - state_.der_reference_mw;  // assume tracked
      }
      state_.output_mw[i] = p.scheduled_mw - deviation;  // consumption, for telemetry
    } else if (p.is_battery) {
      double setpoint = std::clamp(p.scheduled_mw + deviation, p.min_mw, p.max_mw);
      // Energy bookkeeping: positive output discharges the battery.
      double max_discharge = state_.battery_energy_mwh * 3600.0 / dt;
      double max_charge =
          (cfg_.battery_capacity_mwh - state_.battery_energy_mwh) * 3600.0 / dt;
      double output = std::clamp(setpoint, -max_charge, max_discharge);
      state_.battery_energy_mwh -= output * dt / 3600.0;
      state_.battery_energy_mwh =
          std::clamp(state_.battery_energy_mwh, 0.0, cfg_.battery_capacity_mwh);
      state_.output_mw[i] = output;
      deviation = output - p.scheduled_mw;
    } else {
      double output = std::clamp(p.scheduled_mw + deviation, p.min_mw, p.max_mw);
      state_.output_mw[i] = output;
      deviation = output - p.scheduled_mw;
    }

    if (p.area == GridArea::Internal) inj_int += deviation;
    else inj_ext += deviation;
  }

  // Swing dynamics and tie-line flow.
  double ddf_int = (inj_int - state_.tie_flow_dev_mw -
                    cfg_.damping_int_mw_per_hz * state_.freq_dev_int_hz) /
                   cfg_.inertia_int_mw_s_per_hz;
  double ddf_ext = (inj_ext + state_.tie_flow_dev_mw -
                    cfg_.damping_ext_mw_per_hz * state_.freq_dev_ext_hz) /
                   cfg_.inertia_ext_mw_s_per_hz;
  double dtie = cfg_.tie_stiffness_mw_per_hz_s *
                (state_.freq_dev_int_hz - state_.freq_dev_ext_hz);

  balance_residual_mw_ =
      (cfg_.inertia_int_mw_s_per_hz * ddf_int) -
      (inj_int - state_.tie_flow_dev_mw -
       cfg_.damping_int_mw_per_hz * state_.freq_dev_int_hz);

  state_.freq_dev_int_hz += dt * ddf_int;
  state_.freq_dev_ext_hz += dt * ddf_ext;
  state_.tie_flow_dev_mw += dt * dtie;
  time_s_ += dt;

  if (!std::isfinite(state_.freq_dev_int_hz) || !std::isfinite(state_.tie_flow_dev_mw))
    throw std::runtime_error("grid: integrator diverged (non-finite state)");
}

double TwoAreaGrid::droop_only_freq_dev_hz(double injection_step_mw) const {
  double stiffness = cfg_.damping_int_mw_per_hz + cfg_.damping_ext_mw_per_hz;
  for (const auto& p : cfg_.participants) stiffness += p.droop_mw_per_hz;
  return injection_step_mw / stiffness;
}

SolarProfile SolarProfile::parse(std::istream& is) {
  SolarProfile profile;
  std::string line;
  int row = 0;
  while (std::getline(is, line)) {
    ++row;
    // Strip comments and tolerate comma or whitespace separation.
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    for (char& c : line)
      if (c == ',' || c == ';' || c == '\t') c = ' ';
    std::istringstream ss(line);
    double t, mw;
    if (!(ss >> t)) continue;  // blank line
    if (!(ss >> mw)) {
      throw std::runtime_error("solar profile: row " + std::to_string(row) +
                               ": missing power column");
    }
    if (!profile.time_s.empty() && t <= profile.time_s.back()) {
      throw std::runtime_error("solar profile: row " + std::to_string(row) +
                               ": non-monotone timestamp");
    }
    profile.time_s.push_back(t);
    profile.power_mw.push_back(mw);
  }
  if (profile.time_s.size() < 2)
    throw std::runtime_error("solar profile: need at least two samples");
  return profile;
}

SolarProfile SolarProfile::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("solar profile: cannot open " + path);
  return parse(f);
}

double SolarProfile::at(double t) const {
  if (t <= time_s.front()) return power_mw.front();
  if (t >= time_s.back()) return power_mw.back();
  auto it = std::upper_bound(time_s.begin(), time_s.end(), t);
  std::size_t hi = static_cast<std::size_t>(it - time_s.begin());
  std::size_t lo = hi - 1;
  double frac = (t - time_s[lo]) / (time_s[hi] - time_s[lo]);
  return power_mw[lo] + frac * (power_mw[hi] - power_mw[lo]);
}

SolarProfile SolarProfile::resampled(double dt_s) const {
  if (!(dt_s > 0.0)) throw std::invalid_argument("solar profile: dt must be positive");
  SolarProfile out;
  double t0 = time_s.front(), t1 = time_s.back();
  for (double t = t0; t < t1; t += dt_s) {
    out.time_s.push_back(t);
    out.power_mw.push_back(at(t));
  }
  out.time_s.push_back(t1);  // endpoint preserved exactly
  out.power_mw.push_back(power_mw.back());
  return out;
}

double SolarProfile::trapezoid_energy_mwh() const {
  double sum = 0.0;
  for (std::size_t i = 1; i < time_s.size(); ++i) {
    sum += 0.5 * (power_mw[i] + power_mw[i - 1]) * (time_s[i] - time_s[i - 1]);
  }
  return sum / 3600.0;
}

}  // namespace pem
