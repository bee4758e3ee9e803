#include "pem/device.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace pem {

double DeviceParams::soc_energy_kj() const {
  if (device_class == DeviceClass::ElectricWaterHeater) {
    // kJ per degC of tank temperature.
    return kWaterSpecificHeatKjPerKgC * kWaterDensityKgPerL * tank_liters;
  }
  // kJ per percent of capacity.
  return capacity_kwh * 3600.0 / 100.0;
}

void DeviceParams::validate() const {
  auto fail = [](const char* msg) { throw std::invalid_argument(msg); };
  if (!(deadband_low < setpoint && setpoint < deadband_high))
    fail("device: setpoint must lie strictly inside the deadband");
  if (!(rated_charge_kw > 0.0)) fail("device: rated_charge_kw must be positive");
  if (device_class == DeviceClass::ElectricWaterHeater && rated_discharge_kw != 0.0)
    fail("device: water heaters cannot discharge");
  if (!(charge_eff > 0.0 && charge_eff <= 1.0)) fail("device: charge_eff out of (0,1]");
  if (!(discharge_eff > 0.0 && discharge_eff <= 1.0))
    fail("device: discharge_eff out of (0,1]");
  if (!(packet_charge_s > 0.0)) fail("device: packet_charge_s must be positive");
  if (!(packet_discharge_s > 0.0)) fail("device: packet_discharge_s must be positive");
  if (!(mean_request_rate_hz > 0.0)) fail("device: mean_request_rate_hz must be positive");
  if (device_class == DeviceClass::ElectricWaterHeater && !(tank_liters > 0.0))
    fail("device: tank_liters must be positive");
  if (device_class == DeviceClass::EnergyStorage && !(capacity_kwh > 0.0))
    fail("device: capacity_kwh must be positive");
  if (!(loss_time_const_s > 0.0)) fail("device: loss_time_const_s must be positive");
}

double DrawProcess::sample(double dt_s, Rng& rng) {
  double energy_kj = 0.0;
  if (params.pulse_rate_hz > 0.0) {
    std::poisson_distribution<int> arrivals(params.pulse_rate_hz * dt_s);
    int n = arrivals(rng);
    for (int i = 0; i < n; ++i) {
      double lo = params.pulse_mean_kj * (1.0 - params.pulse_spread);
      double hi = params.pulse_mean_kj * (1.0 + params.pulse_spread);
      double magnitude = params.pulse_mean_kj;
      if (hi > lo) {
        std::uniform_real_distribution<double> mag(lo, hi);
        magnitude = mag(rng);
      }
      if (params.pulse_duration_s <= dt_s) {
        energy_kj += magnitude;  // short pulse: lands entirely in this tick
      } else {
        active.push_back({params.pulse_duration_s,
                          magnitude / params.pulse_duration_s});
      }
    }
  }
  for (auto& pulse : active) {
    double take = std::min(dt_s, pulse.remaining_s);
    energy_kj += pulse.rate_kw * take;
    pulse.remaining_s -= take;
  }
  active.erase(std::remove_if(active.begin(), active.end(),
                              [](const ActivePulse& p) { return p.remaining_s <= 0.0; }),
               active.end());
  return energy_kj;
}

double DrawProcess::active_remaining_s() const {
  double total = 0.0;
  for (const auto& p : active) total += p.remaining_s;
  return total;
}

double request_rate(double soc, const DeviceParams& p, PacketDirection dir) {
  const double lo = p.deadband_low, hi = p.deadband_high, set = p.setpoint;
  if (dir == PacketDirection::Charge) {
    if (soc >= hi) return 0.0;
    if (soc <= lo) return std::numeric_limits<double>::infinity();
    return p.mean_request_rate_hz * ((hi - soc) / (soc - lo)) * ((set - lo) / (hi - set));
  }
  // Discharge mirrors the charge law: the rate grows toward the upper edge.
  if (soc <= lo) return 0.0;
  if (soc >= hi) return std::numeric_limits<double>::infinity();
  return p.mean_request_rate_hz * ((soc - lo) / (hi - soc)) * ((hi - set) / (set - lo));
}

double request_probability(double soc, const DeviceParams& p, double dt_s,
                           PacketDirection dir) {
  if (!(dt_s > 0.0)) throw std::invalid_argument("request_probability: dt must be positive");
  double rate = request_rate(soc, p, dir);
  if (std::isinf(rate)) return 1.0;
  return -std::expm1(-rate * dt_s);
}

double step_soc(double soc, int switch_state, const DeviceParams& p,
                double draw_kj, double dt_s) {
  if (!(dt_s > 0.0)) throw std::invalid_argument("step_soc: dt must be positive");
  if (!std::isfinite(soc)) throw std::invalid_argument("step_soc: non-finite SoC");

  if (p.device_class == DeviceClass::EnergyStorage) {
    // Lossless standing behaviour; charge/discharge scaled to percent of capacity.
    double eff = (switch_state >= 0) ? p.charge_eff : p.discharge_eff;
    double rated = (switch_state >= 0) ? p.rated_charge_kw : p.rated_discharge_kw;
    double rate_pct_per_s = eff * rated / p.soc_energy_kj();
    return soc + dt_s * rate_pct_per_s * switch_state;
  }

  const double thermal_mass = p.soc_energy_kj();  // kJ per degC
  double heat_c_per_s = p.charge_eff * p.rated_charge_kw / thermal_mass;
  // Standing losses decay the tank toward ambient.
  double loss_c_per_s = (soc - p.ambient_c) / p.loss_time_const_s;
  double next = soc + dt_s * (heat_c_per_s * std::max(switch_state, 0) - loss_c_per_s);
  next -= draw_kj / thermal_mass;
  return next;
}

namespace {

void enter_opt_out(DeviceState& state, DeviceMode which, TickResult& result,
                   Rng& rng, DeviceDiagnostics* diag) {
  state.mode = which;
  state.packet_time_remaining_s = 0.0;
  std::uint64_t nonce = rng();
  result.outbound.push_back(PacketMessage::opt_out(nonce));
  if (diag) {
    if (which == DeviceMode::OptOutLow) ++diag->opt_outs_low;
    else ++diag->opt_outs_high;
  }
}

}  // namespace

TickResult device_tick(DeviceState& state, const DeviceParams& params,
                       DrawProcess& draw, const PacketMessage* inbox,
                       double dt_s, Rng& rng, DeviceDiagnostics* diag) {
  if (!(dt_s > 0.0)) throw std::invalid_argument("device_tick: dt must be positive");
  TickResult result;

  // 1. Response / timeout handling.
  if (inbox && inbox->kind == MessageKind::Response) {
    if (state.pending.active && inbox->nonce == state.pending.nonce) {
      state.pending.active = false;
      if (inbox->accept && state.mode == DeviceMode::Standby) {
        if (state.pending.direction == PacketDirection::Charge) {
          state.mode = DeviceMode::Charge;
          state.packet_time_remaining_s = params.packet_charge_s;
        } else {
          state.mode = DeviceMode::Discharge;
          state.packet_time_remaining_s = params.packet_discharge_s;
        }
        if (diag) ++diag->accepts;
      } else if (inbox->accept) {
        // Opted out while the response was in flight; packet forfeited.
        if (diag) ++diag->responses_discarded;
      } else {
        if (diag) ++diag->rejects;
      }
    } else if (diag) {
      ++diag->responses_discarded;
    }
  }
  if (state.pending.active && state.local_clock_s >= state.pending.deadline_s) {
    state.pending.active = false;  // no answer: treat as rejection
    if (diag) ++diag->timeouts;
  }

  // 2. Opt-out transitions (QoS guard) on the current SoC.
  if (state.soc < params.deadband_low && state.mode != DeviceMode::OptOutLow) {
    enter_opt_out(state, DeviceMode::OptOutLow, result, rng, diag);
  } else if (state.soc > params.deadband_high && state.mode != DeviceMode::OptOutHigh) {
    enter_opt_out(state, DeviceMode::OptOutHigh, result, rng, diag);
  } else if (state.mode == DeviceMode::OptOutLow && state.soc >= params.setpoint) {
    state.mode = DeviceMode::Standby;  // recovered
  } else if (state.mode == DeviceMode::OptOutHigh && state.soc <= params.deadband_high) {
    state.mode = DeviceMode::Standby;
  }

  // 3. End-use disturbance.
  double draw_kj = 0.0;
  if (params.device_class == DeviceClass::ElectricWaterHeater) {
    draw_kj = draw.sample(dt_s, rng);
  }

  // 4. Packet request sampling: at most one request per tick, charge XOR
  //    discharge, only while idle in standby with no request in flight.
  if (state.mode == DeviceMode::Standby && !state.pending.active) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    bool want_charge = u(rng) < request_probability(state.soc, params, dt_s,
                                                    PacketDirection::Charge);
    bool want_discharge = false;
    if (params.can_discharge()) {
      want_discharge = u(rng) < request_probability(state.soc, params, dt_s,
                                                    PacketDirection::Discharge);
    }
    if (want_charge && want_discharge) {
      // Break the tie toward the side of need.
      want_charge = state.soc < params.setpoint;
      want_discharge = !want_charge;
    }
    if (want_charge || want_discharge) {
      PacketDirection dir = want_charge ? PacketDirection::Charge
                                        : PacketDirection::Discharge;
      double rated = want_charge ? params.rated_charge_kw : params.rated_discharge_kw;
      double packet_s = want_charge ? params.packet_charge_s : params.packet_discharge_s;
      std::uint64_t nonce = rng();
      result.outbound.push_back(PacketMessage::request(dir, rated, packet_s, nonce));
      state.pending = {true, dir, nonce, state.local_clock_s + params.response_timeout_s};
      if (diag) ++diag->requests_sent;
    }
  }

  // 5. Switch position follows the mode.
  switch (state.mode) {
    case DeviceMode::Charge:
    case DeviceMode::OptOutLow:
      state.switch_state = 1;
      break;
    case DeviceMode::Discharge:
      state.switch_state = -1;
      break;
    default:
      state.switch_state = 0;
      break;
  }

  // 6. Physics.
  state.soc = step_soc(state.soc, state.switch_state, params, draw_kj, dt_s);

  // 7. Packet timer.
  if (state.mode == DeviceMode::Charge || state.mode == DeviceMode::Discharge) {
    state.packet_time_remaining_s -= dt_s;
    if (state.packet_time_remaining_s <= 1e-9) {
      state.packet_time_remaining_s = 0.0;
      state.mode = DeviceMode::Standby;
    }
  }

  state.local_clock_s += dt_s;
  return result;
}

}  // namespace pem
