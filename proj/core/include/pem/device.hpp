#pragma once

#include <cstdint>
#include <vector>

#include "pem/protocol.hpp"
#include "pem/rng.hpp"

namespace pem {

enum class DeviceClass : int { ElectricWaterHeater = 0, EnergyStorage = 1 };

enum class DeviceMode : int {
  Standby = 0,
  Charge = 1,
  Discharge = 2,
  OptOutLow = 3,   // below deadband: forced charge until recovery
  OptOutHigh = 4,  // above deadband: forced idle
};

// Water properties near 50 C.
constexpr double kWaterSpecificHeatKjPerKgC = 4.186;
constexpr double kWaterDensityKgPerL = 0.990;

struct DeviceParams {
  DeviceClass device_class = DeviceClass::ElectricWaterHeater;
  double rated_charge_kw = 4.5;
  double rated_discharge_kw = 0.0;  // 0 for water heaters
  double charge_eff = 1.0;
  double discharge_eff = 1.0;
  double setpoint = 52.0;       // degC for EWH, percent for ESS
  double deadband_low = 48.9;
  double deadband_high = 55.1;
  double tank_liters = 275.0;     // EWH only
  double capacity_kwh = 13.5;     // ESS only
  double mean_request_rate_hz = 1.0 / 175.0;  // request-rate scale at setpoint
  double packet_charge_s = 180.0;
  double packet_discharge_s = 180.0;
  double ambient_c = 21.0;                      // EWH
  double loss_time_const_s = 150.0 * 3600.0;    // EWH standing losses
  double response_timeout_s = 2.0;  // pending request treated as rejected after this

  bool can_discharge() const { return rated_discharge_kw > 0.0; }
  // Thermal mass in kJ per degC (EWH) or stored kJ per SoC-percent (ESS).
  double soc_energy_kj() const;
  void validate() const;  // throws std::invalid_argument on bad parameters
};

struct PendingRequest {
  bool active = false;
  PacketDirection direction = PacketDirection::Charge;
  std::uint64_t nonce = 0;
  double deadline_s = 0.0;
};

struct DeviceState {
  double soc = 52.0;
  int switch_state = 0;  // -1 discharging, 0 idle, 1 charging
  DeviceMode mode = DeviceMode::Standby;
  double packet_time_remaining_s = 0.0;
  double local_clock_s = 0.0;
  PendingRequest pending;
};

struct DeviceDiagnostics {
  std::uint64_t requests_sent = 0;
  std::uint64_t accepts = 0;
  std::uint64_t rejects = 0;
  std::uint64_t timeouts = 0;
  std::uint64_t responses_discarded = 0;  // no pending request, or opted out meanwhile
  std::uint64_t opt_outs_low = 0;
  std::uint64_t opt_outs_high = 0;
};

// Customer end-use pulses (hot-water draws). Arrivals are Poisson at
// pulse_rate_hz; each pulse delivers its sampled energy at a constant rate
// over pulse_duration_s.
struct DrawParams {
  double pulse_rate_hz = 0.0;
  double pulse_mean_kj = 0.0;
  double pulse_spread = 0.5;  // magnitude uniform in mean*(1 +/- spread)
  double pulse_duration_s = 120.0;

  double mean_power_kw() const { return pulse_rate_hz * pulse_mean_kj; }
};

struct DrawProcess {
  DrawParams params;

  struct ActivePulse {
    double remaining_s = 0.0;
    double rate_kw = 0.0;
  };
  std::vector<ActivePulse> active;

  // Advances the process by dt and returns the energy (kJ) drawn during it.
  double sample(double dt_s, Rng& rng);
  double active_remaining_s() const;
};

// Request rate (1/s) from the cumulative-exponential request law. Returns
// +inf at/below the lower deadband edge for charge (mirrored for discharge).
double request_rate(double soc, const DeviceParams& params, PacketDirection dir);

// Probability of emitting a request within dt_s: 1 - exp(-rate * dt).
// Exactly 0 and 1 at the deadband edges.
double request_probability(double soc, const DeviceParams& params, double dt_s,
                           PacketDirection dir);

// One Euler step of the SoC difference equation. draw_kj is the end-use
// energy taken during the step (EWH only; ignored for ESS).
double step_soc(double soc, int switch_state, const DeviceParams& params,
                double draw_kj, double dt_s);

struct TickResult {
  // Messages to hand to the transport, in emission order.
  std::vector<PacketMessage> outbound;
};

// Advances one device by dt_s. The inbox holds at most the response to this
// device's pending request (nullptr when nothing arrived). Mutates state and
// draw in place; all randomness comes from rng.
TickResult device_tick(DeviceState& state, const DeviceParams& params,
                       DrawProcess& draw, const PacketMessage* inbox,
                       double dt_s, Rng& rng, DeviceDiagnostics* diag = nullptr);

// A device actor: state + params + its own RNG stream and one-slot inbox.
class Device {
 public:
  Device(DeviceParams params, DrawParams draw, std::uint64_t seed)
      : params_(std::move(params)), rng_(seed) {
    draw_.params = draw;
  }

  void set_initial_soc(double soc) { state_.soc = soc; }

  void deliver(const PacketMessage& msg) {
    inbox_ = msg;
    has_inbox_ = true;
  }

  TickResult tick(double dt_s) {
    const PacketMessage* in = has_inbox_ ? &inbox_ : nullptr;
    has_inbox_ = false;
    return device_tick(state_, params_, draw_, in, dt_s, rng_, &diag_);
  }

  // Grid-side power right now: +rated while charging (packet or opt-out),
  // -rated while discharging.
  double electrical_power_kw() const {
    if (state_.switch_state > 0) return params_.rated_charge_kw;
    if (state_.switch_state < 0) return -params_.rated_discharge_kw;
    return 0.0;
  }

  const DeviceState& state() const { return state_; }
  DeviceState& state() { return state_; }
  const DeviceParams& params() const { return params_; }
  const DeviceDiagnostics& diagnostics() const { return diag_; }
  DrawProcess& draw() { return draw_; }

 private:
  DeviceParams params_;
  DeviceState state_;
  DrawProcess draw_;
  DeviceDiagnostics diag_;
  Rng rng_;
  PacketMessage inbox_;
  bool has_inbox_ = false;
};

}  // namespace pem
