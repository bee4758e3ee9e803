#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pem/channel.hpp"
#include "pem/coordinator.hpp"
#include "pem/device.hpp"
#include "pem/grid.hpp"

namespace pem {

enum class TimeMode : int { Virtual = 0, RealTime = 1 };
enum class InitPolicy : int { Setpoint = 0, UniformDeadband = 1, Stationary = 2 };

// One homogeneous group of devices; parameters are sampled per device from
// truncated normals around the group means.
struct FleetGroupSpec {
  std::string name = "group";
  int count = 0;
  DeviceClass device_class = DeviceClass::ElectricWaterHeater;
  double rated_kw_mean = 4.5;
  double rated_kw_sigma = 0.0;
  double tank_liters_mean = 275.0;
  double tank_liters_sigma = 0.0;
  double capacity_kwh_mean = 13.5;
  double capacity_kwh_sigma = 0.0;
  double charge_eff = 1.0;
  double discharge_eff = 1.0;
  double setpoint = 52.0;
  double deadband_low = 48.9;
  double deadband_high = 55.1;
  double packet_charge_s = 180.0;
  double packet_discharge_s = 180.0;
  double mean_request_rate_hz = 1.0 / 175.0;
  DrawParams draw;  // EWH end-use pulses
  InitPolicy init = InitPolicy::Stationary;

  DeviceParams mean_params() const;
};

struct ReferenceSpec {
  enum class Type : int { Constant = 0, Steps = 1, File = 2, GridAgc = 3 };
  Type type = Type::Constant;
  double constant_kw = 0.0;
  std::vector<double> step_levels_kw;
  double step_duration_s = 900.0;
  std::string file_path;
  // When set, reference values are deltas added to the fleet baseline
  // computed from the macromodel at startup.
  bool relative_to_baseline = false;
};

struct EstimatorSpec {
  bool enabled = false;
  int bins_per_mode = 20;
  double step_s = 60.0;
  double process_noise = 1e-6;
  double demand_noise_frac = 0.01;   // of nominal power, into Q1
  double count_noise_floor = 10.0;   // Poisson-ish variance floor for counts
  bool include_opt_outs = false;
};

struct GridSpec {
  bool enabled = false;
  GridConfig config = GridConfig::vermont_defaults();
  std::string solar_profile_path;
  double solar_step_mw = 0.0;  // synthetic alternative to a profile file
  double solar_step_at_s = 0.0;
};

struct MetricsSpec {
  double warmup_s = 600.0;
  double soc_sample_s = 10.0;
};

struct Scenario {
  std::string name = "scenario";
  double duration_s = 0.0;
  std::uint64_t seed = 1;
  TimeMode time_mode = TimeMode::Virtual;
  double speedup = 0.0;  // 0 = free-running virtual time; >=1 paces wall clock
  double device_tick_s = 1.0;
  double metering_interval_s = 1.0;
  std::vector<FleetGroupSpec> fleet;
  ReferenceSpec reference;
  ChannelConfig channel;
  CoordinatorConfig coordinator;
  EstimatorSpec estimator;
  GridSpec grid;
  MetricsSpec metrics;
  std::uint16_t realtime_port = 0;  // 0: pick automatically

  void validate() const;  // throws std::invalid_argument with field context

  static Scenario from_json_text(const std::string& text);
  static Scenario load(const std::string& path);
  std::string to_json_text() const;
};

}  // namespace pem
