#include "pem/scenario.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace pem {

using nlohmann::json;

DeviceParams FleetGroupSpec::mean_params() const {
  DeviceParams p;
  p.device_class = device_class;
  p.rated_charge_kw = rated_kw_mean;
  p.rated_discharge_kw =
      device_class == DeviceClass::EnergyStorage ? rated_kw_mean : 0.0;
  p.charge_eff = charge_eff;
  p.discharge_eff = discharge_eff;
  p.setpoint = setpoint;
  p.deadband_low = deadband_low;
  p.deadband_high = deadband_high;
  p.tank_liters = tank_liters_mean;
  p.capacity_kwh = capacity_kwh_mean;
  p.mean_request_rate_hz = mean_request_rate_hz;
  p.packet_charge_s = packet_charge_s;
  p.packet_discharge_s = packet_discharge_s;
  return p;
}

void Scenario::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("scenario: " + msg); };
  if (duration_s < 0.0) fail("duration_s must be non-negative");
  if (device_tick_s <= 0.0) fail("device_tick_s must be positive");
  if (metering_interval_s <= 0.0) fail("metering_interval_s must be positive");
  if (fleet.empty() && !grid.enabled) fail("no fleet groups and grid disabled");
  for (const auto& g : fleet) {
    if (g.count <= 0) fail("group '" + g.name + "': count must be positive");
    g.mean_params().validate();
    if (g.draw.pulse_rate_hz < 0.0) fail("group '" + g.name + "': negative pulse rate");
    if (g.draw.pulse_spread < 0.0 || g.draw.pulse_spread > 1.0)
      fail("group '" + g.name + "': pulse_spread outside [0,1]");
  }
  if (reference.type == ReferenceSpec::Type::Steps && reference.step_levels_kw.empty())
    fail("step reference without levels");
  if (reference.type == ReferenceSpec::Type::File && reference.file_path.empty())
    fail("file reference without file_path");
  auto probability = [&](double p, const char* what) {
    if (p < 0.0 || p > 1.0) fail(std::string(what) + " outside [0,1]");
  };
  probability(channel.loss_probability, "channel.loss_probability");
  probability(channel.measurement_delay_probability, "channel.measurement_delay_probability");
  if (estimator.enabled && estimator.bins_per_mode < 2)
    fail("estimator.bins_per_mode must be at least 2");
  if (speedup < 0.0) fail("speedup must be >= 0");
  if (time_mode == TimeMode::RealTime && speedup > 1.0)
    fail("real-time mode is paced at wall clock; use virtual mode for speedup");
}

namespace {

LatencyConfig latency_from_json(const json& j, const std::string& ctx) {
  LatencyConfig cfg;
  if (j.contains("family")) {
    std::string f = j["family"];
    if (f == "constant") cfg.family = LatencyFamily::Constant;
    else if (f == "normal") cfg.family = LatencyFamily::Normal;
    else if (f == "exponential") cfg.family = LatencyFamily::Exponential;
    else if (f == "lognormal") cfg.family = LatencyFamily::Lognormal;
    else throw std::invalid_argument("scenario: " + ctx + ".family unknown: " + f);
  }
  cfg.mean_s = j.value("mean_s", 0.0);
  cfg.sigma_s = j.value("sigma_s", 0.0);
  return cfg;
}

json latency_to_json(const LatencyConfig& cfg) {
  const char* fam = "constant";
  switch (cfg.family) {
    case LatencyFamily::Constant: fam = "constant"; break;
    case LatencyFamily::Normal: fam = "normal"; break;
    case LatencyFamily::Exponential: fam = "exponential"; break;
    case LatencyFamily::Lognormal: fam = "lognormal"; break;
  }
  return json{{"family", fam}, {"mean_s", cfg.mean_s}, {"sigma_s", cfg.sigma_s}};
}

FleetGroupSpec group_from_json(const json& j) {
  FleetGroupSpec g;
  g.name = j.value("name", std::string("group"));
  g.count = j.value("count", 0);
  std::string cls = j.value("class", std::string("EWH"));
  if (cls == "EWH") g.device_class = DeviceClass::ElectricWaterHeater;
  else if (cls == "ESS") g.device_class = DeviceClass::EnergyStorage;
  else throw std::invalid_argument("scenario: fleet class unknown: " + cls);

  auto dist = [&](const char* key, double& mean, double& sigma) {
    if (!j.contains(key)) return;
    const auto& v = j[key];
    if (v.is_number()) {
      mean = v.get<double>();
      sigma = 0.0;
    } else if (v.is_array() && v.size() == 2) {
      mean = v[0].get<double>();
      sigma = v[1].get<double>();
    } else {
      throw std::invalid_argument(std::string("scenario: fleet field '") + key +
                                  "' must be a number or [mean, sigma]");
    }
  };
  dist("rated_kw", g.rated_kw_mean, g.rated_kw_sigma);
  dist("tank_liters", g.tank_liters_mean, g.tank_liters_sigma);
  dist("capacity_kwh", g.capacity_kwh_mean, g.capacity_kwh_sigma);
  g.charge_eff = j.value("charge_eff", 1.0);
  g.discharge_eff = j.value("discharge_eff", 1.0);
  g.setpoint = j.value("setpoint", g.device_class == DeviceClass::EnergyStorage ? 75.0 : 52.0);
  g.deadband_low = j.value("deadband_low", g.device_class == DeviceClass::EnergyStorage ? 55.0 : 48.9);
  g.deadband_high = j.value("deadband_high", g.device_class == DeviceClass::EnergyStorage ? 95.0 : 55.1);
  g.packet_charge_s = j.value("packet_charge_s", 180.0);
  g.packet_discharge_s = j.value("packet_discharge_s", 180.0);
  g.mean_request_rate_hz = j.value("mean_request_rate_hz", 1.0 / 175.0);
  if (j.contains("draw")) {
    const auto& d = j["draw"];
    g.draw.pulse_rate_hz = d.value("pulse_rate_hz", 0.0);
    g.draw.pulse_mean_kj = d.value("pulse_mean_kj", 0.0);
    g.draw.pulse_spread = d.value("pulse_spread", 0.5);
    g.draw.pulse_duration_s = d.value("pulse_duration_s", 120.0);
  } else if (g.device_class == DeviceClass::ElectricWaterHeater) {
    // Default end-use: ~1.11 kW average draw per device.
    g.draw.pulse_rate_hz = 1.0 / 300.0;
    g.draw.pulse_mean_kj = 333.0;
    g.draw.pulse_spread = 0.5;
    g.draw.pulse_duration_s = 120.0;
  }
  std::string init = j.value("init", std::string("stationary"));
  if (init == "stationary") g.init = InitPolicy::Stationary;
  else if (init == "setpoint") g.init = InitPolicy::Setpoint;
  else if (init == "uniform") g.init = InitPolicy::UniformDeadband;
  else throw std::invalid_argument("scenario: fleet init unknown: " + init);
  return g;
}

json group_to_json(const FleetGroupSpec& g) {
  json j;
  j["name"] = g.name;
  j["count"] = g.count;
  j["class"] = g.device_class == DeviceClass::EnergyStorage ? "ESS" : "EWH";
  j["rated_kw"] = {g.rated_kw_mean, g.rated_kw_sigma};
  if (g.device_class == DeviceClass::ElectricWaterHeater)
    j["tank_liters"] = {g.tank_liters_mean, g.tank_liters_sigma};
  else
    j["capacity_kwh"] = {g.capacity_kwh_mean, g.capacity_kwh_sigma};
  j["charge_eff"] = g.charge_eff;
  j["discharge_eff"] = g.discharge_eff;
  j["setpoint"] = g.setpoint;
  j["deadband_low"] = g.deadband_low;
  j["deadband_high"] = g.deadband_high;
  j["packet_charge_s"] = g.packet_charge_s;
  j["packet_discharge_s"] = g.packet_discharge_s;
  j["mean_request_rate_hz"] = g.mean_request_rate_hz;
  j["draw"] = {{"pulse_rate_hz", g.draw.pulse_rate_hz},
               {"pulse_mean_kj", g.draw.pulse_mean_kj},
               {"pulse_spread", g.draw.pulse_spread},
               {"pulse_duration_s", g.draw.pulse_duration_s}};
  switch (g.init) {
    case InitPolicy::Stationary: j["init"] = "stationary"; break;
    case InitPolicy::Setpoint: j["init"] = "setpoint"; break;
    case InitPolicy::UniformDeadband: j["init"] = "uniform"; break;
  }
  return j;
}

}  // namespace

Scenario Scenario::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("scenario: JSON parse error: ") + e.what());
  }
  Scenario s;
  s.name = j.value("name", std::string("scenario"));
  s.duration_s = j.value("duration_s", 0.0);
  s.seed = j.value("seed", std::uint64_t{1});
  std::string mode = j.value("time_mode", std::string("virtual"));
  if (mode == "virtual") s.time_mode = TimeMode::Virtual;
  else if (mode == "real_time") s.time_mode = TimeMode::RealTime;
  else throw std::invalid_argument("scenario: time_mode unknown: " + mode);
  s.speedup = j.value("speedup", 0.0);
  s.device_tick_s = j.value("device_tick_s", 1.0);
  s.metering_interval_s = j.value("metering_interval_s", 1.0);
  s.realtime_port = j.value("realtime_port", 0);

  for (const auto& gj : j.value("fleet", json::array())) s.fleet.push_back(group_from_json(gj));

  if (j.contains("reference")) {
    const auto& r = j["reference"];
    std::string type = r.value("type", std::string("constant"));
    if (type == "constant") s.reference.type = ReferenceSpec::Type::Constant;
    else if (type == "steps") s.reference.type = ReferenceSpec::Type::Steps;
    else if (type == "file") s.reference.type = ReferenceSpec::Type::File;
    else if (type == "grid_agc") s.reference.type = ReferenceSpec::Type::GridAgc;
    else throw std::invalid_argument("scenario: reference.type unknown: " + type);
    s.reference.constant_kw = r.value("constant_kw", 0.0);
    if (r.contains("step_levels_kw"))
      s.reference.step_levels_kw = r["step_levels_kw"].get<std::vector<double>>();
    s.reference.step_duration_s = r.value("step_duration_s", 900.0);
    s.reference.file_path = r.value("file_path", std::string());
    s.reference.relative_to_baseline = r.value("relative_to_baseline", false);
  }

  if (j.contains("channel")) {
    const auto& c = j["channel"];
    if (c.contains("base_latency")) s.channel.base_latency = latency_from_json(c["base_latency"], "channel.base_latency");
    if (c.contains("input_delay")) s.channel.input_delay = latency_from_json(c["input_delay"], "channel.input_delay");
    s.channel.loss_probability = c.value("loss_probability", 0.0);
    s.channel.measurement_delay_probability = c.value("measurement_delay_probability", 0.0);
    if (c.contains("measurement_delay"))
      s.channel.measurement_delay = latency_from_json(c["measurement_delay"], "channel.measurement_delay");
  }

  if (j.contains("coordinator")) {
    const auto& c = j["coordinator"];
    std::string fb = c.value("feedback_policy", std::string("blend"));
    if (fb == "measured") s.coordinator.feedback_policy = FeedbackPolicy::Measured;
    else if (fb == "reconstructed") s.coordinator.feedback_policy = FeedbackPolicy::Reconstructed;
    else if (fb == "blend") s.coordinator.feedback_policy = FeedbackPolicy::Blend;
    else throw std::invalid_argument("scenario: coordinator.feedback_policy unknown: " + fb);
    std::string rule = c.value("acceptance_rule", std::string("goal_consistent"));
    if (rule == "goal_consistent") s.coordinator.acceptance_rule = AcceptanceRule::GoalConsistent;
    else if (rule == "paper_literal") s.coordinator.acceptance_rule = AcceptanceRule::PaperLiteral;
    else throw std::invalid_argument("scenario: coordinator.acceptance_rule unknown: " + rule);
    std::string thr = c.value("threshold_policy", std::string("any_positive"));
    if (thr == "any_positive") s.coordinator.threshold_policy = ThresholdPolicy::AnyPositive;
    else if (thr == "full_headroom") s.coordinator.threshold_policy = ThresholdPolicy::FullHeadroom;
    else throw std::invalid_argument("scenario: coordinator.threshold_policy unknown: " + thr);
    s.coordinator.threshold_discharge_kw = c.value("threshold_discharge_kw", 0.0);
    s.coordinator.uncontrolled_base_kw = c.value("uncontrolled_base_kw", 0.0);
    s.coordinator.blend_gain = c.value("blend_gain", 0.25);
  }

  if (j.contains("estimator")) {
    const auto& e = j["estimator"];
    s.estimator.enabled = e.value("enabled", true);
    s.estimator.bins_per_mode = e.value("bins_per_mode", 20);
    s.estimator.step_s = e.value("step_s", 60.0);
    s.estimator.process_noise = e.value("process_noise", 1e-6);
    s.estimator.demand_noise_frac = e.value("demand_noise_frac", 0.01);
    s.estimator.count_noise_floor = e.value("count_noise_floor", 10.0);
    s.estimator.include_opt_outs = e.value("include_opt_outs", false);
  }

  if (j.contains("grid")) {
    const auto& g = j["grid"];
    s.grid.enabled = g.value("enabled", true);
    auto& cfg = s.grid.config;
    cfg.step_s = g.value("step_s", 0.1);
    cfg.inertia_int_mw_s_per_hz = g.value("inertia_int", cfg.inertia_int_mw_s_per_hz);
    cfg.inertia_ext_mw_s_per_hz = g.value("inertia_ext", cfg.inertia_ext_mw_s_per_hz);
    cfg.damping_int_mw_per_hz = g.value("damping_int", cfg.damping_int_mw_per_hz);
    cfg.damping_ext_mw_per_hz = g.value("damping_ext", cfg.damping_ext_mw_per_hz);
    cfg.tie_stiffness_mw_per_hz_s = g.value("tie_stiffness", cfg.tie_stiffness_mw_per_hz_s);
    cfg.bias_int_mw_per_hz = g.value("bias_int", cfg.bias_int_mw_per_hz);
    cfg.bias_ext_mw_per_hz = g.value("bias_ext", cfg.bias_ext_mw_per_hz);
    cfg.governor_time_const_s = g.value("governor_time_const_s", cfg.governor_time_const_s);
    cfg.agc_rate_per_s = g.value("agc_rate_per_s", cfg.agc_rate_per_s);
    cfg.battery_capacity_mwh = g.value("battery_capacity_mwh", cfg.battery_capacity_mwh);
    cfg.battery_initial_mwh = g.value("battery_initial_mwh", cfg.battery_initial_mwh);
    if (g.contains("participants")) {
      cfg.participants.clear();
      for (const auto& pj : g["participants"]) {
        AgcParticipant p;
        p.name = pj.value("name", std::string("unit"));
        std::string area = pj.value("area", std::string("internal"));
        p.area = area == "external" ? GridArea::External : GridArea::Internal;
        p.droop_mw_per_hz = pj.value("droop_mw_per_hz", 0.0);
        p.agc_gain = pj.value("agc_gain", 0.0);
        p.scheduled_mw = pj.value("scheduled_mw", 0.0);
        p.min_mw = pj.value("min_mw", 0.0);
        p.max_mw = pj.value("max_mw", 0.0);
        p.is_der = pj.value("is_der", false);
        p.is_battery = pj.value("is_battery", false);
        cfg.participants.push_back(p);
      }
    }
    s.grid.solar_profile_path = g.value("solar_profile", std::string());
    s.grid.solar_step_mw = g.value("solar_step_mw", 0.0);
    s.grid.solar_step_at_s = g.value("solar_step_at_s", 0.0);
  }

  if (j.contains("metrics")) {
    s.metrics.warmup_s = j["metrics"].value("warmup_s", 600.0);
    s.metrics.soc_sample_s = j["metrics"].value("soc_sample_s", 10.0);
  }

  s.validate();
  return s;
}

Scenario Scenario::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("scenario: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return from_json_text(ss.str());
}

std::string Scenario::to_json_text() const {
  json j;
  j["name"] = name;
  j["duration_s"] = duration_s;
  j["seed"] = seed;
  j["time_mode"] = time_mode == TimeMode::RealTime ? "real_time" : "virtual";
  j["speedup"] = speedup;
  j["device_tick_s"] = device_tick_s;
  j["metering_interval_s"] = metering_interval_s;
  j["fleet"] = json::array();
  for (const auto& g : fleet) j["fleet"].push_back(group_to_json(g));
  const char* rtype = "constant";
  switch (reference.type) {
    case ReferenceSpec::Type::Constant: rtype = "constant"; break;
    case ReferenceSpec::Type::Steps: rtype = "steps"; break;
    case ReferenceSpec::Type::File: rtype = "file"; break;
    case ReferenceSpec::Type::GridAgc: rtype = "grid_agc"; break;
  }
  j["reference"] = {{"type", rtype},
                    {"constant_kw", reference.constant_kw},
                    {"step_levels_kw", reference.step_levels_kw},
                    {"step_duration_s", reference.step_duration_s},
                    {"file_path", reference.file_path},
                    {"relative_to_baseline", reference.relative_to_baseline}};
  j["channel"] = {{"base_latency", latency_to_json(channel.base_latency)},
                  {"input_delay", latency_to_json(channel.input_delay)},
                  {"loss_probability", channel.loss_probability},
                  {"measurement_delay_probability", channel.measurement_delay_probability},
                  {"measurement_delay", latency_to_json(channel.measurement_delay)}};
  const char* fb = "blend";
  if (coordinator.feedback_policy == FeedbackPolicy::Measured) fb = "measured";
  else if (coordinator.feedback_policy == FeedbackPolicy::Reconstructed) fb = "reconstructed";
  j["coordinator"] = {
      {"feedback_policy", fb},
      {"acceptance_rule", coordinator.acceptance_rule == AcceptanceRule::PaperLiteral
                              ? "paper_literal"
                              : "goal_consistent"},
      {"threshold_policy", coordinator.threshold_policy == ThresholdPolicy::FullHeadroom
                               ? "full_headroom"
                               : "any_positive"},
      {"threshold_discharge_kw", coordinator.threshold_discharge_kw},
      {"uncontrolled_base_kw", coordinator.uncontrolled_base_kw},
      {"blend_gain", coordinator.blend_gain}};
  j["estimator"] = {{"enabled", estimator.enabled},
                    {"bins_per_mode", estimator.bins_per_mode},
                    {"step_s", estimator.step_s},
                    {"process_noise", estimator.process_noise},
                    {"demand_noise_frac", estimator.demand_noise_frac},
                    {"count_noise_floor", estimator.count_noise_floor},
                    {"include_opt_outs", estimator.include_opt_outs}};
  j["metrics"] = {{"warmup_s", metrics.warmup_s}, {"soc_sample_s", metrics.soc_sample_s}};
  return j.dump(2);
}

}  // namespace pem
