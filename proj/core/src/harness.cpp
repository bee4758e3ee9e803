#include "pem/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <thread>
#include <unordered_map>

#include "pem/device.hpp"
#include "pem/estimator.hpp"
#include "pem/grid.hpp"
#include "pem/realtime.hpp"
#include "pem/rng.hpp"

namespace pem {

namespace {

double truncated_normal(Rng& rng, double mean, double sigma, double floor) {
  if (sigma <= 0.0) return std::max(mean, floor);
  std::normal_distribution<double> d(mean, sigma);
  for (int i = 0; i < 64; ++i) {
    double v = d(rng);
    if (v > floor) return v;
  }
  return std::max(mean, floor);
}

struct FleetGroup {
  FleetGroupSpec spec;
  std::vector<Device> devices;
  std::unique_ptr<Macromodel> macromodel;
  double baseline_kw = 0.0;
  double beta_star = 0.0;
  bool has_baseline = false;
};

// Empirical (mode, bin) occupancy of a device population on the grid the
// estimator uses. Opt-out-low counts as charging, opt-out-high as standby.
Eigen::VectorXd empirical_distribution(const std::vector<Device>& devices,
                                       const BinGrid& grid) {
  Eigen::VectorXd hist = Eigen::VectorXd::Zero(grid.total_states());
  const int n = grid.bins_per_mode;
  for (const auto& d : devices) {
    double x = std::clamp(d.state().soc, grid.low, grid.high - 1e-12);
    int bin = std::clamp(static_cast<int>((x - grid.low) / grid.width()), 0, n - 1);
    int block;
    switch (d.state().mode) {
      case DeviceMode::Charge:
      case DeviceMode::OptOutLow:
        block = 0;
        break;
      case DeviceMode::Discharge:
        block = 2;
        break;
      default:
        block = 1;
        break;
    }
    hist[block * n + bin] += 1.0;
  }
  if (!devices.empty()) hist /= static_cast<double>(devices.size());
  return hist;
}

class SimulationRunner {
 public:
  SimulationRunner(const Scenario& scenario, std::string out_dir)
      : scn_(scenario), out_dir_(std::move(out_dir)) {}

  RunResult run();

 private:
  void build_fleet();
  void build_estimator();
  void build_grid();
  void schedule_events();
  void fleet_tick(SimTime now);
  void metering_tick(SimTime now);
  void reference_tick(SimTime now);
  void estimator_tick(SimTime now);
  void grid_tick(SimTime now);
  void soc_sample(SimTime now);
  double reference_value_kw(double t_s) const;
  double total_true_demand_kw() const;
  void run_loop_virtual();
  void run_loop_realtime();

  Scenario scn_;
  std::string out_dir_;
  EventQueue queue_;
  std::unique_ptr<Channel> channel_;
  std::unique_ptr<Coordinator> coordinator_;
  std::vector<FleetGroup> groups_;

  std::unique_ptr<Macromodel> est_model_;
  std::unique_ptr<FleetEstimator> ekf_;
  SocLimits est_limits_;

  std::unique_ptr<TwoAreaGrid> grid_;
  std::unique_ptr<SolarProfile> solar_;

  std::unique_ptr<SolarProfile> reference_series_;  // file-driven reference

  RunTraces traces_;
  double true_demand_kw_ = 0.0;
  double baseline_total_kw_ = 0.0;
  SimTime end_time_ = 0;

  // Real-time transport.
  std::unique_ptr<StreamServer> rt_server_;
  std::unique_ptr<StreamClientPool> rt_clients_;
  std::unordered_map<std::uint64_t, int> rt_nonce_conn_;
  std::size_t rt_lane_ = 0;
};

void SimulationRunner::build_fleet() {
  int global_index = 0;
  for (const auto& spec : scn_.fleet) {
    FleetGroup group;
    group.spec = spec;
    Rng param_rng = make_rng(scn_.seed, "params:" + spec.name);
    Rng init_rng = make_rng(scn_.seed, "init:" + spec.name);

    bool needs_baseline = spec.init == InitPolicy::Stationary ||
                          scn_.reference.relative_to_baseline ||
                          (scn_.estimator.enabled && &spec == &scn_.fleet.front());
    if (needs_baseline) {
      MacroParams mp;
      mp.device = spec.mean_params();
      mp.mean_draw_kw = spec.draw.mean_power_kw();
      mp.step_s = scn_.estimator.step_s;
      mp.device_tick_s = scn_.device_tick_s;
      mp.fleet_size = spec.count;
      BinGrid grid{scn_.estimator.bins_per_mode, spec.deadband_low, spec.deadband_high};
      group.macromodel = std::make_unique<Macromodel>(mp, grid);
      BaselineResult base = group.macromodel->baseline_optimization();
      group.baseline_kw = base.nominal_power_kw;
      group.beta_star = base.accept_charge;
      group.has_baseline = true;
      baseline_total_kw_ += base.nominal_power_kw;

      // Stationary init: sample device states from the baseline distribution.
      if (spec.init == InitPolicy::Stationary) {
        const Eigen::VectorXd& q = base.pmf;
        std::discrete_distribution<int> pick(q.data(), q.data() + q.size());
        const int n = grid.bins_per_mode;
        std::uniform_real_distribution<double> jitter(-0.5, 0.5);
        std::uniform_real_distribution<double> frac(0.0, 1.0);
        for (int i = 0; i < spec.count; ++i) {
          DeviceParams p = spec.mean_params();
          p.rated_charge_kw = truncated_normal(param_rng, spec.rated_kw_mean,
                                               spec.rated_kw_sigma, 0.1);
          if (spec.device_class == DeviceClass::EnergyStorage) {
            p.rated_discharge_kw = p.rated_charge_kw;
            p.capacity_kwh = truncated_normal(param_rng, spec.capacity_kwh_mean,
                                              spec.capacity_kwh_sigma, 0.5);
          } else {
            p.tank_liters = truncated_normal(param_rng, spec.tank_liters_mean,
                                             spec.tank_liters_sigma, 20.0);
          }
          Device dev(p, spec.draw, derive_seed(scn_.seed, global_index++));
          int state_idx = pick(init_rng);
          int bin = state_idx % n;
          int block = state_idx / n;
          dev.state().soc = grid.center(bin) + jitter(init_rng) * grid.width();
          if (block == 0) {
            dev.state().mode = DeviceMode::Charge;
            dev.state().packet_time_remaining_s = frac(init_rng) * p.packet_charge_s;
            dev.state().switch_state = 1;
          } else if (block == 2) {
            dev.state().mode = DeviceMode::Discharge;
            dev.state().packet_time_remaining_s = frac(init_rng) * p.packet_discharge_s;
            dev.state().switch_state = -1;
          }
          group.devices.push_back(std::move(dev));
        }
        groups_.push_back(std::move(group));
        continue;
      }
    }

    std::uniform_real_distribution<double> band(spec.deadband_low, spec.deadband_high);
    for (int i = 0; i < spec.count; ++i) {
      DeviceParams p = spec.mean_params();
      p.rated_charge_kw =
          truncated_normal(param_rng, spec.rated_kw_mean, spec.rated_kw_sigma, 0.1);
      if (spec.device_class == DeviceClass::EnergyStorage) {
        p.rated_discharge_kw = p.rated_charge_kw;
        p.capacity_kwh = truncated_normal(param_rng, spec.capacity_kwh_mean,
                                          spec.capacity_kwh_sigma, 0.5);
      } else {
        p.tank_liters =
            truncated_normal(param_rng, spec.tank_liters_mean, spec.tank_liters_sigma, 20.0);
      }
      Device dev(p, spec.draw, derive_seed(scn_.seed, global_index++));
      dev.state().soc =
          spec.init == InitPolicy::UniformDeadband ? band(init_rng) : spec.setpoint;
      group.devices.push_back(std::move(dev));
    }
    groups_.push_back(std::move(group));
  }

  for (const auto& g : groups_) {
    SocTrace trace;
    trace.group = g.spec.name;
    trace.deadband_low = g.spec.deadband_low;
    trace.deadband_high = g.spec.deadband_high;
    traces_.soc.push_back(std::move(trace));
  }
}

void SimulationRunner::build_estimator() {
  if (!scn_.estimator.enabled || groups_.empty()) return;
  FleetGroup& g0 = groups_.front();
  if (!g0.macromodel) {
    MacroParams mp;
    mp.device = g0.spec.mean_params();
    mp.mean_draw_kw = g0.spec.draw.mean_power_kw();
    mp.step_s = scn_.estimator.step_s;
    mp.device_tick_s = scn_.device_tick_s;
    mp.fleet_size = g0.spec.count;
    BinGrid grid{scn_.estimator.bins_per_mode, g0.spec.deadband_low, g0.spec.deadband_high};
    g0.macromodel = std::make_unique<Macromodel>(mp, grid);
  }
  MacroParams mp = g0.macromodel->params();
  est_model_ = std::make_unique<Macromodel>(mp, g0.macromodel->grid());
  est_limits_ = est_model_->soc_limits();

  Eigen::VectorXd q0;
  double nominal_kw = std::max(g0.baseline_kw, 1.0);
  double beta0 = g0.has_baseline ? g0.beta_star : 0.5;
  q0 = est_model_->stationary_distribution(beta0, 0.0);

  EstimatorConfig cfg;
  cfg.process_noise = scn_.estimator.process_noise;
  cfg.include_opt_outs = scn_.estimator.include_opt_outs;
  MacroOutput y0 = est_model_->output(q0, est_model_->steady_input(beta0, 0.0));
  Eigen::VectorXd q1(cfg.include_opt_outs ? 4 : 3);
  double demand_sigma = scn_.estimator.demand_noise_frac * nominal_kw;
  q1[0] = std::max(demand_sigma * demand_sigma, 1.0);
  q1[1] = std::max(scn_.estimator.count_noise_floor, y0.requests_charge);
  q1[2] = std::max(scn_.estimator.count_noise_floor, y0.requests_discharge);
  if (cfg.include_opt_outs) q1[3] = std::max(1.0, y0.opt_outs);
  cfg.measurement_noise_diag = q1;
  ekf_ = std::make_unique<FleetEstimator>(*est_model_, cfg, q0);
}

void SimulationRunner::build_grid() {
  if (!scn_.grid.enabled) return;
  grid_ = std::make_unique<TwoAreaGrid>(scn_.grid.config);
  if (!scn_.grid.solar_profile_path.empty()) {
    solar_ = std::make_unique<SolarProfile>(SolarProfile::load(scn_.grid.solar_profile_path));
  }
  traces_.grid.participant_names.clear();
  for (const auto& p : scn_.grid.config.participants)
    traces_.grid.participant_names.push_back(p.name);
  traces_.grid.output_mw.resize(scn_.grid.config.participants.size());
}

double SimulationRunner::reference_value_kw(double t_s) const {
  double base = scn_.reference.relative_to_baseline ? baseline_total_kw_ : 0.0;
  switch (scn_.reference.type) {
    case ReferenceSpec::Type::Constant:
      return base + scn_.reference.constant_kw;
    case ReferenceSpec::Type::Steps: {
      const auto& levels = scn_.reference.step_levels_kw;
      std::size_t idx = static_cast<std::size_t>(t_s / scn_.reference.step_duration_s);
      idx = std::min(idx, levels.size() - 1);
      return base + levels[idx];
    }
    case ReferenceSpec::Type::File:
      return base + reference_series_->at(t_s);
    case ReferenceSpec::Type::GridAgc:
      return grid_ ? grid_->state().der_reference_mw * 1000.0 : base;
  }
  return base;
}

double SimulationRunner::total_true_demand_kw() const {
  double kw = 0.0;
  for (const auto& g : groups_)
    for (const auto& d : g.devices) kw += d.electrical_power_kw();
  return kw + scn_.coordinator.uncontrolled_base_kw;
}

void SimulationRunner::fleet_tick(SimTime now) {
  for (auto& g : groups_) {
    for (auto& dev : g.devices) {
      Device* dp = &dev;
      TickResult result = dev.tick(scn_.device_tick_s);
      for (auto& msg : result.outbound) {
        if (msg.kind == MessageKind::Request) {
          channel_->send_to_coordinator(
              msg, now, [dp](const PacketMessage& m, SimTime) { dp->deliver(m); });
        } else {
          channel_->send_to_coordinator(msg, now);
        }
      }
    }
  }
  true_demand_kw_ = total_true_demand_kw();

  const double t = sim_to_seconds(now);
  auto& tr = traces_.tracking;
  tr.t_s.push_back(t);
  tr.reference_kw.push_back(coordinator_->reference_kw());
  tr.true_demand_kw.push_back(true_demand_kw_);
  tr.feedback_kw.push_back(coordinator_->feedback_demand_kw());
  tr.reconstructed_kw.push_back(coordinator_->reconstructed_demand_kw());
  tr.measured_kw.push_back(coordinator_->last_measured_kw());

  SimTime next = now + seconds_to_sim(scn_.device_tick_s);
  if (next <= end_time_)
    queue_.schedule(next, EventClass::DeviceTick, [this](SimTime t2) { fleet_tick(t2); });
}

void SimulationRunner::metering_tick(SimTime now) {
  channel_->send_measurement(PacketMessage::demand_measurement(true_demand_kw_), now);
  SimTime next = now + seconds_to_sim(scn_.metering_interval_s);
  if (next <= end_time_)
    queue_.schedule(next, EventClass::Harness, [this](SimTime t) { metering_tick(t); });
}

void SimulationRunner::reference_tick(SimTime now) {
  coordinator_->set_reference_kw(reference_value_kw(sim_to_seconds(now)), now);
  SimTime next = now + seconds_to_sim(scn_.device_tick_s);
  if (next <= end_time_)
    queue_.schedule(next, EventClass::Reference, [this](SimTime t) { reference_tick(t); });
}

void SimulationRunner::estimator_tick(SimTime now) {
  IntervalReport report = coordinator_->report_measurements(now);
  traces_.intervals.t_s.push_back(sim_to_seconds(now));
  traces_.intervals.reports.push_back(report);

  if (ekf_ && !groups_.empty()) {
    const FleetGroup& g0 = groups_.front();
    const int n = est_model_->grid().bins_per_mode;

    ControlInput u;
    u.accept_charge =
        report.requests_charge
            ? static_cast<double>(report.accepts_charge) / report.requests_charge
            : 0.0;
    u.accept_discharge =
        report.requests_discharge
            ? static_cast<double>(report.accepts_discharge) / report.requests_discharge
            : 0.0;
    // Expiry proportions from the coordinator's own timer bookkeeping.
    const Eigen::VectorXd& qhat = ekf_->predicted_pmf();
    double mass_c = qhat.segment(0, n).sum();
    double mass_d = qhat.segment(2 * n, n).sum();
    ControlInput steady = est_model_->steady_input(u.accept_charge, u.accept_discharge);
    double fleet = static_cast<double>(g0.spec.count);
    u.expire_charge = mass_c > 1e-9
                          ? std::clamp(report.expiries_charge / (fleet * mass_c), 0.0, 1.0)
                          : steady.expire_charge;
    u.expire_discharge =
        mass_d > 1e-9 ? std::clamp(report.expiries_discharge / (fleet * mass_d), 0.0, 1.0)
                      : steady.expire_discharge;

    Eigen::VectorXd y(scn_.estimator.include_opt_outs ? 4 : 3);
    y[0] = report.demand_kw;
    y[1] = static_cast<double>(report.requests_charge);
    y[2] = static_cast<double>(report.requests_discharge);
    if (scn_.estimator.include_opt_outs) y[3] = static_cast<double>(report.opt_outs);
    ekf_->step(u, y);

    std::vector<double> socs;
    socs.reserve(g0.devices.size());
    for (const auto& d : g0.devices) socs.push_back(d.state().soc);
    double z_true = fleet_soc(socs, g0.spec.deadband_low, g0.spec.deadband_high);
    Eigen::VectorXd emp = empirical_distribution(g0.devices, est_model_->grid());
    double tv = 0.5 * (emp - ekf_->filtered_pmf()).lpNorm<1>();

    auto& et = traces_.estimator;
    et.t_s.push_back(sim_to_seconds(now));
    et.z_true.push_back(z_true);
    et.z_hat.push_back(ekf_->estimated_soc());
    et.tv_distance.push_back(tv);
    et.innovation_demand_kw.push_back(ekf_->last_innovation()[0]);
    et.projection_shift.push_back(ekf_->last_projection_shift());

    if (grid_) grid_->set_der_soc(ekf_->assess(est_limits_), est_limits_);
  }

  SimTime next = now + seconds_to_sim(scn_.estimator.step_s);
  if (next <= end_time_)
    queue_.schedule(next, EventClass::Estimator, [this](SimTime t) { estimator_tick(t); });
}

void SimulationRunner::grid_tick(SimTime now) {
  const double t = sim_to_seconds(now);
  double solar_dev = 0.0;
  if (solar_) solar_dev = solar_->deviation_at(t);
  else if (scn_.grid.solar_step_mw != 0.0 && t >= scn_.grid.solar_step_at_s)
    solar_dev = scn_.grid.solar_step_mw;

  if (!groups_.empty()) grid_->set_der_demand_mw(true_demand_kw_ / 1000.0);
  grid_->step(solar_dev, 0.0);

  auto& gt = traces_.grid;
  gt.t_s.push_back(t);
  gt.freq_dev_int_hz.push_back(grid_->state().freq_dev_int_hz);
  gt.freq_dev_ext_hz.push_back(grid_->state().freq_dev_ext_hz);
  gt.tie_flow_dev_mw.push_back(grid_->state().tie_flow_dev_mw);
  gt.ace_int_mw.push_back(grid_->ace_mw(GridArea::Internal));
  gt.der_reference_mw.push_back(grid_->state().der_reference_mw);
  gt.battery_energy_mwh.push_back(grid_->state().battery_energy_mwh);
  for (std::size_t i = 0; i < gt.output_mw.size(); ++i)
    gt.output_mw[i].push_back(grid_->state().output_mw[i]);

  SimTime next = now + seconds_to_sim(scn_.grid.config.step_s);
  if (next <= end_time_)
    queue_.schedule(next, EventClass::Grid, [this](SimTime t2) { grid_tick(t2); });
}

void SimulationRunner::soc_sample(SimTime now) {
  for (std::size_t k = 0; k < groups_.size(); ++k) {
    const auto& g = groups_[k];
    std::vector<double> socs;
    socs.reserve(g.devices.size());
    int outside = 0;
    for (const auto& d : g.devices) {
      socs.push_back(d.state().soc);
      if (d.state().soc < g.spec.deadband_low || d.state().soc > g.spec.deadband_high)
        ++outside;
    }
    std::sort(socs.begin(), socs.end());
    auto quantile = [&](double p) {
      double idx = p * (socs.size() - 1);
      std::size_t lo = static_cast<std::size_t>(idx);
      std::size_t hi = std::min(lo + 1, socs.size() - 1);
      return socs[lo] + (idx - lo) * (socs[hi] - socs[lo]);
    };
    double mean = 0.0;
    for (double x : socs) mean += x;
    mean /= socs.size();
    auto& st = traces_.soc[k];
    st.t_s.push_back(sim_to_seconds(now));
    st.mean.push_back(mean);
    st.p10.push_back(quantile(0.10));
    st.p90.push_back(quantile(0.90));
    st.frac_outside.push_back(static_cast<double>(outside) / socs.size());
  }
  SimTime next = now + seconds_to_sim(scn_.metrics.soc_sample_s);
  if (next <= end_time_)
    queue_.schedule(next, EventClass::Harness, [this](SimTime t) { soc_sample(t); });
}

void SimulationRunner::schedule_events() {
  SimTime tick = seconds_to_sim(scn_.device_tick_s);
  if (!groups_.empty()) {
    queue_.schedule(tick, EventClass::Reference, [this](SimTime t) { reference_tick(t); });
    queue_.schedule(tick, EventClass::DeviceTick, [this](SimTime t) { fleet_tick(t); });
    queue_.schedule(seconds_to_sim(scn_.metering_interval_s), EventClass::Harness,
                    [this](SimTime t) { metering_tick(t); });
    queue_.schedule(seconds_to_sim(scn_.metrics.soc_sample_s), EventClass::Harness,
                    [this](SimTime t) { soc_sample(t); });
    queue_.schedule(seconds_to_sim(scn_.estimator.step_s), EventClass::Estimator,
                    [this](SimTime t) { estimator_tick(t); });
  }
  if (grid_)
    queue_.schedule(seconds_to_sim(scn_.grid.config.step_s), EventClass::Grid,
                    [this](SimTime t) { grid_tick(t); });
}

void SimulationRunner::run_loop_virtual() {
  const bool paced = scn_.speedup >= 1.0;
  auto wall_start = std::chrono::steady_clock::now();
  while (!queue_.empty() && queue_.next_time() <= end_time_) {
    if (paced) {
      auto deadline =
          wall_start + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                           std::chrono::duration<double>(
                               sim_to_seconds(queue_.next_time()) / scn_.speedup));
      std::this_thread::sleep_until(deadline);
    }
    queue_.run_next();
  }
}

void SimulationRunner::run_loop_realtime() {
  rt_server_ = std::make_unique<StreamServer>();
  std::uint16_t port = rt_server_->start(scn_.realtime_port);
  rt_clients_ = std::make_unique<StreamClientPool>();
  rt_clients_->connect(port, 4);

  Channel::TransportHooks hooks;
  hooks.to_coordinator = [this](const PacketMessage& msg) {
    rt_clients_->send(rt_lane_++, msg);
  };
  hooks.to_device = [this](const PacketMessage& msg) {
    auto it = rt_nonce_conn_.find(msg.nonce);
    if (it == rt_nonce_conn_.end()) return;
    int conn = it->second;
    rt_nonce_conn_.erase(it);
    rt_server_->send(conn, msg);
  };
  channel_->set_transport_hooks(std::move(hooks));

  auto wall_start = std::chrono::steady_clock::now();
  auto sim_now = [&] {
    std::chrono::duration<double> dt = std::chrono::steady_clock::now() - wall_start;
    return seconds_to_sim(dt.count());
  };
  auto drain = [&] {
    for (auto& [msg, conn] : rt_server_->poll_inbox()) {
      if (msg.kind == MessageKind::Request) rt_nonce_conn_[msg.nonce] = conn;
      coordinator_->on_message(msg, sim_now());
    }
    for (auto& msg : rt_clients_->poll_inbox()) {
      if (auto sink = channel_->claim_route(msg.nonce)) sink(msg, sim_now());
    }
  };

  while (!queue_.empty() && queue_.next_time() <= end_time_) {
    SimTime next = queue_.next_time();
    auto deadline = wall_start + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                     std::chrono::duration<double>(sim_to_seconds(next)));
    while (std::chrono::steady_clock::now() < deadline) {
      drain();
      std::this_thread::sleep_for(std::chrono::milliseconds(1));
    }
    drain();
    queue_.run_next();
  }
  drain();
  rt_clients_->stop();
  rt_server_->stop();
}

RunResult SimulationRunner::run() {
  scn_.validate();
  end_time_ = seconds_to_sim(scn_.duration_s);

  channel_ = std::make_unique<Channel>(scn_.channel, queue_, derive_seed(scn_.seed, "channel"));
  coordinator_ = std::make_unique<Coordinator>(scn_.coordinator, queue_, *channel_);
  channel_->set_coordinator_sink(
      [this](const PacketMessage& msg, SimTime now) { coordinator_->on_message(msg, now); });

  build_fleet();
  build_estimator();
  build_grid();

  if (scn_.reference.type == ReferenceSpec::Type::File)
    reference_series_ = std::make_unique<SolarProfile>(SolarProfile::load(scn_.reference.file_path));

  if (!groups_.empty()) {
    coordinator_->set_reference_kw(reference_value_kw(0.0), 0);
    true_demand_kw_ = total_true_demand_kw();
  }
  schedule_events();

  if (scn_.time_mode == TimeMode::RealTime) run_loop_realtime();
  else run_loop_virtual();

  RunResult result;
  result.traces = std::move(traces_);
  result.metrics = compute_metrics(result.traces, scn_.metrics.warmup_s);
  result.metrics.baseline_kw = baseline_total_kw_;
  result.channel_stats = channel_->stats();
  result.coordinator_diag = coordinator_->diagnostics();
  result.baseline_kw = baseline_total_kw_;
  for (const auto& g : groups_) {
    result.group_baseline_kw.push_back(g.baseline_kw);
    result.group_beta_star.push_back(g.beta_star);
  }
  if (!out_dir_.empty()) write_csv_artifacts(result.traces, result.metrics, out_dir_);
  return result;
}

}  // namespace

RunResult run_scenario(const Scenario& scenario, const std::string& out_dir) {
  SimulationRunner runner(scenario, out_dir);
  return runner.run();
}

FidelityResult run_fidelity(const FleetGroupSpec& group, int count, double duration_s,
                            std::span<const BetaSchedulePoint> schedule,
                            std::uint64_t seed, double macro_step_s, int bins_per_mode) {
  if (schedule.empty()) throw std::invalid_argument("run_fidelity: empty schedule");

  MacroParams mp;
  mp.device = group.mean_params();
  mp.mean_draw_kw = group.draw.mean_power_kw();
  mp.step_s = macro_step_s;
  mp.device_tick_s = 1.0;
  mp.fleet_size = count;
  BinGrid grid{bins_per_mode, group.deadband_low, group.deadband_high};
  Macromodel model(mp, grid);

  auto beta_at = [&](double t) {
    BetaSchedulePoint current = schedule.front();
    for (const auto& p : schedule) {
      if (p.t_s <= t) current = p;
      else break;
    }
    return current;
  };

  // Device fleet sampled from the stationary distribution of the opening
  // acceptance proportions; the macromodel starts from the same point.
  Eigen::VectorXd q0 =
      model.stationary_distribution(schedule.front().beta_c, schedule.front().beta_d);
  MacroRunner macro(model, q0);

  std::vector<Device> devices;
  devices.reserve(count);
  Rng init_rng = make_rng(seed, "fidelity-init");
  Rng accept_rng = make_rng(seed, "fidelity-accept");
  std::discrete_distribution<int> pick(q0.data(), q0.data() + q0.size());
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);
  std::uniform_real_distribution<double> frac(0.0, 1.0);
  const int n = grid.bins_per_mode;
  for (int i = 0; i < count; ++i) {
    DeviceParams p = group.mean_params();
    Device dev(p, group.draw, derive_seed(seed, i));
    int idx = pick(init_rng);
    int bin = idx % n, block = idx / n;
    dev.state().soc = grid.center(bin) + jitter(init_rng) * grid.width();
    if (block == 0) {
      dev.state().mode = DeviceMode::Charge;
      dev.state().packet_time_remaining_s = frac(init_rng) * p.packet_charge_s;
      dev.state().switch_state = 1;
    } else if (block == 2) {
      dev.state().mode = DeviceMode::Discharge;
      dev.state().packet_time_remaining_s = frac(init_rng) * p.packet_discharge_s;
      dev.state().switch_state = -1;
    }
    devices.push_back(std::move(dev));
  }

  FidelityResult result;
  result.grid = grid;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const int total_ticks = static_cast<int>(duration_s);
  const int ticks_per_macro = static_cast<int>(macro_step_s);

  auto record = [&](double t) {
    double mc_mean = 0.0;
    for (const auto& d : devices) mc_mean += d.state().soc;
    mc_mean /= devices.size();
    double macro_mean = model.mean_soc(macro.pmf());
    result.t_s.push_back(t);
    result.mc_mean_soc.push_back(mc_mean);
    result.macro_mean_soc.push_back(macro_mean);
    result.max_abs_soc_diff = std::max(result.max_abs_soc_diff, std::abs(mc_mean - macro_mean));
    Eigen::VectorXd emp = empirical_distribution(devices, grid);
    result.max_tv_distance =
        std::max(result.max_tv_distance, 0.5 * (emp - macro.pmf()).lpNorm<1>());
  };
  record(0.0);

  for (int tick = 1; tick <= total_ticks; ++tick) {
    double t = static_cast<double>(tick);
    BetaSchedulePoint beta = beta_at(t - 1.0);
    for (auto& dev : devices) {
      TickResult r = dev.tick(1.0);
      for (auto& msg : r.outbound) {
        if (msg.kind != MessageKind::Request) continue;
        double p = msg.direction == PacketDirection::Charge ? beta.beta_c : beta.beta_d;
        bool accept = u01(accept_rng) < p;
        dev.deliver(PacketMessage::response(accept, msg.nonce));
      }
    }
    if (tick % ticks_per_macro == 0) {
      macro.step(beta.beta_c, beta.beta_d);
      record(t);
    }
  }
  return result;
}

}  // namespace pem
