// pemsim: scenario runner for the packetized-energy co-simulation platform.
//
// Verbs:
//   validate  - parse and schema-check a scenario file
//   run       - execute a scenario, write CSV artifacts
//   baseline  - solve the minimum-power problem for a fleet group
//   limits    - stationary SoC limits of a fleet group
//   report    - recompute metrics from stored traces

#include <cinttypes>
#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "pem/harness.hpp"
#include "pem/macromodel.hpp"
#include "pem/metrics.hpp"
#include "pem/scenario.hpp"

namespace {

pem::Macromodel group_macromodel(const pem::Scenario& scn, std::size_t group_index) {
  if (group_index >= scn.fleet.size())
    throw std::runtime_error("scenario has no fleet group " + std::to_string(group_index));
  const auto& g = scn.fleet[group_index];
  pem::MacroParams mp;
  mp.device = g.mean_params();
  mp.mean_draw_kw = g.draw.mean_power_kw();
  mp.step_s = scn.estimator.step_s;
  mp.device_tick_s = scn.device_tick_s;
  mp.fleet_size = g.count;
  pem::BinGrid grid{scn.estimator.bins_per_mode, g.deadband_low, g.deadband_high};
  return pem::Macromodel(mp, grid);
}

void print_metrics(const pem::RunMetrics& m) {
  std::printf("rms_error_kw             %.3f\n", m.rms_error_kw);
  std::printf("rms_error_full_kw        %.3f\n", m.rms_error_full_kw);
  std::printf("rms_error_frac           %.5f\n", m.rms_error_frac);
  std::printf("mean_reference_kw        %.3f\n", m.mean_reference_kw);
  if (m.baseline_kw > 0.0) std::printf("baseline_kw              %.3f\n", m.baseline_kw);
  std::printf("total_requests           %" PRIu64 "\n", m.total_requests);
  std::printf("total_accepts            %" PRIu64 "\n", m.total_accepts);
  std::printf("total_opt_outs           %" PRIu64 "\n", m.total_opt_outs);
  for (const auto& g : m.groups) {
    std::printf("group %-12s soc final=%.3f p10_min=%.3f p90_max=%.3f outside=%.4f\n",
                g.name.c_str(), g.final_mean, g.min_p10, g.max_p90, g.frac_time_outside);
  }
  if (!m.groups.empty() && m.estimator_max_tv > 0.0) {
    std::printf("estimator_max_abs_z_err  %.4f\n", m.estimator_max_abs_z_error);
    std::printf("estimator_max_tv         %.4f\n", m.estimator_max_tv);
  }
  if (m.grid_max_abs_freq_hz > 0.0) {
    std::printf("grid_max_abs_freq_hz     %.5f\n", m.grid_max_abs_freq_hz);
    std::printf("grid_final_freq_hz       %.6f\n", m.grid_final_freq_hz);
    std::printf("grid_final_tie_mw        %.6f\n", m.grid_final_tie_mw);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"packetized-energy grid/DER co-simulation"};
  app.require_subcommand(1);

  std::string scenario_path;
  std::string out_dir;
  std::uint64_t seed_override = 0;
  bool has_seed = false;
  std::string time_mode;
  double speedup = -1.0;
  std::size_t group_index = 0;

  auto add_common = [&](CLI::App* cmd, bool needs_out) {
    cmd->add_option("--scenario", scenario_path, "scenario JSON file")->required();
    if (needs_out) cmd->add_option("--out", out_dir, "output directory for CSV artifacts");
    cmd->add_option("--seed", seed_override, "override the scenario seed")
        ->each([&](const std::string&) { has_seed = true; });
    cmd->add_option("--time-mode", time_mode, "virtual | real_time");
    cmd->add_option("--speedup", speedup, "pace virtual time at this multiple (0 = free run)");
  };

  auto* validate = app.add_subcommand("validate", "schema-check a scenario file");
  validate->add_option("--scenario", scenario_path, "scenario JSON file")->required();

  auto* run = app.add_subcommand("run", "execute a scenario");
  add_common(run, true);

  auto* baseline = app.add_subcommand("baseline", "solve the minimum-power problem");
  baseline->add_option("--scenario", scenario_path, "scenario JSON file")->required();
  baseline->add_option("--group", group_index, "fleet group index (default 0)");

  auto* limits = app.add_subcommand("limits", "stationary SoC limits of a fleet group");
  limits->add_option("--scenario", scenario_path, "scenario JSON file")->required();
  limits->add_option("--group", group_index, "fleet group index (default 0)");

  auto* report = app.add_subcommand("report", "recompute metrics from stored traces");
  report->add_option("--out", out_dir, "directory holding tracking.csv")->required();
  double warmup_s = 600.0;
  report->add_option("--warmup", warmup_s, "warmup seconds excluded from RMS");

  CLI11_PARSE(app, argc, argv);

  try {
    if (validate->parsed()) {
      pem::Scenario scn = pem::Scenario::load(scenario_path);
      std::printf("ok: scenario '%s' valid (%zu fleet groups, %.0f s)\n", scn.name.c_str(),
                  scn.fleet.size(), scn.duration_s);
      return 0;
    }
    if (run->parsed()) {
      pem::Scenario scn = pem::Scenario::load(scenario_path);
      if (has_seed) scn.seed = seed_override;
      if (!time_mode.empty())
        scn.time_mode = time_mode == "real_time" ? pem::TimeMode::RealTime
                                                 : pem::TimeMode::Virtual;
      if (speedup >= 0.0) scn.speedup = speedup;
      pem::RunResult result = pem::run_scenario(scn, out_dir);
      print_metrics(result.metrics);
      if (!out_dir.empty()) std::printf("artifacts written to %s\n", out_dir.c_str());
      return 0;
    }
    if (baseline->parsed()) {
      pem::Scenario scn = pem::Scenario::load(scenario_path);
      pem::Macromodel model = group_macromodel(scn, group_index);
      pem::BaselineResult res = model.baseline_optimization();
      std::printf("accept_charge*    %.4f\n", res.accept_charge);
      std::printf("accept_discharge* %.4f\n", res.accept_discharge);
      std::printf("nominal_power_kw  %.2f\n", res.nominal_power_kw);
      std::printf("stationary_mean   %.3f\n", model.mean_soc(res.pmf));
      return 0;
    }
    if (limits->parsed()) {
      pem::Scenario scn = pem::Scenario::load(scenario_path);
      pem::Macromodel model = group_macromodel(scn, group_index);
      pem::SocLimits lim = model.soc_limits();
      std::printf("max_soc %.3f (normalized %.4f)\n", lim.max_soc, lim.max_normalized);
      std::printf("min_soc %.3f (normalized %.4f)\n", lim.min_soc, lim.min_normalized);
      return 0;
    }
    if (report->parsed()) {
      pem::RunTraces traces = pem::load_traces(out_dir);
      pem::RunMetrics m = pem::compute_metrics(traces, warmup_s);
      print_metrics(m);
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
