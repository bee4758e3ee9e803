#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pem/channel.hpp"
#include "pem/coordinator.hpp"
#include "pem/macromodel.hpp"
#include "pem/metrics.hpp"
#include "pem/scenario.hpp"

namespace pem {

struct RunResult {
  RunMetrics metrics;
  RunTraces traces;
  ChannelStats channel_stats;
  CoordinatorDiagnostics coordinator_diag;
  double baseline_kw = 0.0;  // sum of computed group baselines
  std::vector<double> group_baseline_kw;
  std::vector<double> group_beta_star;
};

// Executes a scenario end to end. Virtual mode is a pure function of
// (scenario, seed): reruns produce byte-identical CSV artifacts. When
// out_dir is non-empty the CSV artifacts and metrics are written there.
RunResult run_scenario(const Scenario& scenario, const std::string& out_dir = "");

// Piecewise-constant acceptance-proportion schedule.
struct BetaSchedulePoint {
  double t_s = 0.0;
  double beta_c = 0.0;
  double beta_d = 0.0;
};

struct FidelityResult {
  BinGrid grid;
  std::vector<double> t_s;
  std::vector<double> mc_mean_soc;     // device-population mean SoC
  std::vector<double> macro_mean_soc;  // macromodel mean SoC
  double max_abs_soc_diff = 0.0;       // SoC units
  double max_tv_distance = 0.0;        // bin-distribution gap at checkpoints
};

// Macromodel-fidelity experiment: a device Monte-Carlo fleet whose requests
// are thinned by the scripted acceptance proportions (no coordinator in the
// loop) against the macromodel under the same script.
FidelityResult run_fidelity(const FleetGroupSpec& group, int count, double duration_s,
                            std::span<const BetaSchedulePoint> schedule,
                            std::uint64_t seed, double macro_step_s = 60.0,
                            int bins_per_mode = 20);

}  // namespace pem
