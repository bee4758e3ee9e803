#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pem/coordinator.hpp"

namespace pem {

struct TrackingTrace {
  std::vector<double> t_s;
  std::vector<double> reference_kw;
  std::vector<double> true_demand_kw;
  std::vector<double> feedback_kw;       // value the coordinator decided on
  std::vector<double> reconstructed_kw;  // timer estimate
  std::vector<double> measured_kw;       // last metered value seen
};

struct SocTrace {
  std::string group;
  double deadband_low = 0.0;
  double deadband_high = 0.0;
  std::vector<double> t_s;
  std::vector<double> mean;
  std::vector<double> p10;
  std::vector<double> p90;
  std::vector<double> frac_outside;  // fraction of devices outside the deadband
};

struct EstimatorTrace {
  std::vector<double> t_s;
  std::vector<double> z_true;
  std::vector<double> z_hat;
  std::vector<double> tv_distance;  // estimated vs empirical bin distribution
  std::vector<double> innovation_demand_kw;
  std::vector<double> projection_shift;
};

struct GridTrace {
  std::vector<std::string> participant_names;
  std::vector<double> t_s;
  std::vector<double> freq_dev_int_hz;
  std::vector<double> freq_dev_ext_hz;
  std::vector<double> tie_flow_dev_mw;
  std::vector<double> ace_int_mw;
  std::vector<double> der_reference_mw;
  std::vector<double> battery_energy_mwh;
  std::vector<std::vector<double>> output_mw;  // [participant][row]
};

struct IntervalTrace {
  std::vector<double> t_s;
  std::vector<IntervalReport> reports;
};

struct RunTraces {
  TrackingTrace tracking;
  std::vector<SocTrace> soc;
  EstimatorTrace estimator;
  GridTrace grid;
  IntervalTrace intervals;
};

struct GroupSocSummary {
  std::string name;
  double final_mean = 0.0;
  double min_p10 = 0.0;
  double max_p90 = 0.0;
  double frac_time_outside = 0.0;  // time-average of frac_outside
};

struct RunMetrics {
  double rms_error_kw = 0.0;        // post-warmup window
  double rms_error_full_kw = 0.0;   // whole run, reported separately
  double rms_error_frac = 0.0;      // post-warmup RMS / mean reference
  double mean_reference_kw = 0.0;   // post-warmup
  double baseline_kw = 0.0;         // macromodel nominal power when computed
  std::uint64_t total_requests = 0;
  std::uint64_t total_accepts = 0;
  std::uint64_t total_opt_outs = 0;
  std::vector<GroupSocSummary> groups;
  double estimator_max_abs_z_error = 0.0;
  double estimator_max_tv = 0.0;
  double grid_max_abs_freq_hz = 0.0;
  double grid_final_freq_hz = 0.0;
  double grid_final_tie_mw = 0.0;
};

// Post-warmup RMS plus full-window RMS and the SoC/estimator/grid summaries.
// Throws when trace columns are misaligned.
RunMetrics compute_metrics(const RunTraces& traces, double warmup_s);

// RMS over an explicit window (acceptance helpers).
double rms_tracking_error_kw(const TrackingTrace& t, double from_s, double to_s);

void write_csv_artifacts(const RunTraces& traces, const RunMetrics& metrics,
                         const std::string& out_dir);

// Rebuilds tracking/estimator traces from a directory written by
// write_csv_artifacts (the `report` CLI verb).
RunTraces load_traces(const std::string& dir);

}  // namespace pem
