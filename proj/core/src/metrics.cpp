#include "pem/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace pem {

namespace {

void require_aligned(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw std::invalid_argument(std::string("metrics: misaligned series: ") + what);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

double rms_tracking_error_kw(const TrackingTrace& t, double from_s, double to_s) {
  require_aligned(t.t_s.size(), t.reference_kw.size(), "reference");
  require_aligned(t.t_s.size(), t.true_demand_kw.size(), "true demand");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < t.t_s.size(); ++i) {
    if (t.t_s[i] < from_s || t.t_s[i] > to_s) continue;
    double e = t.reference_kw[i] - t.true_demand_kw[i];
    sum += e * e;
    ++n;
  }
  return n ? std::sqrt(sum / n) : 0.0;
}

RunMetrics compute_metrics(const RunTraces& traces, double warmup_s) {
  RunMetrics m;
  const auto& t = traces.tracking;
  if (!t.t_s.empty()) {
    double end = t.t_s.back();
    m.rms_error_kw = rms_tracking_error_kw(t, warmup_s, end);
    m.rms_error_full_kw = rms_tracking_error_kw(t, 0.0, end);
    double ref_sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < t.t_s.size(); ++i) {
      if (t.t_s[i] < warmup_s) continue;
      ref_sum += t.reference_kw[i];
      ++n;
    }
    m.mean_reference_kw = n ? ref_sum / n : 0.0;
    m.rms_error_frac = m.mean_reference_kw > 0.0 ? m.rms_error_kw / m.mean_reference_kw : 0.0;
  }

  for (const auto& s : traces.soc) {
    GroupSocSummary g;
    g.name = s.group;
    if (!s.t_s.empty()) {
      g.final_mean = s.mean.back();
      g.min_p10 = *std::min_element(s.p10.begin(), s.p10.end());
      g.max_p90 = *std::max_element(s.p90.begin(), s.p90.end());
      double acc = 0.0;
      for (double f : s.frac_outside) acc += f;
      g.frac_time_outside = acc / s.frac_outside.size();
    }
    m.groups.push_back(g);
  }

  const auto& e = traces.estimator;
  for (std::size_t i = 0; i < e.t_s.size(); ++i) {
    if (e.t_s[i] < warmup_s) continue;
    m.estimator_max_abs_z_error =
        std::max(m.estimator_max_abs_z_error, std::abs(e.z_true[i] - e.z_hat[i]));
    m.estimator_max_tv = std::max(m.estimator_max_tv, e.tv_distance[i]);
  }

  const auto& g = traces.grid;
  for (std::size_t i = 0; i < g.t_s.size(); ++i) {
    m.grid_max_abs_freq_hz = std::max(m.grid_max_abs_freq_hz, std::abs(g.freq_dev_int_hz[i]));
  }
  if (!g.t_s.empty()) {
    m.grid_final_freq_hz = g.freq_dev_int_hz.back();
    m.grid_final_tie_mw = g.tie_flow_dev_mw.back();
  }

  for (const auto& r : traces.intervals.reports) {
    m.total_requests += r.requests_charge + r.requests_discharge;
    m.total_accepts += r.accepts_charge + r.accepts_discharge;
    m.total_opt_outs += r.opt_outs;
  }
  return m;
}

void write_csv_artifacts(const RunTraces& traces, const RunMetrics& metrics,
                         const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  auto open = [&](const char* name) {
    std::ofstream f(fs::path(out_dir) / name, std::ios::trunc);
    if (!f) throw std::runtime_error(std::string("cannot write ") + name);
    return f;
  };

  {
    auto f = open("tracking.csv");
    f << "t_s,reference_kw,true_demand_kw,feedback_kw,reconstructed_kw,measured_kw\n";
    const auto& t = traces.tracking;
    for (std::size_t i = 0; i < t.t_s.size(); ++i) {
      f << fmt(t.t_s[i]) << ',' << fmt(t.reference_kw[i]) << ',' << fmt(t.true_demand_kw[i])
        << ',' << fmt(t.feedback_kw[i]) << ',' << fmt(t.reconstructed_kw[i]) << ','
        << fmt(t.measured_kw[i]) << '\n';
    }
  }

  for (std::size_t k = 0; k < traces.soc.size(); ++k) {
    const auto& s = traces.soc[k];
    auto f = open(("soc_" + std::to_string(k) + ".csv").c_str());
    f << "t_s,mean,p10,p90,frac_outside\n";
    for (std::size_t i = 0; i < s.t_s.size(); ++i) {
      f << fmt(s.t_s[i]) << ',' << fmt(s.mean[i]) << ',' << fmt(s.p10[i]) << ','
        << fmt(s.p90[i]) << ',' << fmt(s.frac_outside[i]) << '\n';
    }
  }

  {
    const auto& e = traces.estimator;
    auto f = open("estimator.csv");
    f << "t_s,z_true,z_hat,tv_distance,innovation_demand_kw,projection_shift\n";
    for (std::size_t i = 0; i < e.t_s.size(); ++i) {
      f << fmt(e.t_s[i]) << ',' << fmt(e.z_true[i]) << ',' << fmt(e.z_hat[i]) << ','
        << fmt(e.tv_distance[i]) << ',' << fmt(e.innovation_demand_kw[i]) << ','
        << fmt(e.projection_shift[i]) << '\n';
    }
  }

  {
    const auto& g = traces.grid;
    auto f = open("grid.csv");
    f << "t_s,freq_dev_int_hz,freq_dev_ext_hz,tie_flow_dev_mw,ace_int_mw,der_reference_mw,"
         "battery_energy_mwh";
    for (const auto& name : g.participant_names) f << ',' << name << "_mw";
    f << '\n';
    for (std::size_t i = 0; i < g.t_s.size(); ++i) {
      f << fmt(g.t_s[i]) << ',' << fmt(g.freq_dev_int_hz[i]) << ',' << fmt(g.freq_dev_ext_hz[i])
        << ',' << fmt(g.tie_flow_dev_mw[i]) << ',' << fmt(g.ace_int_mw[i]) << ','
        << fmt(g.der_reference_mw[i]) << ',' << fmt(g.battery_energy_mwh[i]);
      for (const auto& col : g.output_mw) f << ',' << fmt(col[i]);
      f << '\n';
    }
  }

  {
    const auto& iv = traces.intervals;
    auto f = open("requests.csv");
    f << "t_s,demand_kw,requests_charge,requests_discharge,accepts_charge,accepts_discharge,"
         "opt_outs,expiries_charge,expiries_discharge\n";
    for (std::size_t i = 0; i < iv.t_s.size(); ++i) {
      const auto& r = iv.reports[i];
      f << fmt(iv.t_s[i]) << ',' << fmt(r.demand_kw) << ',' << r.requests_charge << ','
        << r.requests_discharge << ',' << r.accepts_charge << ',' << r.accepts_discharge << ','
        << r.opt_outs << ',' << r.expiries_charge << ',' << r.expiries_discharge << '\n';
    }
  }

  {
    auto f = open("metrics.csv");
    f << "metric,value\n";
    f << "rms_error_kw," << fmt(metrics.rms_error_kw) << '\n';
    f << "rms_error_full_kw," << fmt(metrics.rms_error_full_kw) << '\n';
    f << "rms_error_frac," << fmt(metrics.rms_error_frac) << '\n';
    f << "mean_reference_kw," << fmt(metrics.mean_reference_kw) << '\n';
    f << "baseline_kw," << fmt(metrics.baseline_kw) << '\n';
    f << "total_requests," << metrics.total_requests << '\n';
    f << "total_accepts," << metrics.total_accepts << '\n';
    f << "total_opt_outs," << metrics.total_opt_outs << '\n';
    for (const auto& g : metrics.groups) {
      f << "soc_final_mean_" << g.name << ',' << fmt(g.final_mean) << '\n';
      f << "soc_min_p10_" << g.name << ',' << fmt(g.min_p10) << '\n';
      f << "soc_max_p90_" << g.name << ',' << fmt(g.max_p90) << '\n';
      f << "soc_frac_time_outside_" << g.name << ',' << fmt(g.frac_time_outside) << '\n';
    }
    f << "estimator_max_abs_z_error," << fmt(metrics.estimator_max_abs_z_error) << '\n';
    f << "estimator_max_tv," << fmt(metrics.estimator_max_tv) << '\n';
    f << "grid_max_abs_freq_hz," << fmt(metrics.grid_max_abs_freq_hz) << '\n';
    f << "grid_final_freq_hz," << fmt(metrics.grid_final_freq_hz) << '\n';
    f << "grid_final_tie_mw," << fmt(metrics.grid_final_tie_mw) << '\n';
  }
}

RunTraces load_traces(const std::string& dir) {
  namespace fs = std::filesystem;
  RunTraces traces;
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };

  {
    std::ifstream f(fs::path(dir) / "tracking.csv");
    if (!f) throw std::runtime_error("load_traces: missing tracking.csv in " + dir);
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
      auto cells = split(line);
      if (cells.size() < 6) throw std::runtime_error("load_traces: short row in tracking.csv");
      auto& t = traces.tracking;
      t.t_s.push_back(std::stod(cells[0]));
      t.reference_kw.push_back(std::stod(cells[1]));
      t.true_demand_kw.push_back(std::stod(cells[2]));
      t.feedback_kw.push_back(std::stod(cells[3]));
      t.reconstructed_kw.push_back(std::stod(cells[4]));
      t.measured_kw.push_back(std::stod(cells[5]));
    }
  }

  std::ifstream f(fs::path(dir) / "estimator.csv");
  if (f) {
    std::string line;
    std::getline(f, line);
    while (std::getline(f, line)) {
      auto cells = split(line);
      if (cells.size() < 6) continue;
      auto& e = traces.estimator;
      e.t_s.push_back(std::stod(cells[0]));
      e.z_true.push_back(std::stod(cells[1]));
      e.z_hat.push_back(std::stod(cells[2]));
      e.tv_distance.push_back(std::stod(cells[3]));
      e.innovation_demand_kw.push_back(std::stod(cells[4]));
      e.projection_shift.push_back(std::stod(cells[5]));
    }
  }
  return traces;
}

}  // namespace pem
