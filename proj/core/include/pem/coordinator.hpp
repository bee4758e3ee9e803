#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <unordered_map>

#include "pem/channel.hpp"
#include "pem/protocol.hpp"
#include "pem/sim_clock.hpp"

namespace pem {

// Which demand value feeds the tracking error.
enum class FeedbackPolicy : int { Measured = 0, Reconstructed = 1, Blend = 2 };

// GoalConsistent accepts charge when demand is below the reference (drives
// the tracking error to zero). PaperLiteral keeps the printed inequality
// (charge accepted when error + rated <= 0) for side-by-side comparison.
enum class AcceptanceRule : int { GoalConsistent = 0, PaperLiteral = 1 };

// AnyPositive accepts a charge request whenever the error is nonnegative;
// FullHeadroom requires headroom of at least the request's rated power.
enum class ThresholdPolicy : int { AnyPositive = 0, FullHeadroom = 1 };

struct CoordinatorConfig {
  FeedbackPolicy feedback_policy = FeedbackPolicy::Blend;
  AcceptanceRule acceptance_rule = AcceptanceRule::GoalConsistent;
  ThresholdPolicy threshold_policy = ThresholdPolicy::AnyPositive;
  double threshold_discharge_kw = 0.0;  // slack below which discharge still accepted
  double uncontrolled_base_kw = 0.0;
  double blend_gain = 0.25;  // EMA gain for measurement re-anchoring
};

struct IntervalReport {
  double demand_kw = 0.0;  // time-averaged feedback demand over the interval
  std::uint64_t requests_charge = 0;
  std::uint64_t requests_discharge = 0;
  std::uint64_t accepts_charge = 0;
  std::uint64_t accepts_discharge = 0;
  std::uint64_t opt_outs = 0;
  std::uint64_t expiries_charge = 0;
  std::uint64_t expiries_discharge = 0;
};

struct CoordinatorDiagnostics {
  std::uint64_t malformed_requests = 0;
  std::uint64_t measurements_received = 0;
  std::uint64_t total_accepts = 0;
  std::uint64_t total_requests = 0;
  std::uint64_t total_expiries = 0;
};

// The PEM aggregator. All mutations arrive through the event queue, so the
// accept/reject decisions are strictly sequential: each decision sees the
// reconstruction updated by the previous one. The decision never reads any
// device identity; requests are anonymous by schema.
class Coordinator {
 public:
  Coordinator(const CoordinatorConfig& cfg, EventQueue& queue, Channel& channel);

  // Channel sink: requests, opt-out notices, demand measurements.
  void on_message(const PacketMessage& msg, SimTime now);

  void set_reference_kw(double p_ref, SimTime now);
  double reference_kw() const { return p_ref_kw_; }

  // base + sum(active charge timers) - sum(active discharge timers); exact.
  double reconstructed_demand_kw() const {
    return cfg_.uncontrolled_base_kw + active_charge_kw_ - active_discharge_kw_;
  }
  double last_measured_kw() const { return last_measured_kw_; }
  bool has_measurement() const { return has_measurement_; }

  double feedback_demand_kw() const;
  double tracking_error_kw() const { return p_ref_kw_ - feedback_demand_kw(); }

  std::size_t active_timer_count() const { return timers_.size(); }

  // Interval aggregates for the estimator; resets the counters.
  IntervalReport report_measurements(SimTime now);

  const CoordinatorDiagnostics& diagnostics() const { return diag_; }

  // Pure decision function, exposed so privacy/permutation properties can be
  // tested directly: depends only on the error, the request economics and
  // the configured rule.
  static bool decide(const CoordinatorConfig& cfg, double error_kw,
                     PacketDirection dir, double rated_kw);

 private:
  void handle_request(const PacketMessage& msg, SimTime now);
  void handle_measurement(const PacketMessage& msg, SimTime now);
  void on_timer_expiry(std::uint64_t timer_id, SimTime now);
  void integrate_feedback(SimTime now);
  double reconstruction_at(double t_s) const;

  CoordinatorConfig cfg_;
  EventQueue& queue_;
  Channel& channel_;

  double p_ref_kw_ = 0.0;
  double active_charge_kw_ = 0.0;
  double active_discharge_kw_ = 0.0;

  struct TimerEntry {
    double rated_kw;
    PacketDirection direction;
  };
  std::unordered_map<std::uint64_t, TimerEntry> timers_;
  std::uint64_t next_timer_id_ = 1;

  double last_measured_kw_ = 0.0;
  bool has_measurement_ = false;
  double blend_offset_kw_ = 0.0;

  // Recent reconstruction history for re-anchoring delayed measurements.
  std::deque<std::pair<double, double>> recon_history_;  // (t_s, recon_kw)

  IntervalReport interval_;
  double feedback_integral_kw_s_ = 0.0;
  SimTime integral_mark_ = 0;
  SimTime interval_start_ = 0;

  CoordinatorDiagnostics diag_;
};

}  // namespace pem
