#include "pem/coordinator.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pem {

Coordinator::Coordinator(const CoordinatorConfig& cfg, EventQueue& queue, Channel& channel)
    : cfg_(cfg), queue_(queue), channel_(channel) {
  recon_history_.emplace_back(0.0, reconstructed_demand_kw());
}

bool Coordinator::decide(const CoordinatorConfig& cfg, double error_kw,
                         PacketDirection dir, double rated_kw) {
  if (cfg.acceptance_rule == AcceptanceRule::PaperLiteral) {
    if (dir == PacketDirection::Charge) return error_kw + rated_kw <= 0.0;
    return error_kw < 0.0 && error_kw + rated_kw >= 0.0;
  }
  if (dir == PacketDirection::Charge) {
    // Zero error accepts nothing; with full-headroom the request must fit.
    if (cfg.threshold_policy == ThresholdPolicy::FullHeadroom)
      return error_kw >= rated_kw;
    return error_kw > 0.0;
  }
  return error_kw < 0.0 && error_kw + rated_kw >= -cfg.threshold_discharge_kw;
}

double Coordinator::feedback_demand_kw() const {
  switch (cfg_.feedback_policy) {
    case FeedbackPolicy::Measured:
      return has_measurement_ ? last_measured_kw_ : reconstructed_demand_kw();
    case FeedbackPolicy::Reconstructed:
      return reconstructed_demand_kw();
    case FeedbackPolicy::Blend:
      return reconstructed_demand_kw() + blend_offset_kw_;
  }
  return reconstructed_demand_kw();
}

void Coordinator::integrate_feedback(SimTime now) {
  if (now > integral_mark_) {
    feedback_integral_kw_s_ +=
        feedback_demand_kw() * sim_to_seconds(now - integral_mark_);
    integral_mark_ = now;
  }
}

double Coordinator::reconstruction_at(double t_s) const {
  // Last snapshot at or before t_s; history is append-only in time.
  double value = recon_history_.front().second;
  for (const auto& [t, v] : recon_history_) {
    if (t > t_s) break;
    value = v;
  }
  return value;
}

void Coordinator::set_reference_kw(double p_ref, SimTime now) {
  integrate_feedback(now);
  p_ref_kw_ = p_ref;
}

void Coordinator::on_message(const PacketMessage& msg, SimTime now) {
  switch (msg.kind) {
    case MessageKind::Request:
      handle_request(msg, now);
      break;
    case MessageKind::OptOutNotice:
      ++interval_.opt_outs;
      break;
    case MessageKind::DemandMeasurement:
      handle_measurement(msg, now);
      break;
    case MessageKind::Response:
      // A response cannot arrive at the coordinator; ignore.
      break;
  }
}

void Coordinator::handle_request(const PacketMessage& msg, SimTime now) {
  integrate_feedback(now);

  if (!(msg.rated_power_kw > 0.0) || !(msg.packet_length_s > 0.0) ||
      !std::isfinite(msg.rated_power_kw)) {
    ++diag_.malformed_requests;
    channel_.send_response(PacketMessage::response(false, msg.nonce), now);
    return;
  }

  ++diag_.total_requests;
  if (msg.direction == PacketDirection::Charge) ++interval_.requests_charge;
  else ++interval_.requests_discharge;

  bool accept = decide(cfg_, tracking_error_kw(), msg.direction, msg.rated_power_kw);
  if (accept) {
    std::uint64_t id = next_timer_id_++;
    timers_[id] = {msg.rated_power_kw, msg.direction};
    if (msg.direction == PacketDirection::Charge) {
      active_charge_kw_ += msg.rated_power_kw;
      ++interval_.accepts_charge;
    } else {
      active_discharge_kw_ += msg.rated_power_kw;
      ++interval_.accepts_discharge;
    }
    ++diag_.total_accepts;
    recon_history_.emplace_back(sim_to_seconds(now), reconstructed_demand_kw());
    while (recon_history_.size() > 1 &&
           recon_history_.front().first < sim_to_seconds(now) - 300.0) {
      recon_history_.pop_front();
    }
    queue_.schedule(now + seconds_to_sim(msg.packet_length_s), EventClass::CoordinatorTimer,
                    [this, id](SimTime t) { on_timer_expiry(id, t); });
  }
  channel_.send_response(PacketMessage::response(accept, msg.nonce), now);
}

void Coordinator::on_timer_expiry(std::uint64_t timer_id, SimTime now) {
  auto it = timers_.find(timer_id);
  if (it == timers_.end()) throw std::logic_error("coordinator: timer expired twice");
  integrate_feedback(now);
  const TimerEntry entry = it->second;
  timers_.erase(it);
  if (entry.direction == PacketDirection::Charge) {
    active_charge_kw_ -= entry.rated_kw;
    ++interval_.expiries_charge;
  } else {
    active_discharge_kw_ -= entry.rated_kw;
    ++interval_.expiries_discharge;
  }
  ++diag_.total_expiries;
  recon_history_.emplace_back(sim_to_seconds(now), reconstructed_demand_kw());
}

void Coordinator::handle_measurement(const PacketMessage& msg, SimTime now) {
  integrate_feedback(now);
  ++diag_.measurements_received;
  last_measured_kw_ = msg.measured_demand_kw;
  has_measurement_ = true;
  // Re-anchor the reconstruction against the value it had when this sample
  // was taken; timestamp_sent survives the channel for exactly this purpose.
  double residual = msg.measured_demand_kw - reconstruction_at(msg.timestamp_sent_s);
  blend_offset_kw_ += cfg_.blend_gain * (residual - blend_offset_kw_);
}

IntervalReport Coordinator::report_measurements(SimTime now) {
  integrate_feedback(now);
  IntervalReport out = interval_;
  double span_s = sim_to_seconds(now - interval_start_);
  out.demand_kw = span_s > 0.0 ? feedback_integral_kw_s_ / span_s : feedback_demand_kw();
  interval_ = IntervalReport{};
  feedback_integral_kw_s_ = 0.0;
  interval_start_ = now;
  integral_mark_ = now;
  return out;
}

}  // namespace pem
