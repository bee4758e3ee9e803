#include "pem/channel.hpp"

#include <cmath>

namespace pem {

Channel::Channel(const ChannelConfig& cfg, EventQueue& queue, std::uint64_t seed)
    : cfg_(cfg), queue_(queue), rng_(seed) {}

double Channel::sample(const LatencyConfig& cfg) {
  double v = 0.0;
  switch (cfg.family) {
    case LatencyFamily::Constant:
      v = cfg.mean_s;
      break;
    case LatencyFamily::Normal: {
      std::normal_distribution<double> d(cfg.mean_s, cfg.sigma_s);
      v = d(rng_);
      break;
    }
    case LatencyFamily::Exponential: {
      if (cfg.mean_s <= 0.0) return 0.0;
      std::exponential_distribution<double> d(1.0 / cfg.mean_s);
      v = d(rng_);
      break;
    }
    case LatencyFamily::Lognormal: {
      // mean_s is the distribution mean; sigma_s the log-space std dev.
      double s = cfg.sigma_s;
      double mu = std::log(cfg.mean_s > 0 ? cfg.mean_s : 1e-12) - 0.5 * s * s;
      std::lognormal_distribution<double> d(mu, s);
      v = d(rng_);
      break;
    }
  }
  if (v < 0.0) {
    ++stats_.clamped;
    v = 0.0;
  }
  return v;
}

bool Channel::lost() {
  if (cfg_.loss_probability <= 0.0) return false;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return u(rng_) < cfg_.loss_probability;
}

double Channel::sample_latency(MessageKind kind) {
  if (kind == MessageKind::DemandMeasurement) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (cfg_.measurement_delay_probability > 0.0 &&
        u(rng_) < cfg_.measurement_delay_probability) {
      ++stats_.delayed_measurements;
      return sample(cfg_.measurement_delay);
    }
    return 0.0;
  }
  return sample(cfg_.base_latency) + sample(cfg_.input_delay);
}

Channel::DeviceSink Channel::claim_route(std::uint64_t nonce) {
  auto it = routes_.find(nonce);
  if (it == routes_.end()) return nullptr;
  DeviceSink sink = std::move(it->second);
  routes_.erase(it);
  return sink;
}

void Channel::deliver_encoded(const PacketMessage& msg, SimTime at, bool to_coordinator) {
  // Round-trip through the wire encoding so in-process delivery carries
  // exactly what a stream socket would.
  PacketMessage decoded = decode(encode(msg));
  if (hooks_.to_coordinator || hooks_.to_device) {
    if (to_coordinator) {
      queue_.schedule(at, EventClass::DeliveryToCoordinator, [this, decoded](SimTime) {
        ++stats_.delivered;
        if (hooks_.to_coordinator) hooks_.to_coordinator(decoded);
      });
    } else {
      queue_.schedule(at, EventClass::DeliveryToDevice, [this, decoded](SimTime) {
        ++stats_.delivered;
        if (hooks_.to_device) hooks_.to_device(decoded);
      });
    }
    return;
  }
  if (to_coordinator) {
    queue_.schedule(at, EventClass::DeliveryToCoordinator, [this, decoded](SimTime t) {
      ++stats_.delivered;
      if (coordinator_sink_) coordinator_sink_(decoded, t);
    });
  } else {
    queue_.schedule(at, EventClass::DeliveryToDevice, [this, decoded](SimTime t) {
      auto it = routes_.find(decoded.nonce);
      if (it == routes_.end()) {
        ++stats_.unroutable_responses;
        return;
      }
      DeviceSink sink = std::move(it->second);
      routes_.erase(it);
      ++stats_.delivered;
      sink(decoded, t);
    });
  }
}

void Channel::send_to_coordinator(PacketMessage msg, SimTime now, DeviceSink reply_to) {
  ++stats_.sent;
  msg.timestamp_sent_s = sim_to_seconds(now);
  if (msg.kind == MessageKind::Request && reply_to) {
    routes_[msg.nonce] = std::move(reply_to);
  }
  double latency = sample_latency(msg.kind);
  if (lost()) {
    ++stats_.dropped;
    return;
  }
  deliver_encoded(msg, now + seconds_to_sim(latency), /*to_coordinator=*/true);
}

void Channel::send_response(PacketMessage msg, SimTime now) {
  ++stats_.sent;
  msg.timestamp_sent_s = sim_to_seconds(now);
  double latency = sample_latency(msg.kind);
  if (lost()) {
    ++stats_.dropped;
    routes_.erase(msg.nonce);  // response lost: route dies with it
    return;
  }
  deliver_encoded(msg, now + seconds_to_sim(latency), /*to_coordinator=*/false);
}

void Channel::send_measurement(PacketMessage msg, SimTime now) {
  ++stats_.sent;
  msg.timestamp_sent_s = sim_to_seconds(now);
  double latency = sample_latency(MessageKind::DemandMeasurement);
  if (lost()) {
    ++stats_.dropped;
    return;
  }
  deliver_encoded(msg, now + seconds_to_sim(latency), /*to_coordinator=*/true);
}

}  // namespace pem
