#pragma once

#include <cstdint>
#include <functional>
#include <unordered_map>

#include "pem/protocol.hpp"
#include "pem/rng.hpp"
#include "pem/sim_clock.hpp"

namespace pem {

enum class LatencyFamily : int { Constant = 0, Normal = 1, Exponential = 2, Lognormal = 3 };

struct LatencyConfig {
  LatencyFamily family = LatencyFamily::Constant;
  double mean_s = 0.0;
  double sigma_s = 0.0;  // Normal: std dev; Lognormal: sigma of log; unused otherwise
};

struct ChannelConfig {
  LatencyConfig base_latency;          // request/response transit
  LatencyConfig input_delay;           // extra authorization-to-actuation lag
  double loss_probability = 0.0;
  double measurement_delay_probability = 0.0;
  LatencyConfig measurement_delay;     // applies only when the gate fires
};

struct ChannelStats {
  std::uint64_t sent = 0;
  std::uint64_t dropped = 0;
  std::uint64_t delivered = 0;
  std::uint64_t clamped = 0;              // negative latency samples clamped to 0
  std::uint64_t delayed_measurements = 0;
  std::uint64_t unroutable_responses = 0;  // response whose nonce has no live route
};

// Single logical delivery scheduler between device actors and the
// coordinator. Messages pass through encode/decode even in-process, so the
// virtual path exercises exactly the bytes the socket path carries. FIFO is
// not guaranteed: sampled latencies may cross.
class Channel {
 public:
  using CoordinatorSink = std::function<void(const PacketMessage&, SimTime)>;
  using DeviceSink = std::function<void(const PacketMessage&, SimTime)>;

  Channel(const ChannelConfig& cfg, EventQueue& queue, std::uint64_t seed);

  void set_coordinator_sink(CoordinatorSink sink) { coordinator_sink_ = std::move(sink); }

  // Device -> coordinator. For requests, `reply_to` is retained under the
  // message nonce so the matching response can reach exactly this device.
  void send_to_coordinator(PacketMessage msg, SimTime now, DeviceSink reply_to = nullptr);

  // Coordinator -> device, routed by nonce. The route is single use.
  void send_response(PacketMessage msg, SimTime now);

  // Metering path, gated by the measurement-delay probability.
  void send_measurement(PacketMessage msg, SimTime now);

  // Real-time mode: at delivery time, hand the message to an external
  // transport (stream socket) instead of the in-process sinks.
  struct TransportHooks {
    std::function<void(const PacketMessage&)> to_coordinator;
    std::function<void(const PacketMessage&)> to_device;
  };
  void set_transport_hooks(TransportHooks hooks) { hooks_ = std::move(hooks); }

  // Takes ownership of the reply route for a nonce (external routing).
  DeviceSink claim_route(std::uint64_t nonce);

  const ChannelStats& stats() const { return stats_; }

  // Exposed for tests: one latency sample for the given kind, in seconds.
  double sample_latency(MessageKind kind);

 private:
  double sample(const LatencyConfig& cfg);
  bool lost();
  void deliver_encoded(const PacketMessage& msg, SimTime at, bool to_coordinator);

  ChannelConfig cfg_;
  EventQueue& queue_;
  Rng rng_;
  CoordinatorSink coordinator_sink_;
  TransportHooks hooks_;
  std::unordered_map<std::uint64_t, DeviceSink> routes_;
  ChannelStats stats_;
};

}  // namespace pem
