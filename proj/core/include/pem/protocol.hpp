#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pem {

enum class MessageKind : int {
  Request = 0,
  Response = 1,
  OptOutNotice = 2,
  DemandMeasurement = 3,
};

enum class PacketDirection : int { Charge = 0, Discharge = 1 };

// Anonymous wire message. There is deliberately no device identity anywhere
// in the schema; request/response pairing uses a single-use random nonce.
struct PacketMessage {
  MessageKind kind = MessageKind::Request;
  PacketDirection direction = PacketDirection::Charge;  // Request only
  double rated_power_kw = 0.0;                          // Request only
  double packet_length_s = 0.0;                         // Request only
  bool accept = false;                                  // Response only
  double measured_demand_kw = 0.0;                      // DemandMeasurement only
  std::uint64_t nonce = 0;                              // Request/Response/OptOutNotice
  double timestamp_sent_s = 0.0;                        // channel bookkeeping

  static PacketMessage request(PacketDirection dir, double rated_kw,
                               double packet_s, std::uint64_t nonce) {
    PacketMessage m;
    m.kind = MessageKind::Request;
    m.direction = dir;
    m.rated_power_kw = rated_kw;
    m.packet_length_s = packet_s;
    m.nonce = nonce;
    return m;
  }
  static PacketMessage response(bool accept, std::uint64_t nonce) {
    PacketMessage m;
    m.kind = MessageKind::Response;
    m.accept = accept;
    m.nonce = nonce;
    return m;
  }
  static PacketMessage opt_out(std::uint64_t nonce) {
    PacketMessage m;
    m.kind = MessageKind::OptOutNotice;
    m.nonce = nonce;
    return m;
  }
  static PacketMessage demand_measurement(double demand_kw) {
    PacketMessage m;
    m.kind = MessageKind::DemandMeasurement;
    m.measured_demand_kw = demand_kw;
    return m;
  }

  bool operator==(const PacketMessage&) const = default;
};

struct DecodeError : std::runtime_error {
  explicit DecodeError(const std::string& what) : std::runtime_error(what) {}
};

// Length-prefixed, field-tagged text record: "<len>:<k=v;k=v;...>".
// Unknown fields are ignored so newer peers can add fields.
std::string encode(const PacketMessage& msg);

// Decodes one record. Throws DecodeError naming the offending field.
PacketMessage decode(std::string_view record);

// Stream framing: tries to cut one full record off the front of `buffer`.
// Returns the record (prefix included) or nullopt if more bytes are needed.
std::optional<std::string> frame_extract(std::string& buffer);

}  // namespace pem
