#include "pem/protocol.hpp"

#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <cstring>

namespace pem {

namespace {

const char* kind_tag(MessageKind k) {
  switch (k) {
    case MessageKind::Request: return "REQ";
    case MessageKind::Response: return "RSP";
    case MessageKind::OptOutNotice: return "OPT";
    case MessageKind::DemandMeasurement: return "DEM";
  }
  return "?";
}

// %.17g round-trips IEEE doubles exactly.
void append_double(std::string& out, const char* key, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s=%.17g;", key, v);
  out += buf;
}

double parse_double(std::string_view v, const char* field) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw DecodeError(std::string("bad numeric value in field '") + field + "'");
  return out;
}

std::uint64_t parse_u64_hex(std::string_view v, const char* field) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out, 16);
  if (ec != std::errc() || p != v.data() + v.size())
    throw DecodeError(std::string("bad hex value in field '") + field + "'");
  return out;
}

}  // namespace

std::string encode(const PacketMessage& msg) {
  std::string body;
  body.reserve(96);
  body += "k=";
  body += kind_tag(msg.kind);
  body += ';';
  switch (msg.kind) {
    case MessageKind::Request: {
      body += (msg.direction == PacketDirection::Charge) ? "d=c;" : "d=d;";
      append_double(body, "p", msg.rated_power_kw);
      append_double(body, "l", msg.packet_length_s);
      char buf[32];
      std::snprintf(buf, sizeof buf, "n=%" PRIx64 ";", msg.nonce);
      body += buf;
      break;
    }
    case MessageKind::Response: {
      body += msg.accept ? "a=1;" : "a=0;";
      char buf[32];
      std::snprintf(buf, sizeof buf, "n=%" PRIx64 ";", msg.nonce);
      body += buf;
      break;
    }
    case MessageKind::OptOutNotice: {
      char buf[32];
      std::snprintf(buf, sizeof buf, "n=%" PRIx64 ";", msg.nonce);
      body += buf;
      break;
    }
    case MessageKind::DemandMeasurement: {
      append_double(body, "m", msg.measured_demand_kw);
      break;
    }
  }
  append_double(body, "t", msg.timestamp_sent_s);

  std::string out = std::to_string(body.size());
  out += ':';
  out += body;
  return out;
}

PacketMessage decode(std::string_view record) {
  auto colon = record.find(':');
  if (colon == std::string_view::npos)
    throw DecodeError("missing length prefix");
  std::size_t len = 0;
  {
    auto head = record.substr(0, colon);
    auto [p, ec] = std::from_chars(head.data(), head.data() + head.size(), len);
    if (ec != std::errc() || p != head.data() + head.size())
      throw DecodeError("bad length prefix");
  }
  std::string_view body = record.substr(colon + 1);
  if (body.size() < len) throw DecodeError("truncated record");
  body = body.substr(0, len);

  PacketMessage msg;
  bool saw_kind = false, saw_nonce = false, saw_accept = false;
  bool saw_dir = false, saw_power = false, saw_len = false, saw_meas = false;

  std::size_t pos = 0;
  while (pos < body.size()) {
    auto semi = body.find(';', pos);
    if (semi == std::string_view::npos)
      throw DecodeError("unterminated field near end of record");
    std::string_view field = body.substr(pos, semi - pos);
    pos = semi + 1;
    if (field.empty()) continue;
    auto eq = field.find('=');
    if (eq == std::string_view::npos)
      throw DecodeError("field without '=' separator");
    std::string_view key = field.substr(0, eq);
    std::string_view val = field.substr(eq + 1);

    if (key == "k") {
      saw_kind = true;
      if (val == "REQ") msg.kind = MessageKind::Request;
      else if (val == "RSP") msg.kind = MessageKind::Response;
      else if (val == "OPT") msg.kind = MessageKind::OptOutNotice;
      else if (val == "DEM") msg.kind = MessageKind::DemandMeasurement;
      else throw DecodeError("unknown message kind in field 'k'");
    } else if (key == "d") {
      saw_dir = true;
      if (val == "c") msg.direction = PacketDirection::Charge;
      else if (val == "d") msg.direction = PacketDirection::Discharge;
      else throw DecodeError("unknown direction in field 'd'");
    } else if (key == "p") {
      saw_power = true;
      msg.rated_power_kw = parse_double(val, "p");
    } else if (key == "l") {
      saw_len = true;
      msg.packet_length_s = parse_double(val, "l");
    } else if (key == "a") {
      saw_accept = true;
      if (val == "1") msg.accept = true;
      else if (val == "0") msg.accept = false;
      else throw DecodeError("bad boolean in field 'a'");
    } else if (key == "m") {
      saw_meas = true;
      msg.measured_demand_kw = parse_double(val, "m");
    } else if (key == "n") {
      saw_nonce = true;
      msg.nonce = parse_u64_hex(val, "n");
    } else if (key == "t") {
      msg.timestamp_sent_s = parse_double(val, "t");
    }
    // unknown keys ignored for forward compatibility
  }

  if (!saw_kind) throw DecodeError("missing field 'k'");
  switch (msg.kind) {
    case MessageKind::Request:
      if (!saw_dir) throw DecodeError("missing field 'd'");
      if (!saw_power) throw DecodeError("missing field 'p'");
      if (!saw_len) throw DecodeError("missing field 'l'");
      if (!saw_nonce) throw DecodeError("missing field 'n'");
      break;
    case MessageKind::Response:
      if (!saw_accept) throw DecodeError("missing field 'a'");
      if (!saw_nonce) throw DecodeError("missing field 'n'");
      break;
    case MessageKind::OptOutNotice:
      if (!saw_nonce) throw DecodeError("missing field 'n'");
      break;
    case MessageKind::DemandMeasurement:
      if (!saw_meas) throw DecodeError("missing field 'm'");
      break;
  }
  return msg;
}

std::optional<std::string> frame_extract(std::string& buffer) {
  auto colon = buffer.find(':');
  if (colon == std::string::npos) {
    if (buffer.size() > 24) throw DecodeError("bad length prefix");
    return std::nullopt;  // prefix not complete yet
  }
  std::size_t len = 0;
  {
    auto [p, ec] = std::from_chars(buffer.data(), buffer.data() + colon, len);
    if (ec != std::errc() || p != buffer.data() + colon)
      throw DecodeError("bad length prefix");
  }
  std::size_t total = colon + 1 + len;
  if (buffer.size() < total) return std::nullopt;
  std::string record = buffer.substr(0, total);
  buffer.erase(0, total);
  return record;
}

}  // namespace pem
