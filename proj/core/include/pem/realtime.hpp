#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "pem/protocol.hpp"

namespace pem {

// Localhost TCP endpoints for real-time runs. The wire format is the
// protocol's length-prefixed record stream; IO runs on a background thread
// and decoded messages are drained from the owning loop via poll_inbox().

class StreamServer {
 public:
  ~StreamServer();

  // Binds 127.0.0.1:port (0 picks an ephemeral port); returns the bound port.
  std::uint16_t start(std::uint16_t port);
  void stop();

  // Decoded messages with the connection they arrived on.
  std::vector<std::pair<PacketMessage, int>> poll_inbox();
  void send(int connection_id, const PacketMessage& msg);

 private:
  void io_loop();

  int listen_fd_ = -1;
  std::thread io_thread_;
  std::atomic<bool> running_{false};
  std::mutex mutex_;
  std::vector<std::pair<PacketMessage, int>> inbox_;
  std::map<int, std::string> rx_buffers_;  // keyed by fd (== connection id)
};

class StreamClientPool {
 public:
  ~StreamClientPool();

  void connect(std::uint16_t port, int connections);
  void stop();

  std::size_t lanes() const { return fds_.size(); }
  void send(std::size_t lane, const PacketMessage& msg);
  std::vector<PacketMessage> poll_inbox();

 private:
  void io_loop();

  std::vector<int> fds_;
  std::thread io_thread_;
  std::atomic<bool> running_{false};
  std::mutex mutex_;
  std::vector<PacketMessage> inbox_;
  std::map<int, std::string> rx_buffers_;
};

}  // namespace pem
