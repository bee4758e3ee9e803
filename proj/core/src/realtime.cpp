#include "pem/realtime.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <functional>
#include <stdexcept>

namespace pem {

namespace {

void write_record(int fd, const PacketMessage& msg, std::mutex& mutex) {
  std::string bytes = encode(msg);
  std::lock_guard<std::mutex> lock(mutex);
  std::size_t off = 0;
  while (off < bytes.size()) {
    ssize_t n = ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return;  // peer gone; real-time mode tolerates channel teardown
    }
    off += static_cast<std::size_t>(n);
  }
}

void drain_fd(int fd, std::string& buffer,
              const std::function<void(PacketMessage&&)>& push, bool& closed) {
  char chunk[4096];
  for (;;) {
    ssize_t n = ::recv(fd, chunk, sizeof chunk, MSG_DONTWAIT);
    if (n > 0) {
      buffer.append(chunk, static_cast<std::size_t>(n));
      while (auto record = frame_extract(buffer)) {
        push(decode(*record));
      }
      continue;
    }
    if (n == 0) {
      closed = true;
      return;
    }
    if (errno == EAGAIN || errno == EWOULDBLOCK) return;
    if (errno == EINTR) continue;
    closed = true;
    return;
  }
}

}  // namespace

StreamServer::~StreamServer() { stop(); }

std::uint16_t StreamServer::start(std::uint16_t port) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw std::runtime_error("stream server: socket() failed");
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw std::runtime_error("stream server: bind failed");
  }
  if (::listen(listen_fd_, 16) != 0) {
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw std::runtime_error("stream server: listen failed");
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  running_ = true;
  io_thread_ = std::thread([this] { io_loop(); });
  return ntohs(addr.sin_port);
}

void StreamServer::stop() {
  if (!running_.exchange(false)) return;
  if (io_thread_.joinable()) io_thread_.join();
  if (listen_fd_ >= 0) ::close(listen_fd_);
  listen_fd_ = -1;
  for (auto& [fd, buf] : rx_buffers_) ::close(fd);
  rx_buffers_.clear();
}

void StreamServer::io_loop() {
  while (running_) {
    std::vector<pollfd> pfds;
    pfds.push_back({listen_fd_, POLLIN, 0});
    {
      std::lock_guard<std::mutex> lock(mutex_);
      for (const auto& [fd, buf] : rx_buffers_) pfds.push_back({fd, POLLIN, 0});
    }
    int ready = ::poll(pfds.data(), pfds.size(), 5);
    if (ready <= 0) continue;

    if (pfds[0].revents & POLLIN) {
      int conn = ::accept(listen_fd_, nullptr, nullptr);
      if (conn >= 0) {
        int one = 1;
        ::setsockopt(conn, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        std::lock_guard<std::mutex> lock(mutex_);
        rx_buffers_[conn] = {};
      }
    }
    for (std::size_t i = 1; i < pfds.size(); ++i) {
      if (!(pfds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      int fd = pfds[i].fd;
      bool closed = false;
      std::lock_guard<std::mutex> lock(mutex_);
      auto it = rx_buffers_.find(fd);
      if (it == rx_buffers_.end()) continue;
      drain_fd(fd, it->second,
               [this, fd](PacketMessage&& m) { inbox_.emplace_back(std::move(m), fd); },
               closed);
      if (closed) {
        ::close(fd);
        rx_buffers_.erase(it);
      }
    }
  }
}

std::vector<std::pair<PacketMessage, int>> StreamServer::poll_inbox() {
  std::lock_guard<std::mutex> lock(mutex_);
  auto out = std::move(inbox_);
  inbox_.clear();
  return out;
}

void StreamServer::send(int connection_id, const PacketMessage& msg) {
  write_record(connection_id, msg, mutex_);
}

StreamClientPool::~StreamClientPool() { stop(); }

void StreamClientPool::connect(std::uint16_t port, int connections) {
  for (int i = 0; i < connections; ++i) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw std::runtime_error("stream client: socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      ::close(fd);
      throw std::runtime_error("stream client: connect failed");
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    fds_.push_back(fd);
    rx_buffers_[fd] = {};
  }
  running_ = true;
  io_thread_ = std::thread([this] { io_loop(); });
}

void StreamClientPool::stop() {
  if (!running_.exchange(false)) return;
  if (io_thread_.joinable()) io_thread_.join();
  for (int fd : fds_) ::close(fd);
  fds_.clear();
  rx_buffers_.clear();
}

void StreamClientPool::io_loop() {
  while (running_) {
    std::vector<pollfd> pfds;
    for (int fd : fds_) pfds.push_back({fd, POLLIN, 0});
    if (pfds.empty()) return;
    int ready = ::poll(pfds.data(), pfds.size(), 5);
    if (ready <= 0) continue;
    for (auto& pfd : pfds) {
      if (!(pfd.revents & (POLLIN | POLLHUP | POLLERR))) continue;
      bool closed = false;
      std::lock_guard<std::mutex> lock(mutex_);
      auto it = rx_buffers_.find(pfd.fd);
      if (it == rx_buffers_.end()) continue;
      drain_fd(pfd.fd, it->second,
               [this](PacketMessage&& m) { inbox_.push_back(std::move(m)); }, closed);
      // Closed lanes are left in place; real-time teardown handles them.
    }
  }
}

void StreamClientPool::send(std::size_t lane, const PacketMessage& msg) {
  if (fds_.empty()) return;
  write_record(fds_[lane % fds_.size()], msg, mutex_);
}

std::vector<PacketMessage> StreamClientPool::poll_inbox() {
  std::lock_guard<std::mutex> lock(mutex_);
  auto out = std::move(inbox_);
  inbox_.clear();
  return out;
}

}  // namespace pem
