#pragma once

#include "semgrid/protocol.hpp"

#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace semgrid {

struct Endpoint {
  std::string host;
  std::uint16_t port = 0;
};

/// "host:port"; throws std::invalid_argument.
Endpoint parse_endpoint(const std::string& text);

/// Non-blocking listening socket. Port 0 picks a free port; see local_port().
int listen_tcp(const Endpoint& ep);
std::uint16_t local_port(int fd);
/// Blocking connect, then switched to non-blocking. Throws std::runtime_error.
int connect_tcp(const Endpoint& ep);
/// Accepts one pending connection, or -1 when none is waiting.
int accept_tcp(int listen_fd);
void close_fd(int fd);

std::uint64_t unix_time_us();

/// Message timestamps moved by delta microseconds (feedback persons included).
void shift_timestamps(Message& msg, std::int64_t delta_us);

/// One framed byte stream over a non-blocking socket with a bounded send buffer.
class Connection {
 public:
  explicit Connection(int fd, std::size_t max_send_bytes = 8u << 20);
  Connection(const Connection&) = delete;
  Connection& operator=(const Connection&) = delete;
  Connection(Connection&& other) noexcept;
  Connection& operator=(Connection&& other) noexcept;
  ~Connection();

  int fd() const { return fd_; }
  bool open() const { return fd_ >= 0; }
  bool wants_write() const { return !out_.empty(); }

  /// Queues a frame. Returns false (and drops it) when the send buffer is full.
  bool send(const Message& msg);
  /// Writes as much as the socket takes. Returns false once the peer is gone.
  bool flush();
  /// Reads what is available. Returns false on EOF or error. Decoded messages go to inbox().
  bool receive();
  std::deque<Message>& inbox() { return inbox_; }
  std::size_t dropped() const { return dropped_; }
  void close();

 private:
  int fd_ = -1;
  std::size_t max_send_;
  std::vector<std::uint8_t> out_;
  std::size_t out_pos_ = 0;
  StreamDecoder decoder_;
  std::deque<Message> inbox_;
  std::size_t dropped_ = 0;
};

}  // namespace semgrid
