#include "semgrid/net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <stdexcept>

namespace semgrid {

namespace {

void set_nonblocking(int fd) {
  const int flags = fcntl(fd, F_GETFL, 0);
  if (flags < 0 || fcntl(fd, F_SETFL, flags | O_NONBLOCK) < 0)
    throw std::runtime_error(std::string("fcntl: ") + std::strerror(errno));
}

sockaddr_in resolve(const Endpoint& ep) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const auto host = ep.host.empty() ? std::string("0.0.0.0") : ep.host;
  if (const int rc = getaddrinfo(host.c_str(), nullptr, &hints, &res); rc != 0 || !res)
    throw std::runtime_error("cannot resolve '" + host + "': " + gai_strerror(rc));
  sockaddr_in addr{};
  std::memcpy(&addr, res->ai_addr, sizeof(addr));
  freeaddrinfo(res);
  addr.sin_port = htons(ep.port);
  return addr;
}

}  // namespace

Endpoint parse_endpoint(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos) throw std::invalid_argument("endpoint '" + text + "' is not host:port");
  Endpoint ep;
  ep.host = text.substr(0, colon);
  const auto port = text.substr(colon + 1);
  if (port.empty() || port.size() > 5 || port.find_first_not_of("0123456789") != std::string::npos)
    throw std::invalid_argument("endpoint '" + text + "' has an invalid port");
  const auto p = std::stoul(port);
  if (p > 65535) throw std::invalid_argument("endpoint '" + text + "' has an invalid port");
  ep.port = static_cast<std::uint16_t>(p);
  return ep;
}

int listen_tcp(const Endpoint& ep) {
  const auto addr = resolve(ep);
  const int fd = socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw std::runtime_error(std::string("socket: ") + std::strerror(errno));
  const int one = 1;
  setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  if (bind(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) < 0 || listen(fd, 16) < 0) {
    const std::string err = std::strerror(errno);
    ::close(fd);
    throw std::runtime_error("cannot listen on " + ep.host + ":" + std::to_string(ep.port) + ": " + err);
  }
  set_nonblocking(fd);
  return fd;
}

std::uint16_t local_port(int fd) {
  sockaddr_in addr{};
  socklen_t len = sizeof(addr);
  if (getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) < 0) return 0;
  return ntohs(addr.sin_port);
}

int connect_tcp(const Endpoint& ep) {
  const auto addr = resolve(ep);
  const int fd = socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw std::runtime_error(std::string("socket: ") + std::strerror(errno));
  if (connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) < 0) {
    const std::string err = std::strerror(errno);
    ::close(fd);
    throw std::runtime_error("cannot connect to " + ep.host + ":" + std::to_string(ep.port) + ": " + err);
  }
  const int one = 1;
  setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  set_nonblocking(fd);
  return fd;
}

int accept_tcp(int listen_fd) {
  const int fd = accept(listen_fd, nullptr, nullptr);
  if (fd < 0) return -1;
  const int one = 1;
  setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  set_nonblocking(fd);
  return fd;
}

void close_fd(int fd) {
  if (fd >= 0) ::close(fd);
}

std::uint64_t unix_time_us() {
  using namespace std::chrono;
  return static_cast<std::uint64_t>(duration_cast<microseconds>(system_clock::now().time_since_epoch()).count());
}

void shift_timestamps(Message& msg, std::int64_t delta_us) {
  auto shift = [delta_us](std::uint64_t& ts) { ts = static_cast<std::uint64_t>(static_cast<std::int64_t>(ts) + delta_us); };
  std::visit(
      [&](auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (!std::is_same_v<T, HelloMsg>) shift(m.timestamp_us);
        if constexpr (std::is_same_v<T, FeedbackMsg>)
          for (auto& p : m.persons) shift(p.timestamp_us);
      },
      msg);
}

Connection::Connection(int fd, std::size_t max_send_bytes) : fd_(fd), max_send_(max_send_bytes) {}

Connection::Connection(Connection&& other) noexcept
    : fd_(other.fd_),
      max_send_(other.max_send_),
      out_(std::move(other.out_)),
      out_pos_(other.out_pos_),
      decoder_(std::move(other.decoder_)),
      inbox_(std::move(other.inbox_)),
      dropped_(other.dropped_) {
  other.fd_ = -1;
}

Connection& Connection::operator=(Connection&& other) noexcept {
  if (this != &other) {
    close();
    fd_ = other.fd_;
    max_send_ = other.max_send_;
    out_ = std::move(other.out_);
    out_pos_ = other.out_pos_;
    decoder_ = std::move(other.decoder_);
    inbox_ = std::move(other.inbox_);
    dropped_ = other.dropped_;
    other.fd_ = -1;
  }
  return *this;
}

Connection::~Connection() { close(); }

void Connection::close() {
  close_fd(fd_);
  fd_ = -1;
}

bool Connection::send(const Message& msg) {
  const auto bytes = encode(msg);
  if (out_.size() - out_pos_ + bytes.size() > max_send_) {
    ++dropped_;
    return false;
  }
  if (out_pos_ > 0 && out_pos_ == out_.size()) {
    out_.clear();
    out_pos_ = 0;
  }
  out_.insert(out_.end(), bytes.begin(), bytes.end());
  return true;
}

bool Connection::flush() {
  while (fd_ >= 0 && out_pos_ < out_.size()) {
    const auto n = ::send(fd_, out_.data() + out_pos_, out_.size() - out_pos_, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EAGAIN || errno == EWOULDBLOCK) break;
      if (errno == EINTR) continue;
      return false;
    }
    out_pos_ += static_cast<std::size_t>(n);
  }
  if (out_pos_ == out_.size()) {
    out_.clear();
    out_pos_ = 0;
  }
  return fd_ >= 0;
}

bool Connection::receive() {
  std::uint8_t buf[65536];
  for (;;) {
    const auto n = ::recv(fd_, buf, sizeof(buf), 0);
    if (n == 0) return false;
    if (n < 0) {
      if (errno == EAGAIN || errno == EWOULDBLOCK) break;
      if (errno == EINTR) continue;
      return false;
    }
    decoder_.feed(std::span<const std::uint8_t>(buf, static_cast<std::size_t>(n)));
    while (auto m = decoder_.next()) inbox_.push_back(std::move(*m));
  }
  return true;
}

}  // namespace semgrid
