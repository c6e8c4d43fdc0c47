#pragma once

// Blocking-with-deadline TCP helpers over POSIX sockets.

#include <cerrno>
#include <chrono>
#include <cstring>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include "ami/error.hpp"
#include "ami/net/frame.hpp"

namespace ami::net {

using Clock = std::chrono::steady_clock;
using Millis = std::chrono::milliseconds;

inline constexpr Millis kDefaultTimeout{10'000};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

/// Parses "host:port"; a bare ":port" or "port" binds to 127.0.0.1.
inline Endpoint parse_endpoint(const std::string& text) {
  const auto colon = text.rfind(':');
  Endpoint e;
  std::string port_text = text;
  if (colon != std::string::npos) {
    if (colon > 0) e.host = text.substr(0, colon);
    port_text = text.substr(colon + 1);
  }
  try {
    std::size_t used = 0;
    const long port = std::stol(port_text, &used);
    if (used != port_text.size() || port < 0 || port > 65535) throw std::out_of_range("port");
    e.port = static_cast<std::uint16_t>(port);
  } catch (const std::logic_error&) {
    fail(ErrorKind::invalid_parameter, "invalid endpoint '" + text + "'");
  }
  return e;
}

namespace detail {

inline int remaining_ms(Clock::time_point deadline) {
  const auto left = std::chrono::duration_cast<Millis>(deadline - Clock::now()).count();
  return left > 0 ? static_cast<int>(left) : 0;
}

/// Waits for `events` on fd; throws timeout when the deadline passes.
inline void wait_for(int fd, short events, Clock::time_point deadline, const char* what) {
  for (;;) {
    pollfd p{fd, events, 0};
    const int r = ::poll(&p, 1, remaining_ms(deadline));
    if (r > 0) return;
    if (r == 0) fail(ErrorKind::timeout, std::string("timed out waiting to ") + what);
    if (errno != EINTR) fail(ErrorKind::io_error, std::string("poll failed: ") + std::strerror(errno));
  }
}

inline void set_nonblocking(int fd) {
  const int flags = ::fcntl(fd, F_GETFL, 0);
  if (flags < 0 || ::fcntl(fd, F_SETFL, flags | O_NONBLOCK) < 0)
    fail(ErrorKind::io_error, "cannot make socket non-blocking");
}

}  // namespace detail

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)), buffer_(std::move(o.buffer_)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
      buffer_ = std::move(o.buffer_);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void close() {
    if (fd_ >= 0) ::close(std::exchange(fd_, -1));
  }
  void shutdown_both() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

  void send_bytes(std::span<const std::uint8_t> bytes, Millis timeout = kDefaultTimeout) {
    const auto deadline = Clock::now() + timeout;
    std::size_t sent = 0;
    while (sent < bytes.size()) {
      const auto r = ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
      if (r > 0) {
        sent += static_cast<std::size_t>(r);
      } else if (r < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) {
        detail::wait_for(fd_, POLLOUT, deadline, "send");
      } else if (r < 0 && errno == EINTR) {
        continue;
      } else {
        fail(ErrorKind::io_error, std::string("send failed: ") + std::strerror(errno));
      }
    }
  }

  void send_frame(const Frame& f, Millis timeout = kDefaultTimeout) { send_bytes(encode_frame(f), timeout); }

  /// Reads one whole frame; the timeout covers the entire frame.
  Frame recv_frame(Millis timeout = kDefaultTimeout) {
    const auto deadline = Clock::now() + timeout;
    for (;;) {
      auto r = try_decode_frame(buffer_);
      if (r.status == DecodeStatus::malformed) fail(ErrorKind::protocol_violation, r.error);
      if (r.status == DecodeStatus::ok) {
        buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(r.consumed));
        return std::move(r.frame);
      }
      std::uint8_t chunk[4096];
      const auto got = ::recv(fd_, chunk, sizeof chunk, 0);
      if (got > 0) {
        buffer_.insert(buffer_.end(), chunk, chunk + got);
      } else if (got == 0) {
        fail(ErrorKind::io_error, buffer_.empty() ? "peer closed the connection" : "connection closed mid-frame");
      } else if (errno == EAGAIN || errno == EWOULDBLOCK) {
        detail::wait_for(fd_, POLLIN, deadline, "receive a frame");
      } else if (errno != EINTR) {
        fail(ErrorKind::io_error, std::string("recv failed: ") + std::strerror(errno));
      }
    }
  }

 private:
  int fd_ = -1;
  std::vector<std::uint8_t> buffer_;
};

inline Socket connect_to(const Endpoint& where, Millis timeout = kDefaultTimeout) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* found = nullptr;
  const auto port = std::to_string(where.port);
  if (const int rc = ::getaddrinfo(where.host.c_str(), port.c_str(), &hints, &found); rc != 0)
    fail(ErrorKind::io_error, "cannot resolve " + where.host + ": " + ::gai_strerror(rc));
  const auto deadline = Clock::now() + timeout;
  std::string last_error = "no addresses";
  for (auto* ai = found; ai; ai = ai->ai_next) {
    Socket s(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
    if (!s.valid()) {
      last_error = std::strerror(errno);
      continue;
    }
    detail::set_nonblocking(s.fd());
    if (::connect(s.fd(), ai->ai_addr, ai->ai_addrlen) < 0) {
      if (errno != EINPROGRESS) {
        last_error = std::strerror(errno);
        continue;
      }
      try {
        detail::wait_for(s.fd(), POLLOUT, deadline, "connect");
      } catch (...) {
        ::freeaddrinfo(found);
        throw;
      }
      int err = 0;
      socklen_t len = sizeof err;
      ::getsockopt(s.fd(), SOL_SOCKET, SO_ERROR, &err, &len);
      if (err != 0) {
        last_error = std::strerror(err);
        continue;
      }
    }
    const int one = 1;
    ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    ::freeaddrinfo(found);
    return s;
  }
  ::freeaddrinfo(found);
  fail(ErrorKind::io_error, "cannot connect to " + where.host + ":" + port + ": " + last_error);
}

class Listener {
 public:
  explicit Listener(const Endpoint& where) {
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(where.port);
    if (::inet_pton(AF_INET, where.host.c_str(), &addr.sin_addr) != 1)
      fail(ErrorKind::invalid_parameter, "listen address must be an IPv4 literal: " + where.host);
    sock_ = Socket(::socket(AF_INET, SOCK_STREAM, 0));
    if (!sock_.valid()) fail(ErrorKind::io_error, "cannot create socket");
    const int one = 1;
    ::setsockopt(sock_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(sock_.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0)
      fail(ErrorKind::io_error, std::string("bind failed: ") + std::strerror(errno));
    if (::listen(sock_.fd(), 64) < 0) fail(ErrorKind::io_error, std::string("listen failed: ") + std::strerror(errno));
    detail::set_nonblocking(sock_.fd());
    socklen_t len = sizeof addr;
    ::getsockname(sock_.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }

  std::uint16_t port() const { return port_; }

  /// Waits up to `wait` for a connection.
  std::optional<Socket> accept(Millis wait) {
    pollfd p{sock_.fd(), POLLIN, 0};
    if (::poll(&p, 1, static_cast<int>(wait.count())) <= 0) return std::nullopt;
    const int fd = ::accept(sock_.fd(), nullptr, nullptr);
    if (fd < 0) return std::nullopt;
    Socket s(fd);
    detail::set_nonblocking(fd);
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    return s;
  }

  void close() { sock_.close(); }

 private:
  Socket sock_;
  std::uint16_t port_ = 0;
};

}  // namespace ami::net
