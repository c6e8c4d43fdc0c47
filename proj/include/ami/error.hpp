#pragma once

#include <stdexcept>
#include <string>

namespace ami {

enum class ErrorKind {
  invalid_parameter,
  parse_error,
  unsupported_version,
  protocol_violation,
  invalid_state,
  exhausted_recording,
  timeout,
  io_error,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_parameter: return "invalid-parameter";
    case ErrorKind::parse_error: return "parse-error";
    case ErrorKind::unsupported_version: return "unsupported-version";
    case ErrorKind::protocol_violation: return "protocol-violation";
    case ErrorKind::invalid_state: return "invalid-state";
    case ErrorKind::exhausted_recording: return "exhausted-recording";
    case ErrorKind::timeout: return "timeout";
    case ErrorKind::io_error: return "io-error";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool condition, const std::string& what) {
  if (!condition) fail(ErrorKind::invalid_parameter, what);
}

}  // namespace ami
