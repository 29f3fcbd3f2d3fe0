#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace leafgrad {

enum class ErrorKind { shape, value, format, io, config, state };

std::string_view to_string(ErrorKind kind);

// Every failure raised by the library carries a coarse category so the CLI
// can print a single machine-parsable line.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::shape: return "shape";
    case ErrorKind::value: return "value";
    case ErrorKind::format: return "format";
    case ErrorKind::io: return "io";
    case ErrorKind::config: return "config";
    case ErrorKind::state: return "state";
  }
  return "unknown";
}

}  // namespace leafgrad
