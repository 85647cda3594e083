#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace defect_forge {

enum class ErrorKind {
  ShapeMismatch,
  InvalidArgument,
  ImageTooSmall,
  Io,
  Format,
  Version,
  Truncated,
  UnknownEntry,
  Config,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "shape mismatch";
    case ErrorKind::InvalidArgument: return "invalid argument";
    case ErrorKind::ImageTooSmall: return "image too small";
    case ErrorKind::Io: return "i/o error";
    case ErrorKind::Format: return "format error";
    case ErrorKind::Version: return "version mismatch";
    case ErrorKind::Truncated: return "truncated input";
    case ErrorKind::UnknownEntry: return "unknown entry";
    case ErrorKind::Config: return "config error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace defect_forge
