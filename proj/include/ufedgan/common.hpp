#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ufed {

inline constexpr const char* kVersion = "0.1.0";

// Process exit codes used by the CLI; library errors carry one of these.
enum class ErrorCode : int {
  config = 2,
  data = 3,
  protocol = 4,
  numeric = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

// Shape/dtype disagreements between tensors or vectors.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& msg) : Error(ErrorCode::numeric, msg) {}
};

// Input outside an operation's mathematical domain (e.g. bce outside (0,1)).
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& msg) : Error(ErrorCode::numeric, msg) {}
};

// Caller violated an API contract (empty batch, non-scalar loss, ...).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error(ErrorCode::numeric, msg) {}
};

// Object used in an invalid lifecycle state (consumed tape, closed link).
class StateError : public Error {
 public:
  explicit StateError(const std::string& msg) : Error(ErrorCode::numeric, msg) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(ErrorCode::numeric, msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(ErrorCode::config, msg) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(ErrorCode::data, msg) {}
};

// Malformed input file; message carries the offending offset where known.
class ParseError : public DataError {
 public:
  explicit ParseError(const std::string& msg) : DataError(msg) {}
};

class ProtocolError : public Error {
 public:
  explicit ProtocolError(const std::string& msg) : Error(ErrorCode::protocol, msg) {}
};

// Wire-level framing problem (bad magic, truncation, length mismatch).
class FrameError : public ProtocolError {
 public:
  explicit FrameError(const std::string& msg) : ProtocolError(msg) {}
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace ufed
