#pragma once

#include <stdexcept>
#include <string>

namespace fame {

/// Tensor shapes disagree with what an operation requires.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A documented precondition was violated by the caller.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values or an undefined numeric quantity (zero mean, NaN logits).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated container file.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), reason_(what), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }
  /// Message without the offset suffix.
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::string reason_;
  std::size_t offset_;
};

/// A file or directory could not be read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration key/value or incompatible checkpoint.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace fame
