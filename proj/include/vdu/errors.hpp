#pragma once

#include <stdexcept>
#include <string>

namespace vdu {

/// Bad arguments or an inconsistent configuration. CLI exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN/Inf in a loss or gradient, or an undefined metric. CLI exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File-level failures: unreadable, truncated, corrupt or mismatched. CLI exit code 4.
class FormatError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version, truncated, checksum, dim_mismatch, arch_mismatch, parse };

  FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace vdu
