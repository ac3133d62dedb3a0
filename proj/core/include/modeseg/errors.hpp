#pragma once

#include <stdexcept>
#include <string>

namespace modeseg {

/// Incompatible tensor extents (channel mismatch, odd pooling extent, ...).
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller broke an operation's precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// NaN or Inf produced where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file contents (header/byte-count mismatch, bad magic, ...).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Well-formed input whose values cannot be used (zero variance, non-finite pixels).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value or combination.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace modeseg
