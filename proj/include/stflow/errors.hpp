#pragma once

#include <stdexcept>

namespace stflow {

/// Invalid configuration values or arguments.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Unreadable, truncated, corrupt or inconsistent files.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A checkpoint that does not belong to the requested model or format version.
class CompatibilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or gradients during training.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace stflow
