#pragma once

#include <stdexcept>
#include <string>

namespace sra {

/// Raised when tensor dimensions disagree with an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for inconsistent hyperparameters (e.g. concatenation descriptor on a dynamic grid).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an API is driven in the wrong order or with unusable input.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when training diverges (non-finite loss).
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sra
