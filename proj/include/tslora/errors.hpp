#pragma once

#include <stdexcept>
#include <string>

namespace tslora {

// Shape mismatch in matrix arithmetic. Messages name both shapes.
class DimensionError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Adapter does not fit the matrix it targets.
class InjectionError : public DimensionError {
  using DimensionError::DimensionError;
};

// Invalid configuration value. The CLI maps this to exit code 2.
class ConfigError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// LoRA rank out of range for the target matrix.
class RankError : public ConfigError {
  using ConfigError::ConfigError;
};

// A call violated an operation's contract (empty context, non-scalar
// loss, mismatched lengths, ...).
class ContractError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Non-finite values where finite ones are required.
class NumericError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Missing or degenerate data: all-missing series, constant scaling pool,
// splits that cannot be honored, empty test sets, malformed files.
class DataError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace tslora
