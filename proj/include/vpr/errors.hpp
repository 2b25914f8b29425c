#pragma once

#include <stdexcept>

namespace vpr {

// File header / container-level violations (bad magic, truncated payload, ...).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Well-formed input whose content violates a contract (zero-norm row, missing
// gps tag, inliers > total, ...).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Caller passed an out-of-contract argument (k > N, index out of range, ...).
struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Non-finite value showed up where the math guarantees finiteness.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace vpr
