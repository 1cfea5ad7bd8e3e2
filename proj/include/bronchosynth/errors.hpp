#pragma once

#include <stdexcept>
#include <string>

namespace bsynth {

// Malformed user input: unreadable files, shape mismatches, bad arguments.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration values or combinations.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Out-of-range parameters for a generator or algorithm.
struct ParameterError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values or degenerate numerical problems.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// The depth estimator (or an external embedding command) failed.
struct BackendError : std::runtime_error {
  BackendError(const std::string& what, std::string diagnostics)
      : std::runtime_error(what), diagnostics_(std::move(diagnostics)) {}
  explicit BackendError(const std::string& what) : std::runtime_error(what) {}

  const std::string& diagnostics() const noexcept { return diagnostics_; }

 private:
  std::string diagnostics_;
};

}  // namespace bsynth
