#pragma once

#include <stdexcept>
#include <string>

namespace dilnas {

// Error taxonomy maps onto the CLI exit codes:
//   UsageError -> 1, DataError -> 2, DivergenceError -> 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes for an operation.
struct ShapeError : Error {
  using Error::Error;
};

// Out-of-domain argument (label out of range, bad ratio, ...).
struct ValueError : Error {
  using Error::Error;
};

// Bad command line, config key or flag.
struct UsageError : Error {
  using Error::Error;
};

// Malformed or inconsistent input files.
struct DataError : Error {
  using Error::Error;
};

// A primitive produced a non-finite value on finite inputs.
struct NumericError : Error {
  using Error::Error;
};

// A training loop diverged; carries a state dump for diagnosis.
struct DivergenceError : Error {
  explicit DivergenceError(const std::string& msg, std::string state_dump = {})
      : Error(msg), state(std::move(state_dump)) {}
  std::string state;
};

}  // namespace dilnas
