#pragma once

#include <stdexcept>

namespace braintok {

// Invalid or inconsistent configuration / arguments (CLI exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values or failed factorizations during compute (CLI exit code 3).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace braintok
