#pragma once

#include <stdexcept>
#include <string>

namespace sparseiv {

// Invalid arguments, malformed inputs, violated preconditions.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A computation that cannot be completed numerically (singular systems,
// non-convergence, degenerate statistics).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace sparseiv
