#pragma once

#include <stdexcept>
#include <string>

namespace ncmi {

// Contract violations: bad shapes, bad arguments, malformed files.
// The CLI maps these to exit code 1.
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numerical failures: training divergence, identity-residual exceedance.
// The CLI maps these to exit code 2.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ncmi
