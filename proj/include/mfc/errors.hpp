#pragma once

#include <stdexcept>
#include <string>

namespace mfc {

// A tridiagonal solve broke down or the implicit step matrix was too
// unbalanced to trust; the time step is too large for the assembled
// coefficients.
class IllConditionedStep : public std::runtime_error {
 public:
  explicit IllConditionedStep(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite state detected while marching; carries the offending step index
// when one is known (-1 for aggregate quantities like a gradient).
class NumericalBlowup : public std::runtime_error {
 public:
  explicit NumericalBlowup(const std::string& what) : std::runtime_error(what) {}
  NumericalBlowup(const std::string& what, int step_index)
      : std::runtime_error(what + " at step " + std::to_string(step_index)),
        step(step_index) {}

  int step = -1;
};

}  // namespace mfc
