#pragma once

#include <string>
#include <vector>

#include "parsegrid/tensor.hpp"

namespace pg {

struct GradCheckEntry {
  std::string name;
  double err;
  double tol;
  bool ok() const { return err <= tol; }
};

// Finite-difference battery over every differentiable op, evaluated in
// double precision. Tolerance 1e-3 relative.
std::vector<GradCheckEntry> gradcheck_ops(u64 seed);

// Finite-difference check of every registered parameter coordinate of a
// small end-to-end model against the composite training loss. Analytic
// gradients come from the float model; the difference quotients are
// evaluated on a double twin holding bitwise-widened parameters.
// Tolerance 5e-3 relative.
std::vector<GradCheckEntry> gradcheck_model(i64 base_width, i64 hw, u64 seed);

}  // namespace pg
