#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "autoadr/graph.hpp"

namespace autoadr {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t coordinates_checked = 0;
  bool passed = false;
};

// Compares reverse-mode gradients of a scalar function against central
// differences. Relative error per coordinate is
// |analytic - numeric| / max(1, |analytic|).
GradCheckReport finite_diff_check(const std::function<Var(Graph&, Var)>& f, const Tensor& x,
                                  double eps, double tol);

// Same check over several parameters of a loss closure. When
// `max_coords_per_param` is non-zero, an evenly strided subset of each
// parameter's coordinates is probed.
GradCheckReport finite_diff_check(const std::function<Var(Graph&)>& loss,
                                  std::span<Parameter* const> params, double eps, double tol,
                                  std::size_t max_coords_per_param = 0);

}  // namespace autoadr
