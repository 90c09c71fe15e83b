#ifndef CSPEECH_TENSOR_GRAD_CHECK_H_
#define CSPEECH_TENSOR_GRAD_CHECK_H_

#include <functional>
#include <string>
#include <vector>

#include "cspeech/tensor/tensor.h"

namespace cspeech {

struct GradCheckReport {
  double max_rel_error = 0.0;
  int64_t worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool passed = false;
};

// Compares the analytic gradient of a scalar-valued function f at x against
// central finite differences (f(x+h) - f(x-h)) / 2h, coordinate by
// coordinate. The relative error uses |a| + |n| in the denominator with a
// small floor so that structurally-zero coordinates compare cleanly.
//
// f must treat x as the differentiable leaf: it is called repeatedly with
// perturbed copies of x and must rebuild its graph each call. Throws if
// f(x) is non-finite.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double h = 1e-5, double tol = 1e-5);

// Same check restricted to a subset of coordinates (for large parameter
// tensors where a full sweep is wasteful).
GradCheckReport grad_check_coords(const std::function<Tensor(const Tensor&)>& f,
                                  const Tensor& x, const std::vector<int64_t>& coords,
                                  double h = 1e-5, double tol = 1e-5);

}  // namespace cspeech

#endif  // CSPEECH_TENSOR_GRAD_CHECK_H_
