#include "cspeech/tensor/grad_check.h"

#include <cmath>

namespace cspeech {

namespace {

// Floor for the relative-error denominator. Coordinates whose analytic and
// numeric gradients are both tiny are compared absolutely at this scale.
constexpr double kDenomFloor = 1e-3;

double eval_scalar(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  Tensor y = f(x);
  require(y.is_scalar(), "grad_check: f must be scalar-valued");
  const double v = y.item();
  check_runtime(std::isfinite(v), "grad_check: f(x) is not finite");
  return v;
}

}  // namespace

GradCheckReport grad_check_coords(const std::function<Tensor(const Tensor&)>& f,
                                  const Tensor& x, const std::vector<int64_t>& coords,
                                  double h, double tol) {
  require(h > 0.0, "grad_check: h must be positive");
  // Analytic pass.
  Tensor leaf = Tensor::from(x.shape(), x.vec(), /*requires_grad=*/true);
  Tensor y = f(leaf);
  require(y.is_scalar(), "grad_check: f must be scalar-valued");
  check_runtime(std::isfinite(y.item()), "grad_check: f(x) is not finite");
  backward(y);
  const std::vector<double> analytic = leaf.grad();

  GradCheckReport report;
  for (int64_t i : coords) {
    Tensor xp = Tensor::from(x.shape(), x.vec(), false);
    Tensor xm = Tensor::from(x.shape(), x.vec(), false);
    xp.vec()[static_cast<size_t>(i)] += h;
    xm.vec()[static_cast<size_t>(i)] -= h;
    const double numeric = (eval_scalar(f, xp) - eval_scalar(f, xm)) / (2.0 * h);
    const double a = analytic[static_cast<size_t>(i)];
    const double denom = std::max(std::abs(a) + std::abs(numeric), kDenomFloor);
    const double rel = std::abs(a - numeric) / denom;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
      report.analytic_at_worst = a;
      report.numeric_at_worst = numeric;
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double h, double tol) {
  std::vector<int64_t> coords(static_cast<size_t>(x.numel()));
  for (size_t i = 0; i < coords.size(); ++i) coords[i] = static_cast<int64_t>(i);
  return grad_check_coords(f, x, coords, h, tol);
}

}  // namespace cspeech
