#include "autoadr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "autoadr/errors.hpp"

namespace autoadr {
namespace {

double evaluate(const std::function<Var(Graph&)>& loss) {
  Graph g;
  const double v = loss(g).value().item();
  if (!std::isfinite(v)) throw NumericFailure("finite_diff_check: f(x) is not finite");
  return v;
}

}  // namespace

GradCheckReport finite_diff_check(const std::function<Var(Graph&)>& loss,
                                  std::span<Parameter* const> params, double eps, double tol,
                                  std::size_t max_coords_per_param) {
  require(eps > 0.0 && tol > 0.0, "finite_diff_check: eps and tol must be positive");
  for (Parameter* p : params) p->grad = Tensor();
  {
    Graph g;
    Var l = loss(g);
    if (!std::isfinite(l.value().item()))
      throw NumericFailure("finite_diff_check: f(x) is not finite");
    g.backward(l);
  }
  GradCheckReport report;
  for (Parameter* p : params) {
    const Tensor analytic = p->has_grad() ? p->grad : Tensor(p->value.shape());
    const std::size_t n = p->value.size();
    const std::size_t stride =
        max_coords_per_param == 0 ? 1 : std::max<std::size_t>(1, n / max_coords_per_param);
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = p->value[i];
      p->value[i] = saved + eps;
      const double up = evaluate(loss);
      p->value[i] = saved - eps;
      const double down = evaluate(loss);
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(analytic[i]));
      ++report.coordinates_checked;
      if (err >= report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_parameter = p->name;
        report.worst_index = i;
        report.analytic_at_worst = analytic[i];
        report.numeric_at_worst = numeric;
      }
    }
    p->grad = Tensor();
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

GradCheckReport finite_diff_check(const std::function<Var(Graph&, Var)>& f, const Tensor& x,
                                  double eps, double tol) {
  Parameter p("x", x);
  Parameter* ptr = &p;
  return finite_diff_check([&](Graph& g) { return f(g, g.param(p)); },
                           std::span<Parameter* const>(&ptr, 1), eps, tol);
}

}  // namespace autoadr
