#include "stcl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "stcl/errors.hpp"

namespace stcl::ad {

namespace {

double evaluate(const ScalarFn& f, std::span<const Tensor> params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.constant(p));
  const Var out = f(tape, vars);
  const double v = out.value().item();
  if (!std::isfinite(v)) throw EvaluationError("gradient_check: function value is not finite");
  return v;
}

}  // namespace

double GradientReport::worst() const {
  double w = 0.0;
  for (double e : max_rel_error) w = std::max(w, e);
  return w;
}

GradientReport gradient_check(const ScalarFn& f, std::span<const Tensor> params, double step,
                              const std::function<bool(std::size_t, std::size_t)>& skip) {
  if (!(step > 0.0 && step <= 1e-2)) throw ContractViolation("gradient_check: step must lie in (0, 1e-2]");

  Tape tape;
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(tape.variable(p));
  const Var root = f(tape, vars);
  if (!std::isfinite(root.value().item())) throw EvaluationError("gradient_check: function value is not finite");
  const Gradients grads = tape.backward(root);

  GradientReport report;
  report.step = step;
  std::vector<Tensor> work(params.begin(), params.end());
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const Tensor analytic = grads.wrt(vars[pi]);
    double worst = 0.0;
    for (std::size_t i = 0; i < params[pi].size(); ++i) {
      if (skip && skip(pi, i)) continue;
      std::vector<double> d = params[pi].to_vector();
      const double x = d[i];
      d[i] = x + step;
      work[pi] = Tensor(params[pi].shape(), d);
      const double fp = evaluate(f, work);
      d[i] = x - step;
      work[pi] = Tensor(params[pi].shape(), d);
      const double fm = evaluate(f, work);
      work[pi] = params[pi];
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    report.max_rel_error.push_back(worst);
  }
  return report;
}

}  // namespace stcl::ad
