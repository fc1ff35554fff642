#pragma once

#include <functional>
#include <span>
#include <vector>

#include "stcl/autodiff.hpp"

namespace stcl::ad {

// Builds a scalar on the given tape from the parameter leaves.
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradientReport {
  std::vector<double> max_rel_error;  // one entry per parameter
  double step = 0.0;

  double worst() const;
};

// Compares backward() against central differences (f(p+h·e) − f(p−h·e)) / 2h.
// Relative error uses the denominator max(|analytic|, |numeric|, 1e-12).
// `skip` may exclude coordinates (parameter index, flat index) from the report,
// e.g. points sitting on an L1 kink.
GradientReport gradient_check(const ScalarFn& f, std::span<const Tensor> params, double step,
                              const std::function<bool(std::size_t, std::size_t)>& skip = {});

}  // namespace stcl::ad
