#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "stcl/gradcheck.hpp"

namespace stcl::ad {

// One differentiable op (or loss) wrapped as a scalar function of random inputs.
struct GradCase {
  std::string name;
  std::function<std::vector<Tensor>(std::mt19937_64&)> make_inputs;
  ScalarFn fn;
  // Optional coordinate filter (e.g. L1 kinks); receives the inputs of the trial.
  std::function<std::function<bool(std::size_t, std::size_t)>(const std::vector<Tensor>&)> skip;
};

// Every taped op, each contracted against a fixed random weight so the
// whole Jacobian is exercised.
std::vector<GradCase> op_cases();
// Spatial and temporal losses on random latent sets.
std::vector<GradCase> loss_cases();

struct GradCheckOutcome {
  std::string name;
  double worst = 0.0;
  std::size_t trials = 0;
  bool passed = false;
};

std::vector<GradCheckOutcome> run_gradcheck_suite(double step, double tol, std::size_t trials,
                                                  std::uint64_t seed);

}  // namespace stcl::ad
