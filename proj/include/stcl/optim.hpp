#pragma once

#include <cstddef>
#include <vector>

#include "stcl/tensor.hpp"

namespace stcl {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // Updates params in place; grads align with params.
  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads);
  void reset();
  std::size_t steps_taken() const noexcept { return t_; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace stcl
