#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Tape records every operation as a node holding its forward value. Nodes are
// appended in evaluation order, so the node index is a topological order and
// backward() is a single reverse sweep. The op set is closed (see OpKind);
// everything the losses and the denoiser need is composed from it.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "stcl/tensor.hpp"

namespace stcl::ad {

enum class OpKind : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  MatMul,
  Transpose,
  Sum,
  Mean,
  Log,
  Abs,
  SquaredNorm,
  Relu,
  Tanh,
  Reshape,
  Concat,
  Cholesky,
};

std::string_view op_name(OpKind op);
std::optional<OpKind> op_from_name(std::string_view name);

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  friend Var record(OpKind op, std::vector<Var> parents, Tensor value, double scalar);
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Gradients {
 public:
  // Gradient of the root w.r.t. v; zeros when v does not influence the root.
  Tensor wrt(const Var& v) const;
  bool touched(const Var& v) const;

 private:
  friend class Tape;
  std::vector<std::optional<Tensor>> grads_;
  std::vector<Shape> shapes_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable leaf.
  Var variable(Tensor value);
  // Leaf that never receives a gradient.
  Var constant(Tensor value);

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }

  // Root must hold exactly one element.
  Gradients backward(const Var& root) const;

 private:
  friend Var record(OpKind op, std::vector<Var> parents, Tensor value, double scalar);

  struct Node {
    OpKind op = OpKind::Leaf;
    std::vector<std::size_t> parents;
    Tensor value;
    double scalar = 0.0;  // Scale factor, concat axis, ...
    bool requires_grad = false;
  };

  void accumulate(std::vector<std::optional<Tensor>>& grads, std::size_t id, Tensor g) const;
  void propagate(const Node& node, const Tensor& g, std::vector<std::optional<Tensor>>& grads) const;

  std::vector<Node> nodes_;
};

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
// Requires strictly positive input.
Var log(const Var& a);
// Subgradient 0 at exactly 0.
Var abs(const Var& a);
Var squared_norm(const Var& a);
Var relu(const Var& a);
Var tanh(const Var& a);
Var reshape(const Var& a, Shape shape);
Var flatten(const Var& a);
Var concat(std::span<const Var> parts, std::size_t axis);
// Lower Cholesky factor of a symmetric positive definite matrix. The factor is
// taken of the symmetric part (A + Aᵀ)/2, so the adjoint is symmetric.
Var cholesky(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

// Plain (untaped) Cholesky used by the taped op; throws FactorizationError.
Tensor cholesky_factor(const Tensor& a);
// Adjoint of the Cholesky map: given L and dF/dL, returns the symmetric dF/dA.
Tensor cholesky_adjoint(const Tensor& lower, const Tensor& lower_bar);

namespace testing {
// Scales the backward contribution of one op kind by 1.5. Test fixture only.
void inject_backward_fault(std::optional<OpKind> op);
std::optional<OpKind> injected_backward_fault();
}  // namespace testing

}  // namespace stcl::ad
