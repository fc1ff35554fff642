#include "stcl/autodiff.hpp"

#include <array>
#include <atomic>
#include <cmath>
#include <string>

#include "stcl/errors.hpp"

namespace stcl::ad {

namespace {

constexpr std::array<std::string_view, 18> kOpNames = {
    "leaf", "add",  "sub",          "mul",  "scale", "add_scalar", "matmul",  "transpose", "sum",
    "mean", "log",  "abs",          "squared_norm", "relu", "tanh", "reshape", "concat", "cholesky"};

// Sentinel 255 means "no fault".
std::atomic<std::uint8_t> g_fault{255};

Tape* common_tape(const Var& a, const Var& b) {
  if (!a.valid() || !b.valid()) throw ContractViolation("autodiff: invalid Var");
  if (a.tape() != b.tape()) throw ContractViolation("autodiff: operands live on different tapes");
  return a.tape();
}

template <typename Fn>
Tensor map(const Tensor& a, Fn fn) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(a[i]);
  return Tensor(a.shape(), std::move(out));
}

template <typename Fn>
Tensor zip(const Tensor& a, const Tensor& b, Fn fn) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(a[i], b[i]);
  return Tensor(a.shape(), std::move(out));
}

struct ConcatGeometry {
  std::size_t outer = 1;
  std::size_t inner = 1;
};

ConcatGeometry concat_geometry(const Shape& shape, std::size_t axis) {
  ConcatGeometry g;
  for (std::size_t i = 0; i < axis; ++i) g.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) g.inner *= shape[i];
  return g;
}

// Solves Lᵀ X = B for X (L lower, n×n, B n×m).
Tensor solve_upper_transposed(const Tensor& lower, const Tensor& rhs) {
  const std::size_t n = lower.dim(0), m = rhs.dim(1);
  std::vector<double> x(rhs.begin(), rhs.end());
  for (std::size_t col = 0; col < m; ++col) {
    for (std::size_t ii = n; ii-- > 0;) {
      double v = x[ii * m + col];
      for (std::size_t k = ii + 1; k < n; ++k) v -= lower.at(k, ii) * x[k * m + col];
      x[ii * m + col] = v / lower.at(ii, ii);
    }
  }
  return Tensor({n, m}, std::move(x));
}

}  // namespace

std::string_view op_name(OpKind op) { return kOpNames[static_cast<std::size_t>(op)]; }

std::optional<OpKind> op_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kOpNames.size(); ++i) {
    if (kOpNames[i] == name) return static_cast<OpKind>(i);
  }
  return std::nullopt;
}

namespace testing {
void inject_backward_fault(std::optional<OpKind> op) {
  g_fault.store(op ? static_cast<std::uint8_t>(*op) : std::uint8_t{255});
}
std::optional<OpKind> injected_backward_fault() {
  const auto v = g_fault.load();
  if (v == 255) return std::nullopt;
  return static_cast<OpKind>(v);
}
}  // namespace testing

const Tensor& Var::value() const {
  if (!tape_) throw ContractViolation("autodiff: invalid Var");
  return tape_->value(id_);
}

Tensor Gradients::wrt(const Var& v) const {
  if (v.id() < grads_.size() && grads_[v.id()]) return *grads_[v.id()];
  return Tensor::zeros(v.shape());
}

bool Gradients::touched(const Var& v) const {
  return v.id() < grads_.size() && grads_[v.id()].has_value();
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{OpKind::Leaf, {}, std::move(value), 0.0, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{OpKind::Leaf, {}, std::move(value), 0.0, false});
  return Var(this, nodes_.size() - 1);
}

Var record(OpKind op, std::vector<Var> parents, Tensor value, double scalar) {
  Tape* tape = parents.front().tape();
  if (!tape) throw ContractViolation("autodiff: invalid Var");
  Tape::Node node;
  node.op = op;
  node.value = std::move(value);
  node.scalar = scalar;
  for (const auto& p : parents) {
    node.parents.push_back(p.id());
    node.requires_grad = node.requires_grad || tape->nodes_[p.id()].requires_grad;
  }
  tape->nodes_.push_back(std::move(node));
  return Var(tape, tape->nodes_.size() - 1);
}

void Tape::accumulate(std::vector<std::optional<Tensor>>& grads, std::size_t id, Tensor g) const {
  if (!nodes_[id].requires_grad) return;
  if (grads[id]) {
    grads[id] = stcl::add(*grads[id], g);
  } else {
    grads[id] = std::move(g);
  }
}

void Tape::propagate(const Node& node, const Tensor& g_in, std::vector<std::optional<Tensor>>& grads) const {
  const auto fault = testing::injected_backward_fault();
  const Tensor g = (fault && *fault == node.op) ? scaled(g_in, 1.5) : g_in;
  const auto& p = node.parents;
  auto val = [&](std::size_t i) -> const Tensor& { return nodes_[p[i]].value; };

  switch (node.op) {
    case OpKind::Leaf:
      break;
    case OpKind::Add:
      accumulate(grads, p[0], g);
      accumulate(grads, p[1], g);
      break;
    case OpKind::Sub:
      accumulate(grads, p[0], g);
      accumulate(grads, p[1], scaled(g, -1.0));
      break;
    case OpKind::Mul:
      accumulate(grads, p[0], hadamard(g, val(1)));
      accumulate(grads, p[1], hadamard(g, val(0)));
      break;
    case OpKind::Scale:
      accumulate(grads, p[0], scaled(g, node.scalar));
      break;
    case OpKind::AddScalar:
      accumulate(grads, p[0], g);
      break;
    case OpKind::MatMul:
      if (nodes_[p[0]].requires_grad) accumulate(grads, p[0], stcl::matmul(g, val(1), false, true));
      if (nodes_[p[1]].requires_grad) accumulate(grads, p[1], stcl::matmul(val(0), g, true, false));
      break;
    case OpKind::Transpose:
      accumulate(grads, p[0], stcl::transpose(g));
      break;
    case OpKind::Sum:
      accumulate(grads, p[0], Tensor::filled(val(0).shape(), g.item()));
      break;
    case OpKind::Mean:
      accumulate(grads, p[0],
                 Tensor::filled(val(0).shape(), g.item() / static_cast<double>(val(0).size())));
      break;
    case OpKind::Log:
      accumulate(grads, p[0], zip(g, val(0), [](double gg, double x) { return gg / x; }));
      break;
    case OpKind::Abs:
      accumulate(grads, p[0], zip(g, val(0), [](double gg, double x) {
                   return x > 0.0 ? gg : (x < 0.0 ? -gg : 0.0);
                 }));
      break;
    case OpKind::SquaredNorm: {
      const double s = 2.0 * g.item();
      accumulate(grads, p[0], scaled(val(0), s));
      break;
    }
    case OpKind::Relu:
      accumulate(grads, p[0], zip(g, val(0), [](double gg, double x) { return x > 0.0 ? gg : 0.0; }));
      break;
    case OpKind::Tanh:
      accumulate(grads, p[0], zip(g, node.value, [](double gg, double y) { return gg * (1.0 - y * y); }));
      break;
    case OpKind::Reshape:
      accumulate(grads, p[0], g.reshaped(val(0).shape()));
      break;
    case OpKind::Concat: {
      const auto axis = static_cast<std::size_t>(node.scalar);
      const auto geo = concat_geometry(node.value.shape(), axis);
      const std::size_t out_axis = node.value.dim(axis);
      std::size_t offset = 0;
      for (std::size_t k = 0; k < p.size(); ++k) {
        const Tensor& part = val(k);
        const std::size_t len = part.dim(axis);
        if (nodes_[p[k]].requires_grad) {
          std::vector<double> d(part.size());
          for (std::size_t o = 0; o < geo.outer; ++o)
            for (std::size_t a = 0; a < len; ++a)
              for (std::size_t i = 0; i < geo.inner; ++i)
                d[(o * len + a) * geo.inner + i] = g[(o * out_axis + offset + a) * geo.inner + i];
          accumulate(grads, p[k], Tensor(part.shape(), std::move(d)));
        }
        offset += len;
      }
      break;
    }
    case OpKind::Cholesky:
      accumulate(grads, p[0], cholesky_adjoint(node.value, g));
      break;
  }
}

Gradients Tape::backward(const Var& root) const {
  if (root.tape() != this) throw ContractViolation("backward: root belongs to another tape");
  if (root.value().size() != 1) {
    throw ContractViolation("backward: root must be scalar, got shape " +
                            shape_string(root.value().shape()));
  }
  Gradients out;
  out.grads_.resize(root.id() + 1);
  std::vector<std::optional<Tensor>>& grads = out.grads_;
  if (nodes_[root.id()].requires_grad) grads[root.id()] = Tensor::filled(root.shape(), 1.0);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    if (!grads[i]) continue;
    const Node& node = nodes_[i];
    if (node.op == OpKind::Leaf) continue;
    propagate(node, *grads[i], grads);
    // Only leaf gradients are reported; interior ones are dropped once consumed.
    grads[i].reset();
  }
  return out;
}

Var add(const Var& a, const Var& b) {
  common_tape(a, b);
  return record(OpKind::Add, {a, b}, stcl::add(a.value(), b.value()), 0.0);
}

Var sub(const Var& a, const Var& b) {
  common_tape(a, b);
  return record(OpKind::Sub, {a, b}, stcl::sub(a.value(), b.value()), 0.0);
}

Var mul(const Var& a, const Var& b) {
  common_tape(a, b);
  return record(OpKind::Mul, {a, b}, hadamard(a.value(), b.value()), 0.0);
}

Var scale(const Var& a, double s) { return record(OpKind::Scale, {a}, scaled(a.value(), s), s); }

Var add_scalar(const Var& a, double s) {
  return record(OpKind::AddScalar, {a}, shifted(a.value(), s), s);
}

Var matmul(const Var& a, const Var& b) {
  common_tape(a, b);
  return record(OpKind::MatMul, {a, b}, stcl::matmul(a.value(), b.value()), 0.0);
}

Var transpose(const Var& a) { return record(OpKind::Transpose, {a}, stcl::transpose(a.value()), 0.0); }

Var sum(const Var& a) { return record(OpKind::Sum, {a}, Tensor::scalar(stcl::sum(a.value())), 0.0); }

Var mean(const Var& a) {
  if (a.value().size() == 0) throw ContractViolation("mean: empty tensor");
  return record(OpKind::Mean, {a},
                Tensor::scalar(stcl::sum(a.value()) / static_cast<double>(a.value().size())), 0.0);
}

Var log(const Var& a) {
  for (double v : a.value().data()) {
    if (!(v > 0.0)) throw DomainError("log: nonpositive input " + std::to_string(v));
  }
  return record(OpKind::Log, {a}, map(a.value(), [](double x) { return std::log(x); }), 0.0);
}

Var abs(const Var& a) {
  return record(OpKind::Abs, {a}, map(a.value(), [](double x) { return std::abs(x); }), 0.0);
}

Var squared_norm(const Var& a) {
  return record(OpKind::SquaredNorm, {a}, Tensor::scalar(stcl::squared_norm(a.value())), 0.0);
}

Var relu(const Var& a) {
  return record(OpKind::Relu, {a}, map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), 0.0);
}

Var tanh(const Var& a) {
  return record(OpKind::Tanh, {a}, map(a.value(), [](double x) { return std::tanh(x); }), 0.0);
}

Var reshape(const Var& a, Shape shape) {
  return record(OpKind::Reshape, {a}, a.value().reshaped(std::move(shape)), 0.0);
}

Var flatten(const Var& a) { return reshape(a, {a.value().size()}); }

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ContractViolation("concat: no parts");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ContractViolation("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    common_tape(parts.front(), p);
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ContractViolation("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        throw ContractViolation("concat: shape mismatch " + shape_string(first) + " vs " + shape_string(s));
      }
    }
    out_shape[axis] += s[axis];
  }
  const auto geo = concat_geometry(out_shape, axis);
  const std::size_t out_axis = out_shape[axis];
  std::vector<double> out(shape_size(out_shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    const std::size_t len = v.dim(axis);
    for (std::size_t o = 0; o < geo.outer; ++o)
      for (std::size_t a = 0; a < len; ++a)
        for (std::size_t i = 0; i < geo.inner; ++i)
          out[(o * out_axis + offset + a) * geo.inner + i] = v[(o * len + a) * geo.inner + i];
    offset += len;
  }
  return record(OpKind::Concat, std::vector<Var>(parts.begin(), parts.end()),
                Tensor(std::move(out_shape), std::move(out)), static_cast<double>(axis));
}

Tensor cholesky_factor(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw ContractViolation("cholesky: needs a square matrix, got " + shape_string(a.shape()));
  }
  const std::size_t n = a.dim(0);
  const double tol = 1e-9 * std::max(1.0, max_abs(a));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (std::abs(a.at(i, j) - a.at(j, i)) > tol) {
        throw ContractViolation("cholesky: input not symmetric at (" + std::to_string(i) + "," +
                                std::to_string(j) + ")");
      }
  std::vector<double> l(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a.at(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l[j * n + k] * l[j * n + k];
    if (!(d > 0.0)) throw FactorizationError(j, d);
    const double ljj = std::sqrt(d);
    l[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = 0.5 * (a.at(i, j) + a.at(j, i));
      for (std::size_t k = 0; k < j; ++k) v -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = v / ljj;
    }
  }
  return Tensor({n, n}, std::move(l));
}

// Ā = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹, symmetrized; Φ keeps the lower triangle and halves the diagonal.
Tensor cholesky_adjoint(const Tensor& lower, const Tensor& lower_bar) {
  const std::size_t n = lower.dim(0);
  const Tensor m = stcl::matmul(lower, lower_bar, true, false);
  std::vector<double> phi(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) phi[i * n + j] = m.at(i, j);
    phi[i * n + i] = 0.5 * m.at(i, i);
  }
  const Tensor x = solve_upper_transposed(lower, Tensor({n, n}, std::move(phi)));
  const Tensor s = stcl::transpose(solve_upper_transposed(lower, stcl::transpose(x)));
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = 0.5 * (s.at(i, j) + s.at(j, i));
  return Tensor({n, n}, std::move(out));
}

Var cholesky(const Var& a) { return record(OpKind::Cholesky, {a}, cholesky_factor(a.value()), 0.0); }

}  // namespace stcl::ad
