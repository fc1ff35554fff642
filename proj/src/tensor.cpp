#include "stcl/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>

#include <Eigen/Core>

#include "stcl/errors.hpp"

namespace stcl {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'C', 'L', 'T', 'N', 'S', 'R'};

template <typename U>
void put_le(std::vector<unsigned char>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<unsigned char>((value >> (8 * i)) & 0xFFu));
  }
}

template <typename U>
U get_le(std::span<const unsigned char> bytes, std::size_t& pos) {
  if (pos + sizeof(U) > bytes.size()) throw IoError("tensor file truncated");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    value |= static_cast<U>(bytes[pos + i]) << (8 * i);
  }
  pos += sizeof(U);
  return value;
}

template <typename Fn>
Tensor map_binary(const Tensor& a, const Tensor& b, const char* what, Fn fn) {
  require_same_shape(a, b, what);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(a[i], b[i]);
  return Tensor(a.shape(), std::move(out));
}

template <typename Fn>
Tensor map_unary(const Tensor& a, Fn fn) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(a[i]);
  return Tensor(a.shape(), std::move(out));
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor() : shape_{}, data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (data.size() != shape_size(shape_)) {
    throw ContractViolation("tensor: " + std::to_string(data.size()) +
                            " values do not fill shape " + shape_string(shape_));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::identity(std::size_t n) {
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(d));
}

Tensor Tensor::from_external(Shape shape, std::vector<double> data) {
  for (double v : data) {
    if (!std::isfinite(v)) throw InputError("tensor: non-finite value in external input");
  }
  return Tensor(std::move(shape), std::move(data));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ContractViolation("tensor: axis " + std::to_string(axis) + " out of range for " +
                            shape_string(shape_));
  }
  return shape_[axis];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  if (rank() != 2) throw ContractViolation("tensor: at(i,j) needs rank 2");
  return (*data_)[i * shape_[1] + j];
}

double Tensor::item() const {
  if (size() != 1) {
    throw ContractViolation("tensor: item() on shape " + shape_string(shape_));
  }
  return (*data_)[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != size()) {
    throw ContractViolation("tensor: cannot reshape " + shape_string(shape_) + " to " +
                            shape_string(shape));
  }
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

bool Tensor::all_finite() const {
  return std::all_of(begin(), end(), [](double v) { return std::isfinite(v); });
}

bool operator==(const Tensor& a, const Tensor& b) {
  return a.shape_ == b.shape_ && *a.data_ == *b.data_;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ContractViolation(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                            " vs " + shape_string(b.shape()));
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  return map_binary(a, b, "add", [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return map_binary(a, b, "sub", [](double x, double y) { return x - y; });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  return map_binary(a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor scaled(const Tensor& a, double s) {
  return map_unary(a, [s](double x) { return x * s; });
}

Tensor shifted(const Tensor& a, double s) {
  return map_unary(a, [s](double x) { return x + s; });
}

Tensor axpby(double a, const Tensor& x, double b, const Tensor& y) {
  return map_binary(x, y, "axpby", [a, b](double u, double v) { return a * u + b * v; });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ContractViolation("transpose: needs rank 2, got " + shape_string(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  const double* src = a.begin();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = src[i * c + j];
  return Tensor({c, r}, std::move(out));
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ContractViolation("matmul: needs rank-2 operands, got " + shape_string(a.shape()) +
                            " and " + shape_string(b.shape()));
  }
  using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMap = Eigen::Map<const Matrix>;
  const ConstMap ma(a.begin(), static_cast<Eigen::Index>(a.dim(0)), static_cast<Eigen::Index>(a.dim(1)));
  const ConstMap mb(b.begin(), static_cast<Eigen::Index>(b.dim(0)), static_cast<Eigen::Index>(b.dim(1)));
  const std::size_t m = transpose_a ? a.dim(1) : a.dim(0);
  const std::size_t k = transpose_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (kb != k) {
    throw ContractViolation("matmul: inner extents differ " + shape_string(a.shape()) + " · " +
                            shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  Eigen::Map<Matrix> mo(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  if (transpose_a && transpose_b) {
    mo.noalias() = ma.transpose() * mb.transpose();
  } else if (transpose_a) {
    mo.noalias() = ma.transpose() * mb;
  } else if (transpose_b) {
    mo.noalias() = ma * mb.transpose();
  } else {
    mo.noalias() = ma * mb;
  }
  return Tensor({m, n}, std::move(out));
}

double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

double squared_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return s;
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

Tensor slice_leading(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() == 0 || begin > end || end > a.dim(0)) {
    throw ContractViolation("slice_leading: bad range on " + shape_string(a.shape()));
  }
  const std::size_t inner = a.size() / std::max<std::size_t>(a.dim(0), 1);
  Shape shape = a.shape();
  shape[0] = end - begin;
  return Tensor(shape, std::vector<double>(a.begin() + begin * inner, a.begin() + end * inner));
}

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractViolation("stack: no parts");
  Shape shape = parts.front().shape();
  std::vector<double> out;
  out.reserve(parts.size() * parts.front().size());
  for (const auto& p : parts) {
    require_same_shape(parts.front(), p, "stack");
    out.insert(out.end(), p.begin(), p.end());
  }
  shape.insert(shape.begin(), parts.size());
  return Tensor(std::move(shape), std::move(out));
}

std::vector<unsigned char> encode_tensor(const Tensor& t) {
  std::vector<unsigned char> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put_le<std::uint64_t>(out, e);
  for (double v : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Tensor decode_tensor(std::span<const unsigned char> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw IoError("tensor file: bad magic");
  }
  std::size_t pos = 8;
  const auto rank = get_le<std::uint32_t>(bytes, pos);
  if (rank > 16) throw IoError("tensor file: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<std::size_t>(get_le<std::uint64_t>(bytes, pos));
  const std::size_t n = shape_size(shape);
  if (bytes.size() - pos != n * 8) throw IoError("tensor file: payload size mismatch");
  std::vector<double> data(n);
  for (auto& v : data) v = std::bit_cast<double>(get_le<std::uint64_t>(bytes, pos));
  return Tensor::from_external(std::move(shape), std::move(data));
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

}  // namespace stcl
