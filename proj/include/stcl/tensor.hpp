#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stcl {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Immutable dense row-major array of doubles. Copies share the buffer.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor identity(std::size_t n);
  // Rejects NaN/Inf; use for anything read from files or user input.
  static Tensor from_external(Shape shape, std::vector<double> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_->size(); }
  std::size_t dim(std::size_t axis) const;
  std::span<const double> data() const noexcept { return *data_; }
  const double* begin() const noexcept { return data_->data(); }
  const double* end() const noexcept { return data_->data() + data_->size(); }

  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t i, std::size_t j) const;
  // Value of a single-element tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;
  std::vector<double> to_vector() const { return *data_; }
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, double s);
Tensor shifted(const Tensor& a, double s);
// a·x + b·y, elementwise.
Tensor axpby(double a, const Tensor& x, double b, const Tensor& y);
Tensor transpose(const Tensor& a);
// Rank-2 product op(a)·op(b), op transposes when requested.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);
double sum(const Tensor& a);
double squared_norm(const Tensor& a);
double max_abs(const Tensor& a);
// Rows [begin, end) of the leading axis.
Tensor slice_leading(const Tensor& a, std::size_t begin, std::size_t end);
// Stacks equal-shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> parts);

// Portable tensor file: "STCLTNSR", u32 LE rank, rank × u64 LE extents, f64 LE data.
std::vector<unsigned char> encode_tensor(const Tensor& t);
Tensor decode_tensor(std::span<const unsigned char> bytes);
void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

}  // namespace stcl
