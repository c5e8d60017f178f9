#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace stackcap {

/// Raised when operand shapes are incompatible. The message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a NaN or infinity shows up in a tensor.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

/// Dense row-major tensor of doubles.
///
/// Every op in the library views a tensor as a matrix: `cols()` is the last
/// dimension and `rows()` the product of all others. A rank-1 tensor of
/// length n is therefore a 1 x n row.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    check_shape();
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  static Tensor row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : data_.size() / cols(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row_span(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  /// Scalar value; throws unless the tensor holds exactly one element.
  double item() const {
    if (data_.size() != 1) {
      throw ShapeError("item() on non-scalar tensor of shape " + shape_string(shape_));
    }
    return data_[0];
  }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

inline bool same_shape(const Tensor& a, const Tensor& b) {
  return a.rows() == b.rows() && a.cols() == b.cols();
}

inline void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite value in ") + what + " of shape " +
                       shape_string(t.shape()));
  }
}

// Little-endian binary encoding: u32 rank, u64 per dimension, f64 per element.

namespace detail {

template <typename U>
void write_le(std::ostream& os, U value) {
  static_assert(std::is_unsigned_v<U>);
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    buf[i] = static_cast<char>((value >> (8 * i)) & 0xFFu);
  }
  os.write(buf, sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  static_assert(std::is_unsigned_v<U>);
  unsigned char buf[sizeof(U)];
  is.read(reinterpret_cast<char*>(buf), sizeof(U));
  if (!is) throw std::runtime_error("unexpected end of stream");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    value |= static_cast<U>(buf[i]) << (8 * i);
  }
  return value;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape().size()));
  for (std::size_t d : t.shape()) detail::write_le<std::uint64_t>(os, d);
  for (double v : t.data()) detail::write_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
}

inline Tensor read_tensor(std::istream& is) {
  const auto rank = detail::read_le<std::uint32_t>(is);
  if (rank == 0 || rank > 8) throw std::runtime_error("corrupt tensor header (rank)");
  Shape shape(rank);
  for (auto& d : shape) {
    d = detail::read_le<std::uint64_t>(is);
    if (d == 0 || d > (std::uint64_t{1} << 32)) throw std::runtime_error("corrupt tensor header (dim)");
  }
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = std::bit_cast<double>(detail::read_le<std::uint64_t>(is));
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace stackcap
