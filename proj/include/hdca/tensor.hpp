#pragma once

// Dense row-major tensors with a runtime element type.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

namespace hdca {

enum class DType : std::uint8_t { Float32 = 1, Float64 = 2 };

using Shape = std::vector<std::size_t>;

std::string to_string(DType dtype);
std::string to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when operand shapes, ranks or element types are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a kernel would produce a non-finite value.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, DType dtype = DType::Float32);

  static Tensor zeros(Shape shape, DType dtype = DType::Float32);
  static Tensor ones(Shape shape, DType dtype = DType::Float32);
  static Tensor full(Shape shape, double value, DType dtype = DType::Float32);
  static Tensor scalar(double value, DType dtype = DType::Float32);
  static Tensor from(Shape shape, std::span<const double> values, DType dtype = DType::Float32);
  static Tensor from(Shape shape, std::initializer_list<double> values,
                     DType dtype = DType::Float32);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept;
  DType dtype() const noexcept { return dtype_; }

  template <typename T>
  std::span<T> data() {
    return std::span<T>(std::get<std::vector<T>>(storage_));
  }
  template <typename T>
  std::span<const T> data() const {
    return std::span<const T>(std::get<std::vector<T>>(storage_));
  }

  double at(std::size_t flat_index) const;
  void set(std::size_t flat_index, double value);
  std::vector<double> to_vector() const;

  Tensor astype(DType dtype) const;
  /// Same buffer, new shape of equal element count.
  Tensor reshaped(Shape shape) const;

  void fill(double value);
  /// this += other, elementwise; shapes and dtypes must agree.
  void add_inplace(const Tensor& other);
  void scale_inplace(double factor);

  bool all_finite() const;
  double max_abs() const;
  double sum() const;

  /// Bit-exact equality of shape, dtype and data.
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Shape shape_;
  DType dtype_ = DType::Float32;
  std::variant<std::vector<float>, std::vector<double>> storage_;
};

/// Calls fn(T{}) with T = float or double matching the dtype.
template <typename Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
  if (dtype == DType::Float32) return fn(float{});
  return fn(double{});
}

template <typename T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::Float32 : DType::Float64;
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op);
void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

}  // namespace hdca
