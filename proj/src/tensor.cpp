#include "hdca/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace hdca {

std::string to_string(DType dtype) {
  return dtype == DType::Float32 ? "float32" : "float64";
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

void check_shape(const Shape& shape) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
}

}  // namespace

Tensor::Tensor() : shape_{}, storage_(std::vector<float>(1, 0.0f)) {}

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
  check_shape(shape_);
  const std::size_t n = shape_numel(shape_);
  if (dtype_ == DType::Float32) {
    storage_ = std::vector<float>(n, 0.0f);
  } else {
    storage_ = std::vector<double>(n, 0.0);
  }
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return Tensor(std::move(shape), dtype); }

Tensor Tensor::ones(Shape shape, DType dtype) { return full(std::move(shape), 1.0, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t(std::move(shape), dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

Tensor Tensor::from(Shape shape, std::span<const double> values, DType dtype) {
  Tensor t(std::move(shape), dtype);
  if (values.size() != t.numel()) {
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                     to_string(t.shape()));
  }
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto out = t.data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, DType dtype) {
  return from(std::move(shape), std::span<const double>(values.begin(), values.size()), dtype);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::numel() const noexcept { return shape_numel(shape_); }

double Tensor::at(std::size_t flat_index) const {
  return dispatch(dtype_, [&](auto tag) -> double {
    using T = decltype(tag);
    return static_cast<double>(data<T>()[flat_index]);
  });
}

void Tensor::set(std::size_t flat_index, double value) {
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    data<T>()[flat_index] = static_cast<T>(value);
  });
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

Tensor Tensor::astype(DType dtype) const {
  if (dtype == dtype_) return *this;
  const auto values = to_vector();
  return from(shape_, values, dtype);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("reshape: cannot view " + to_string(shape_) + " as " + to_string(shape));
  }
  check_shape(shape);
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

void Tensor::fill(double value) {
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
}

void Tensor::add_inplace(const Tensor& other) {
  require_same_dtype(*this, other, "add_inplace");
  if (other.numel() != numel()) {
    throw ShapeError("add_inplace: " + to_string(shape_) + " vs " + to_string(other.shape_));
  }
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    auto o = other.data<T>();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += o[i];
  });
}

void Tensor::scale_inplace(double factor) {
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    for (auto& v : data<T>()) v = static_cast<T>(v * factor);
  });
}

bool Tensor::all_finite() const {
  return dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    return std::all_of(d.begin(), d.end(), [](T v) { return std::isfinite(v); });
  });
}

double Tensor::max_abs() const {
  return dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    double m = 0.0;
    for (T v : data<T>()) m = std::max(m, static_cast<double>(std::abs(v)));
    return m;
  });
}

double Tensor::sum() const {
  return dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    double s = 0.0;
    for (T v : data<T>()) s += static_cast<double>(v);
    return s;
  });
}

bool operator==(const Tensor& a, const Tensor& b) {
  if (a.shape_ != b.shape_ || a.dtype_ != b.dtype_) return false;
  return dispatch(a.dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto x = a.data<T>();
    auto y = b.data<T>();
    return std::equal(x.begin(), x.end(), y.begin(), [](T p, T q) {
      return std::memcmp(&p, &q, sizeof(T)) == 0;
    });
  });
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ShapeError(std::string(op) + ": dtype mismatch " + to_string(a.dtype()) + " vs " +
                     to_string(b.dtype()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_same_dtype(a, b, op);
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

}  // namespace hdca
