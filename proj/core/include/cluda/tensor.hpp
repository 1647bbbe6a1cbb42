#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "cluda/error.hpp"

namespace cluda {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) fail(ErrorKind::ShapeMismatch, "negative dimension");
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape);

// Dense row-major n-d array. T is float for training and double for
// correctness tests; the scalar type is the dtype.
template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> data;

  TensorData() = default;
  TensorData(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::int64_t>(data.size()) != numel(shape))
      fail(ErrorKind::ShapeMismatch,
           "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  }

  static TensorData zeros(Shape s) {
    std::vector<T> d(static_cast<std::size_t>(numel(s)), T(0));
    return TensorData(std::move(s), std::move(d));
  }
  static TensorData full(Shape s, T value) {
    std::vector<T> d(static_cast<std::size_t>(numel(s)), value);
    return TensorData(std::move(s), std::move(d));
  }
  static TensorData scalar(T value) { return TensorData(Shape{}, std::vector<T>{value}); }

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

  T& at(std::size_t i) { return data[i]; }
  T at(std::size_t i) const { return data[i]; }

  bool finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  TensorData<U> cast() const {
    std::vector<U> d(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) d[i] = static_cast<U>(data[i]);
    return TensorData<U>(shape, std::move(d));
  }
};

using TensorF = TensorData<float>;
using TensorD = TensorData<double>;

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

}  // namespace cluda
