#pragma once

#include <functional>

#include "cluda/tensor.hpp"

namespace cluda {

// Central-difference gradient estimate of a scalar-valued function,
// (f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps) per coordinate. Used as the
// independent oracle against analytic backward results.
TensorD finite_difference_gradient(const std::function<double(const TensorD&)>& f,
                                   const TensorD& at, double eps);

// Variant for functions returning tensors; rejects non-scalar results.
TensorD finite_difference_gradient(const std::function<TensorD(const TensorD&)>& f,
                                   const TensorD& at, double eps);

// |a - b| / max(1, |a|, |b|), the relative-error metric of the gradient suite.
double relative_error(double a, double b);

// Max relative error over two same-length gradient vectors.
double max_relative_error(const TensorD& a, const TensorD& b);

}  // namespace cluda
