#include "cluda/grad_check.hpp"

#include <cmath>

namespace cluda {

TensorD finite_difference_gradient(const std::function<double(const TensorD&)>& f,
                                   const TensorD& at, double eps) {
  if (eps <= 0.0) fail(ErrorKind::InvalidArgument, "finite differences need eps > 0");
  TensorD grad = TensorD::zeros(at.shape);
  TensorD probe = at;
  for (std::size_t i = 0; i < probe.data.size(); ++i) {
    const double saved = probe.data[i];
    probe.data[i] = saved + eps;
    const double hi = f(probe);
    probe.data[i] = saved - eps;
    const double lo = f(probe);
    probe.data[i] = saved;
    grad.data[i] = (hi - lo) / (2.0 * eps);
  }
  return grad;
}

TensorD finite_difference_gradient(const std::function<TensorD(const TensorD&)>& f,
                                   const TensorD& at, double eps) {
  return finite_difference_gradient(
      [&f](const TensorD& x) {
        const TensorD y = f(x);
        if (y.size() != 1)
          fail(ErrorKind::NonScalarLoss,
               "finite differences need a scalar-valued function, got shape " + shape_str(y.shape));
        return static_cast<double>(y.data[0]);
      },
      at, eps);
}

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

double max_relative_error(const TensorD& a, const TensorD& b) {
  if (!same_shape(a.shape, b.shape))
    fail(ErrorKind::ShapeMismatch,
         "gradient shapes differ: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  double worst = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    worst = std::max(worst, relative_error(a.data[i], b.data[i]));
  return worst;
}

}  // namespace cluda
