#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>

#include "gaussproto/tensor.hpp"

namespace gaussproto {

// Central-difference estimate of the gradient of a scalar function. Used as
// the reference every analytic backward rule is checked against.
template <class F>
Tensor<double> finite_difference_gradient(F&& f, const Tensor<double>& x,
                                          double step = 1e-5) {
  Tensor<double> grad = Tensor<double>::like(x);
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double fp = f(probe);
    probe[i] = orig - step;
    const double fm = f(probe);
    probe[i] = orig;
    grad[i] = (fp - fm) / (2.0 * step);
  }
  return grad;
}

// max_i |a_i - b_i| / max(1, max_i |b_i|): relative to the gradient scale,
// falling back to absolute error for tiny gradients.
inline double gradient_relative_error(const Tensor<double>& analytic,
                                      const Tensor<double>& numeric) {
  double num = 0.0, scale = 1.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    num = std::max(num, std::abs(analytic[i] - numeric[i]));
    scale = std::max(scale, std::abs(numeric[i]));
  }
  return num / scale;
}

}  // namespace gaussproto
