#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>
#include <algorithm>

#include "gaussproto/errors.hpp"
#include "gaussproto/tensor.hpp"

namespace gaussproto {

// ---- scalar special functions ---------------------------------------------

// log(1 + exp(x)) without overflow.
template <class T>
T softplus(T x) {
  if (x > T(30)) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

template <class T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// Inverse of softplus for y > 0.
template <class T>
T softplus_inverse(T y) {
  if (y > T(30)) return y + std::log(-std::expm1(-y));
  return std::log(std::expm1(y));
}

// ---- dense kernels on row-major n x n blocks -------------------------------

// In-place lower Cholesky factorization of a row-major n x n block. The
// strictly upper part is zeroed. Throws NotPositiveDefinite on a non-positive
// pivot.
template <class T>
void cholesky_in_place(std::span<T> a, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    T d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (!(d > T(0))) {
      throw NotPositiveDefinite("non-positive pivot " + std::to_string(double(d)) +
                                " at column " + std::to_string(j));
    }
    const T ljj = std::sqrt(d);
    a[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      T s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / ljj;
    }
    for (std::size_t k = j + 1; k < n; ++k) a[j * n + k] = T(0);
  }
}

// Solves L y = b for lower-triangular L (row-major n x n), overwriting b.
template <class T>
void solve_lower(std::span<const T> l, std::size_t n, std::span<T> b) {
  for (std::size_t i = 0; i < n; ++i) {
    T s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l[i * n + k] * b[k];
    b[i] = s / l[i * n + i];
  }
}

// Solves L^T x = y for lower-triangular L, overwriting y.
template <class T>
void solve_lower_transposed(std::span<const T> l, std::size_t n, std::span<T> y) {
  for (std::size_t ii = n; ii-- > 0;) {
    T s = y[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l[k * n + ii] * y[k];
    y[ii] = s / l[ii * n + ii];
  }
}

// Inverse of A = L L^T given its Cholesky factor, written to `inv` (n x n).
template <class T>
void cholesky_inverse(std::span<const T> l, std::size_t n, std::span<T> inv) {
  std::vector<T> col(n);
  for (std::size_t j = 0; j < n; ++j) {
    std::fill(col.begin(), col.end(), T(0));
    col[j] = T(1);
    solve_lower<T>(l, n, col);
    solve_lower_transposed<T>(l, n, col);
    for (std::size_t i = 0; i < n; ++i) inv[i * n + j] = col[i];
  }
}

// ---- tensor-level operations ----------------------------------------------

// Lower Cholesky factor L of a symmetric positive definite matrix, L L^T = A.
template <class T>
Tensor<T> cholesky(const Tensor<T>& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw ShapeMismatch("cholesky expects a square matrix, got " +
                        shape_string(a.shape()));
  }
  const std::size_t n = a.dim(0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (std::abs(a(i, j) - a(j, i)) > T(1e-9)) {
        throw InvalidArgument("cholesky input is not symmetric");
      }
    }
  }
  Tensor<T> l = a;
  cholesky_in_place<T>(l.data(), n);
  return l;
}

// log(sum(exp(v))) along `axis`, computed with a max shift. The reduced axis
// is removed from the output shape.
template <class T>
Tensor<T> log_sum_exp(const Tensor<T>& v, std::size_t axis) {
  if (axis >= v.rank()) {
    throw ShapeMismatch("log_sum_exp axis " + std::to_string(axis) +
                        " out of range for " + shape_string(v.shape()));
  }
  const auto& shape = v.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out_shape.push_back(shape[i]);
  }
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < len; ++k) {
        m = std::max(m, v[(o * len + k) * inner + in]);
      }
      T s = 0;
      for (std::size_t k = 0; k < len; ++k) {
        s += std::exp(v[(o * len + k) * inner + in] - m);
      }
      out[o * inner + in] = m + std::log(s);
    }
  }
  return out;
}

}  // namespace gaussproto
