#pragma once

// Differentiable primitives over Graph variables: elementwise arithmetic,
// reductions, small matrix products and the softmax family of losses.

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "gaussproto/autodiff.hpp"
#include "gaussproto/linalg.hpp"

namespace gaussproto::ops {

namespace detail {

template <class T>
void require_matrix(const Tensor<T>& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeMismatch(std::string(what) + " expects a matrix, got " +
                        shape_string(t.shape()));
  }
}

}  // namespace detail

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  const auto& y = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  return a.graph->record("add", std::move(out), {a, b},
                         [a, b](Graph<T>& g, const Tensor<T>& d) {
                           g.accumulate(a, d);
                           g.accumulate(b, d);
                         });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  const auto& y = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  return a.graph->record("sub", std::move(out), {a, b},
                         [a, b](Graph<T>& g, const Tensor<T>& d) {
                           g.accumulate(a, d);
                           if (g.requires_grad(b)) {
                             auto& gb = g.grad_ref(b);
                             for (std::size_t i = 0; i < d.size(); ++i) gb[i] -= d[i];
                           }
                         });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  const auto& y = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  return a.graph->record("mul", std::move(out), {a, b},
                         [a, b](Graph<T>& g, const Tensor<T>& d) {
                           const auto& x = g.value(a);
                           const auto& y = g.value(b);
                           if (g.requires_grad(a)) {
                             auto& ga = g.grad_ref(a);
                             for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i] * y[i];
                           }
                           if (g.requires_grad(b)) {
                             auto& gb = g.grad_ref(b);
                             for (std::size_t i = 0; i < d.size(); ++i) gb[i] += d[i] * x[i];
                           }
                         });
}

template <class T>
Var<T> scale(Var<T> a, T c) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= c;
  return a.graph->record("scale", std::move(out), {a},
                         [a, c](Graph<T>& g, const Tensor<T>& d) {
                           auto& ga = g.grad_ref(a);
                           for (std::size_t i = 0; i < d.size(); ++i) ga[i] += c * d[i];
                         });
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.graph->record("reshape", std::move(out), {a},
                         [a](Graph<T>& g, const Tensor<T>& d) {
                           auto& ga = g.grad_ref(a);
                           for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i];
                         });
}

// a[..., N] + v[N], broadcasting v over all leading axes.
template <class T>
Var<T> add_rowvec(Var<T> a, Var<T> v) {
  const auto& x = a.value();
  const auto& r = v.value();
  if (x.rank() == 0 || r.rank() != 1 || x.shape().back() != r.dim(0)) {
    throw ShapeMismatch("add_rowvec: " + shape_string(x.shape()) + " + " +
                        shape_string(r.shape()));
  }
  const std::size_t n = r.dim(0);
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += r[i % n];
  return a.graph->record("add_rowvec", std::move(out), {a, v},
                         [a, v, n](Graph<T>& g, const Tensor<T>& d) {
                           g.accumulate(a, d);
                           if (g.requires_grad(v)) {
                             auto& gv = g.grad_ref(v);
                             for (std::size_t i = 0; i < d.size(); ++i) gv[i % n] += d[i];
                           }
                         });
}

template <class T>
Var<T> sum(Var<T> a) {
  T s{};
  for (auto v : a.value().data()) s += v;
  return a.graph->record("sum", Tensor<T>::scalar(s), {a},
                         [a](Graph<T>& g, const Tensor<T>& d) {
                           auto& ga = g.grad_ref(a);
                           for (auto& v : ga.data()) v += d[0];
                         });
}

template <class T>
Var<T> mean(Var<T> a) {
  const T inv = T(1) / static_cast<T>(a.value().size());
  return scale(sum(a), inv);
}

template <class T>
Var<T> square(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= v;
  return a.graph->record("square", std::move(out), {a},
                         [a](Graph<T>& g, const Tensor<T>& d) {
                           const auto& x = g.value(a);
                           auto& ga = g.grad_ref(a);
                           for (std::size_t i = 0; i < d.size(); ++i) ga[i] += T(2) * x[i] * d[i];
                         });
}

template <class T>
Var<T> exp(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = std::exp(v);
  return a.graph->record_with_output("exp", std::move(out), {a},
                         [a](Graph<T>& g, const Tensor<T>& d, const Tensor<T>& y) {
                           auto& ga = g.grad_ref(a);
                           for (std::size_t i = 0; i < d.size(); ++i) ga[i] += y[i] * d[i];
                         });
}

template <class T>
Var<T> log(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) {
    if (!(v > T(0))) throw NotFinite("log of non-positive value");
    v = std::log(v);
  }
  return a.graph->record("log", std::move(out), {a},
                         [a](Graph<T>& g, const Tensor<T>& d) {
                           const auto& x = g.value(a);
                           auto& ga = g.grad_ref(a);
                           for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i] / x[i];
                         });
}

template <class T>
Var<T> softplus(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = gaussproto::softplus(v);
  return a.graph->record("softplus", std::move(out), {a},
                         [a](Graph<T>& g, const Tensor<T>& d) {
                           const auto& x = g.value(a);
                           auto& ga = g.grad_ref(a);
                           for (std::size_t i = 0; i < d.size(); ++i) {
                             ga[i] += d[i] * gaussproto::sigmoid(x[i]);
                           }
                         });
}

template <class T>
Var<T> leaky_relu(Var<T> a, T slope) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = v > T(0) ? v : slope * v;
  return a.graph->record("leaky_relu", std::move(out), {a},
                         [a, slope](Graph<T>& g, const Tensor<T>& d) {
                           const auto& x = g.value(a);
                           auto& ga = g.grad_ref(a);
                           for (std::size_t i = 0; i < d.size(); ++i) {
                             ga[i] += x[i] > T(0) ? d[i] : slope * d[i];
                           }
                         });
}

// C = A B with A[M x K], B[K x N].
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& x = a.value();
  const auto& y = b.value();
  detail::require_matrix(x, "matmul");
  detail::require_matrix(y, "matmul");
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  if (y.dim(0) != k) {
    throw ShapeMismatch("matmul: " + shape_string(x.shape()) + " x " +
                        shape_string(y.shape()));
  }
  Tensor<T> out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T xv = x[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += xv * y[p * n + j];
    }
  return a.graph->record(
      "matmul", std::move(out), {a, b},
      [a, b, m, k, n](Graph<T>& g, const Tensor<T>& d) {
        const auto& x = g.value(a);
        const auto& y = g.value(b);
        if (g.requires_grad(a)) {
          auto& ga = g.grad_ref(a);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              T s{};
              for (std::size_t j = 0; j < n; ++j) s += d[i * n + j] * y[p * n + j];
              ga[i * k + p] += s;
            }
        }
        if (g.requires_grad(b)) {
          auto& gb = g.grad_ref(b);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const T xv = x[i * k + p];
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += xv * d[i * n + j];
            }
        }
      });
}

// C = A B^T with A[M x K], B[N x K].
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  const auto& x = a.value();
  const auto& y = b.value();
  detail::require_matrix(x, "matmul_nt");
  detail::require_matrix(y, "matmul_nt");
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(0);
  if (y.dim(1) != k) {
    throw ShapeMismatch("matmul_nt: " + shape_string(x.shape()) + " x " +
                        shape_string(y.shape()) + "^T");
  }
  Tensor<T> out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T s{};
      for (std::size_t p = 0; p < k; ++p) s += x[i * k + p] * y[j * k + p];
      out[i * n + j] = s;
    }
  return a.graph->record(
      "matmul_nt", std::move(out), {a, b},
      [a, b, m, k, n](Graph<T>& g, const Tensor<T>& d) {
        const auto& x = g.value(a);
        const auto& y = g.value(b);
        if (g.requires_grad(a)) {
          auto& ga = g.grad_ref(a);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              const T dv = d[i * n + j];
              for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += dv * y[j * k + p];
            }
        }
        if (g.requires_grad(b)) {
          auto& gb = g.grad_ref(b);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              const T dv = d[i * n + j];
              for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += dv * x[i * k + p];
            }
        }
      });
}

// log_softmax over the last axis.
template <class T>
Var<T> log_softmax(Var<T> a) {
  const auto& x = a.value();
  if (x.rank() == 0) throw ShapeMismatch("log_softmax of a scalar");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor<T> out = x;
  for (std::size_t r = 0; r < rows; ++r) {
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) m = std::max(m, x[r * n + j]);
    T s{};
    for (std::size_t j = 0; j < n; ++j) s += std::exp(x[r * n + j] - m);
    const T lse = m + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] - lse;
  }
  return a.graph->record_with_output(
      "log_softmax", std::move(out), {a},
      [a, n, rows](Graph<T>& g, const Tensor<T>& d, const Tensor<T>& y) {
        auto& ga = g.grad_ref(a);
        for (std::size_t r = 0; r < rows; ++r) {
          T ds{};
          for (std::size_t j = 0; j < n; ++j) ds += d[r * n + j];
          for (std::size_t j = 0; j < n; ++j) {
            ga[r * n + j] += d[r * n + j] - std::exp(y[r * n + j]) * ds;
          }
        }
      });
}

// log-sum-exp over the last axis; the last axis is dropped.
template <class T>
Var<T> log_sum_exp(Var<T> a) {
  const auto& x = a.value();
  if (x.rank() == 0) throw ShapeMismatch("log_sum_exp of a scalar");
  Tensor<T> out = gaussproto::log_sum_exp(x, x.rank() - 1);
  const std::size_t n = x.shape().back();
  return a.graph->record_with_output("log_sum_exp", std::move(out), {a},
                         [a, n](Graph<T>& g, const Tensor<T>& d, const Tensor<T>& y) {
                           const auto& x = g.value(a);
                           auto& ga = g.grad_ref(a);
                           for (std::size_t i = 0; i < x.size(); ++i) {
                             ga[i] += d[i / n] * std::exp(x[i] - y[i / n]);
                           }
                         });
}

// Mean negative log-probability of the labelled entry in each row of a
// [M x C] log-probability matrix. Labels are 0-based class indices.
template <class T>
Var<T> nll(Var<T> logp, std::span<const int> labels) {
  const auto& x = logp.value();
  detail::require_matrix(x, "nll");
  const std::size_t m = x.dim(0), c = x.dim(1);
  if (labels.size() != m) {
    throw ShapeMismatch("nll: " + std::to_string(labels.size()) +
                        " labels for " + std::to_string(m) + " rows");
  }
  std::vector<int> lab(labels.begin(), labels.end());
  T s{};
  for (std::size_t i = 0; i < m; ++i) {
    if (lab[i] < 0 || static_cast<std::size_t>(lab[i]) >= c) {
      throw LabelOutOfRange("label " + std::to_string(lab[i]) +
                            " outside [0," + std::to_string(c) + ")");
    }
    s -= x[i * c + lab[i]];
  }
  return logp.graph->record("nll", Tensor<T>::scalar(s / static_cast<T>(m)), {logp},
                            [logp, lab = std::move(lab), m, c](Graph<T>& g, const Tensor<T>& d) {
                              auto& gx = g.grad_ref(logp);
                              const T w = -d[0] / static_cast<T>(m);
                              for (std::size_t i = 0; i < m; ++i) gx[i * c + lab[i]] += w;
                            });
}

template <class T>
Var<T> cross_entropy(Var<T> scores, std::span<const int> labels) {
  return nll(log_softmax(scores), labels);
}

template <class T>
Var<T> mse(Var<T> a, Var<T> b) {
  return mean(square(sub(a, b)));
}

// [B, C, H, W] -> [B*H*W, C], rows ordered by (b, h, w).
template <class T>
Var<T> nchw_to_rows(Var<T> a) {
  const auto& x = a.value();
  if (x.rank() != 4) throw ShapeMismatch("nchw_to_rows expects rank 4");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{b * hw, c});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) out[(n * hw + p) * c + ch] = x[(n * c + ch) * hw + p];
  return a.graph->record("nchw_to_rows", std::move(out), {a},
                         [a, b, c, hw](Graph<T>& g, const Tensor<T>& d) {
                           auto& ga = g.grad_ref(a);
                           for (std::size_t n = 0; n < b; ++n)
                             for (std::size_t ch = 0; ch < c; ++ch)
                               for (std::size_t p = 0; p < hw; ++p)
                                 ga[(n * c + ch) * hw + p] += d[(n * hw + p) * c + ch];
                         });
}

// Selects rows of a matrix (repeats allowed).
template <class T>
Var<T> gather_rows(Var<T> a, std::span<const std::size_t> rows) {
  const auto& x = a.value();
  detail::require_matrix(x, "gather_rows");
  const std::size_t k = x.dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  if (idx.empty()) throw EmptyBatch("gather_rows with no rows");
  Tensor<T> out(Shape{idx.size(), k});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.dim(0)) throw ShapeMismatch("gather_rows index out of range");
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = x[idx[i] * k + j];
  }
  return a.graph->record("gather_rows", std::move(out), {a},
                         [a, idx = std::move(idx), k](Graph<T>& g, const Tensor<T>& d) {
                           auto& ga = g.grad_ref(a);
                           for (std::size_t i = 0; i < idx.size(); ++i)
                             for (std::size_t j = 0; j < k; ++j) ga[idx[i] * k + j] += d[i * k + j];
                         });
}

}  // namespace gaussproto::ops
