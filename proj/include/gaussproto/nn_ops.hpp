#pragma once

// Convolutional layer primitives on NCHW tensors: convolution, transposed
// convolution, batch normalization and global average pooling. Matrix
// products go through Eigen; everything else is plain loops.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <string>
#include <type_traits>
#include <vector>

#include "gaussproto/autodiff.hpp"
#include "gaussproto/parallel.hpp"

namespace gaussproto::ops {

struct ConvGeometry {
  std::size_t channels = 0;  // channels of the image side
  std::size_t height = 0, width = 0;  // image side extent
  std::size_t kernel = 3, stride = 1, pad = 0;
  std::size_t out_height = 0, out_width = 0;  // column side extent

  static ConvGeometry forward(std::size_t c, std::size_t h, std::size_t w,
                              std::size_t k, std::size_t s, std::size_t p) {
    if (h + 2 * p < k || w + 2 * p < k) {
      throw ShapeMismatch("convolution kernel larger than padded input");
    }
    ConvGeometry g{c, h, w, k, s, p, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1};
    return g;
  }

  std::size_t col_rows() const { return channels * kernel * kernel; }
  std::size_t col_cols() const { return out_height * out_width; }
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

// image [C, H, W] -> columns [C*k*k, Ho*Wo]
template <class T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::size_t p_cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * p_cols;
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          T* dst = row + oy * g.out_width;
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            std::fill(dst, dst + g.out_width, T(0));
            continue;
          }
          const T* src = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_width; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? T(0)
                                                                    : src[ix];
          }
        }
      }
}

// Adjoint of im2col: scatters columns back into an image (accumulating).
template <class T>
void col2im(const T* col, const ConvGeometry& g, T* img) {
  const std::size_t p_cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * p_cols;
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          T* dst = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          const T* src = row + oy * g.out_width;
          for (std::size_t ox = 0; ox < g.out_width; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.width)) dst[ix] += src[ox];
          }
        }
      }
}

template <class T>
void require_rank(const Tensor<T>& t, std::size_t r, const char* what) {
  if (t.rank() != r) {
    throw ShapeMismatch(std::string(what) + " expects rank " + std::to_string(r) +
                        ", got " + shape_string(t.shape()));
  }
}

}  // namespace detail

// 2-D convolution. x[B, Ci, H, W], weight[Co, Ci, k, k], bias[Co] (optional).
template <class T>
Var<T> conv2d(Var<T> x, Var<T> weight, std::type_identity_t<const Var<T>*> bias, std::size_t stride,
              std::size_t pad) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  detail::require_rank(xv, 4, "conv2d input");
  detail::require_rank(wv, 4, "conv2d weight");
  if (wv.dim(1) != xv.dim(1) || wv.dim(2) != wv.dim(3)) {
    throw ShapeMismatch("conv2d: weight " + shape_string(wv.shape()) +
                        " incompatible with input " + shape_string(xv.shape()));
  }
  if (stride == 0) throw InvalidArgument("conv2d stride must be positive");
  const std::size_t batch = xv.dim(0), co = wv.dim(0);
  const auto geo = ConvGeometry::forward(xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(2), stride, pad);
  const std::size_t krows = geo.col_rows(), pcols = geo.col_cols();
  const std::size_t in_stride = xv.size() / batch;
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != co)) {
    throw ShapeMismatch("conv2d bias must have one entry per output channel");
  }

  Tensor<T> out(Shape{batch, co, geo.out_height, geo.out_width});
  const T* bptr = bias ? bias->value().data().data() : nullptr;
  parallel_chunks(batch, [&](std::size_t b0, std::size_t b1, std::size_t) {
    std::vector<T> col(krows * pcols);
    detail::ConstMapMat<T> w(wv.data().data(), co, krows);
    for (std::size_t b = b0; b < b1; ++b) {
      detail::im2col(xv.data().data() + b * in_stride, geo, col.data());
      detail::MapMat<T> o(out.data().data() + b * co * pcols, co, pcols);
      o.noalias() = w * detail::ConstMapMat<T>(col.data(), krows, pcols);
      if (bptr) {
        for (std::size_t c = 0; c < co; ++c) o.row(c).array() += bptr[c];
      }
    }
  });

  Var<T> bias_var = bias ? *bias : x;
  const bool has_bias = bias != nullptr;
  auto backward = [x, weight, bias_var, has_bias, geo, batch, co, krows, pcols,
                   in_stride](Graph<T>& g, const Tensor<T>& d) {
    const auto& xv = g.value(x);
    const auto& wv = g.value(weight);
    const bool need_x = g.requires_grad(x);
    const bool need_w = g.requires_grad(weight);
    const bool need_b = has_bias && g.requires_grad(bias_var);
    Tensor<T>* gx = need_x ? &g.grad_ref(x) : nullptr;
    const std::size_t workers = worker_count();
    std::vector<std::vector<T>> gw_parts(need_w ? workers : 0);
    parallel_chunks(batch, [&](std::size_t b0, std::size_t b1, std::size_t wk) {
      std::vector<T> col(krows * pcols);
      detail::ConstMapMat<T> w(wv.data().data(), co, krows);
      detail::RowMat<T> gw_local;
      if (need_w) gw_local = detail::RowMat<T>::Zero(co, krows);
      for (std::size_t b = b0; b < b1; ++b) {
        detail::ConstMapMat<T> dy(d.data().data() + b * co * pcols, co, pcols);
        if (need_w) {
          detail::im2col(xv.data().data() + b * in_stride, geo, col.data());
          gw_local.noalias() += dy * detail::ConstMapMat<T>(col.data(), krows, pcols).transpose();
        }
        if (need_x) {
          detail::MapMat<T> dcol(col.data(), krows, pcols);
          dcol.noalias() = w.transpose() * dy;
          detail::col2im(col.data(), geo, gx->data().data() + b * in_stride);
        }
      }
      if (need_w) gw_parts[wk].assign(gw_local.data(), gw_local.data() + co * krows);
    });
    if (need_w) {
      auto& gw = g.grad_ref(weight);
      for (const auto& part : gw_parts) {
        for (std::size_t i = 0; i < part.size(); ++i) gw[i] += part[i];
      }
    }
    if (need_b) {
      auto& gb = g.grad_ref(bias_var);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < co; ++c) {
          T s{};
          const T* row = d.data().data() + (b * co + c) * pcols;
          for (std::size_t p = 0; p < pcols; ++p) s += row[p];
          gb[c] += s;
        }
    }
  };
  if (has_bias) return x.graph->record("conv2d", std::move(out), {x, weight, *bias}, backward);
  return x.graph->record("conv2d", std::move(out), {x, weight}, backward);
}

// Transposed convolution (adjoint of conv2d in its input). x[B, Ci, H, W],
// weight[Ci, Co, k, k]; output extent (H-1)*stride - 2*pad + k.
template <class T>
Var<T> conv_transpose2d(Var<T> x, Var<T> weight, std::type_identity_t<const Var<T>*> bias,
                        std::size_t stride, std::size_t pad) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  detail::require_rank(xv, 4, "conv_transpose2d input");
  detail::require_rank(wv, 4, "conv_transpose2d weight");
  if (wv.dim(0) != xv.dim(1) || wv.dim(2) != wv.dim(3)) {
    throw ShapeMismatch("conv_transpose2d: weight " + shape_string(wv.shape()) +
                        " incompatible with input " + shape_string(xv.shape()));
  }
  if (stride == 0) throw InvalidArgument("conv_transpose2d stride must be positive");
  const std::size_t batch = xv.dim(0), ci = xv.dim(1), co = wv.dim(1), k = wv.dim(2);
  const std::size_t h = xv.dim(2), w = xv.dim(3);
  if ((h - 1) * stride + k <= 2 * pad || (w - 1) * stride + k <= 2 * pad) {
    throw ShapeMismatch("conv_transpose2d output would be empty");
  }
  const std::size_t ho = (h - 1) * stride + k - 2 * pad;
  const std::size_t wo = (w - 1) * stride + k - 2 * pad;
  // The output plays the image role of an ordinary convolution whose column
  // side is the input grid.
  ConvGeometry geo{co, ho, wo, k, stride, pad, h, w};
  const std::size_t krows = geo.col_rows(), pcols = geo.col_cols();
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != co)) {
    throw ShapeMismatch("conv_transpose2d bias must have one entry per output channel");
  }

  Tensor<T> out(Shape{batch, co, ho, wo});
  const T* bptr = bias ? bias->value().data().data() : nullptr;
  parallel_chunks(batch, [&](std::size_t b0, std::size_t b1, std::size_t) {
    std::vector<T> col(krows * pcols);
    detail::ConstMapMat<T> wm(wv.data().data(), ci, krows);
    for (std::size_t b = b0; b < b1; ++b) {
      detail::MapMat<T> cm(col.data(), krows, pcols);
      cm.noalias() = wm.transpose() * detail::ConstMapMat<T>(xv.data().data() + b * ci * pcols, ci, pcols);
      T* ob = out.data().data() + b * co * ho * wo;
      detail::col2im(col.data(), geo, ob);
      if (bptr) {
        for (std::size_t c = 0; c < co; ++c)
          for (std::size_t p = 0; p < ho * wo; ++p) ob[c * ho * wo + p] += bptr[c];
      }
    }
  });

  Var<T> bias_var = bias ? *bias : x;
  const bool has_bias = bias != nullptr;
  auto backward = [x, weight, bias_var, has_bias, geo, batch, ci, co, krows, pcols,
                   ho, wo](Graph<T>& g, const Tensor<T>& d) {
    const auto& xv = g.value(x);
    const auto& wv = g.value(weight);
    const bool need_x = g.requires_grad(x);
    const bool need_w = g.requires_grad(weight);
    const bool need_b = has_bias && g.requires_grad(bias_var);
    Tensor<T>* gx = need_x ? &g.grad_ref(x) : nullptr;
    const std::size_t workers = worker_count();
    std::vector<std::vector<T>> gw_parts(need_w ? workers : 0);
    parallel_chunks(batch, [&](std::size_t b0, std::size_t b1, std::size_t wk) {
      std::vector<T> col(krows * pcols);
      detail::ConstMapMat<T> wm(wv.data().data(), ci, krows);
      detail::RowMat<T> gw_local;
      if (need_w) gw_local = detail::RowMat<T>::Zero(ci, krows);
      for (std::size_t b = b0; b < b1; ++b) {
        detail::im2col(d.data().data() + b * co * ho * wo, geo, col.data());
        detail::ConstMapMat<T> cm(col.data(), krows, pcols);
        if (need_w) {
          gw_local.noalias() += detail::ConstMapMat<T>(xv.data().data() + b * ci * pcols, ci, pcols) * cm.transpose();
        }
        if (need_x) {
          detail::MapMat<T> gxb(gx->data().data() + b * ci * pcols, ci, pcols);
          gxb.noalias() += wm * cm;
        }
      }
      if (need_w) gw_parts[wk].assign(gw_local.data(), gw_local.data() + ci * krows);
    });
    if (need_w) {
      auto& gw = g.grad_ref(weight);
      for (const auto& part : gw_parts) {
        for (std::size_t i = 0; i < part.size(); ++i) gw[i] += part[i];
      }
    }
    if (need_b) {
      auto& gb = g.grad_ref(bias_var);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < co; ++c) {
          T s{};
          const T* row = d.data().data() + (b * co + c) * ho * wo;
          for (std::size_t p = 0; p < ho * wo; ++p) s += row[p];
          gb[c] += s;
        }
    }
  };
  if (has_bias) return x.graph->record("conv_transpose2d", std::move(out), {x, weight, *bias}, backward);
  return x.graph->record("conv_transpose2d", std::move(out), {x, weight}, backward);
}

// Running statistics of a batch-norm layer. Variances are stored biased
// (divided by the element count), matching what training mode normalizes by.
template <class T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNormStats() = default;
  explicit BatchNormStats(std::size_t channels)
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

enum class NormMode { kTrain, kInference };

// Batch normalization over all axes except axis 1 of x[B, C, ...]. In
// training mode batch statistics are used and, when `update` is set, folded
// into the running statistics.
template <class T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormStats<T>& stats,
                  NormMode mode, bool update) {
  const auto& xv = x.value();
  if (xv.rank() < 2) throw ShapeMismatch("batch_norm expects rank >= 2");
  const std::size_t batch = xv.dim(0), c = xv.dim(1);
  const std::size_t inner = xv.size() / (batch * c);
  const std::size_t count = batch * inner;
  if (gamma.value().size() != c || beta.value().size() != c ||
      stats.running_mean.size() != c) {
    throw ShapeMismatch("batch_norm parameter size does not match channels");
  }
  std::vector<T> mean(c), inv_std(c);
  if (mode == NormMode::kTrain) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      T s{};
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = xv.data().data() + (b * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) s += p[i];
      }
      const T m = s / static_cast<T>(count);
      T v{};
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = xv.data().data() + (b * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) v += (p[i] - m) * (p[i] - m);
      }
      v /= static_cast<T>(count);
      mean[ch] = m;
      inv_std[ch] = T(1) / std::sqrt(v + stats.eps);
      if (update) {
        stats.running_mean[ch] = (T(1) - stats.momentum) * stats.running_mean[ch] + stats.momentum * m;
        stats.running_var[ch] = (T(1) - stats.momentum) * stats.running_var[ch] + stats.momentum * v;
      }
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = stats.running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(stats.running_var[ch] + stats.eps);
    }
  }
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> out = Tensor<T>::like(xv);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        out[off + i] = gv[ch] * (xv[off + i] - mean[ch]) * inv_std[ch] + bv[ch];
      }
    }
  const bool train = mode == NormMode::kTrain;
  return x.graph->record(
      "batch_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, mean, inv_std, batch, c, inner, count, train](Graph<T>& g, const Tensor<T>& d) {
        const auto& xv = g.value(x);
        const auto& gv = g.value(gamma);
        std::vector<T> sum_d(c, T(0)), sum_dxhat(c, T(0));
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              const T xhat = (xv[off + i] - mean[ch]) * inv_std[ch];
              sum_d[ch] += d[off + i];
              sum_dxhat[ch] += d[off + i] * xhat;
            }
          }
        if (g.requires_grad(gamma)) {
          auto& gg = g.grad_ref(gamma);
          for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_dxhat[ch];
        }
        if (g.requires_grad(beta)) {
          auto& gb = g.grad_ref(beta);
          for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_d[ch];
        }
        if (g.requires_grad(x)) {
          auto& gx = g.grad_ref(x);
          const T n = static_cast<T>(count);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t off = (b * c + ch) * inner;
              const T k = gv[ch] * inv_std[ch];
              for (std::size_t i = 0; i < inner; ++i) {
                if (train) {
                  const T xhat = (xv[off + i] - mean[ch]) * inv_std[ch];
                  gx[off + i] += k * (d[off + i] - sum_d[ch] / n - xhat * sum_dxhat[ch] / n);
                } else {
                  gx[off + i] += k * d[off + i];
                }
              }
            }
        }
      });
}

// x[B, C, H, W] -> [B, C]
template <class T>
Var<T> global_avg_pool(Var<T> x) {
  const auto& xv = x.value();
  detail::require_rank(xv, 4, "global_avg_pool");
  const std::size_t bc = xv.dim(0) * xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor<T> out(Shape{xv.dim(0), xv.dim(1)});
  for (std::size_t i = 0; i < bc; ++i) {
    T s{};
    for (std::size_t p = 0; p < hw; ++p) s += xv[i * hw + p];
    out[i] = s / static_cast<T>(hw);
  }
  return x.graph->record("global_avg_pool", std::move(out), {x},
                         [x, bc, hw](Graph<T>& g, const Tensor<T>& d) {
                           auto& gx = g.grad_ref(x);
                           const T inv = T(1) / static_cast<T>(hw);
                           for (std::size_t i = 0; i < bc; ++i)
                             for (std::size_t p = 0; p < hw; ++p) gx[i * hw + p] += d[i] * inv;
                         });
}

}  // namespace gaussproto::ops
