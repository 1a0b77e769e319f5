#pragma once

// Gaussian Prototype Layer: a mixture of anisotropic Gaussians over latent
// vectors where every component is tied to one class, trained by gradient
// descent on its negative log-likelihood. A positive-weight linear head turns
// the per-component log-responsibilities into class scores.
//
// Parametrization (all constraints hold by construction):
//   prior weights  w = softmax(logits)
//   covariance     Sigma_k = L_k L_k^T + eps I, L_k lower triangular with
//                  L_k[i][j] = chol_raw_k[i][j] (i > j), exp(chol_raw_k[i][i])
//   head weights   A = softplus(raw_weights) >= 0
//
// Class labels are 0-based; class 0 is the background class.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gaussproto/autodiff.hpp"
#include "gaussproto/linalg.hpp"
#include "gaussproto/ops.hpp"
#include "gaussproto/optim.hpp"

namespace gaussproto {

inline constexpr double kCovarianceFloor = 1e-4;

template <class T>
struct GplParams {
  std::size_t num_components = 0;
  std::size_t dim = 0;
  Parameter<T> logits;    // [N]
  Parameter<T> means;     // [N, dim]
  Parameter<T> chol_raw;  // [N, dim, dim]
  std::vector<int> class_of;  // component -> class, fixed at construction
  T eps = static_cast<T>(kCovarianceFloor);

  GplParams() = default;
  GplParams(std::size_t n, std::size_t d, std::vector<int> classes)
      : num_components(n),
        dim(d),
        logits("gpl.logits", Tensor<T>(Shape{n})),
        means("gpl.means", Tensor<T>(Shape{n, d})),
        chol_raw("gpl.chol_raw", Tensor<T>(Shape{n, d, d})),
        class_of(std::move(classes)) {
    if (n == 0 || d == 0) throw InvalidArgument("GPL needs components and a dimension");
    if (class_of.size() != n) {
      throw InvalidArgument("class_of must list one class per component");
    }
    for (int c : class_of) {
      if (c < 0) throw LabelOutOfRange("negative class in class_of");
    }
  }

  std::vector<Parameter<T>*> parameters() { return {&logits, &means, &chol_raw}; }

  int num_classes() const {
    return class_of.empty() ? 0 : *std::max_element(class_of.begin(), class_of.end()) + 1;
  }

  // Lower-triangular factor L_k from the raw parametrization.
  Tensor<T> factor(std::size_t k) const {
    Tensor<T> l(Shape{dim, dim});
    const T* raw = chol_raw.value.data().data() + k * dim * dim;
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j <= i; ++j)
        l[i * dim + j] = i == j ? std::exp(raw[i * dim + i]) : raw[i * dim + j];
    return l;
  }

  Tensor<T> covariance(std::size_t k) const {
    const Tensor<T> l = factor(k);
    Tensor<T> s(Shape{dim, dim});
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j < dim; ++j) {
        T v{};
        for (std::size_t p = 0; p < dim; ++p) v += l[i * dim + p] * l[j * dim + p];
        s[i * dim + j] = v + (i == j ? eps : T(0));
      }
    return s;
  }

  Tensor<T> weights() const {
    Tensor<T> w = logits.value;
    T m = *std::max_element(w.data().begin(), w.data().end());
    T s{};
    for (auto& v : w.data()) s += (v = std::exp(v - m));
    for (auto& v : w.data()) v /= s;
    return w;
  }

  // Sets component k to mean mu and covariance sigma2 * I (sigma2 > eps).
  void set_isotropic(std::size_t k, std::span<const T> mu, T sigma2) {
    const T diag = std::log(std::sqrt(std::max(sigma2 - eps, eps)));
    T* raw = chol_raw.value.data().data() + k * dim * dim;
    for (std::size_t i = 0; i < dim; ++i) {
      means.value[k * dim + i] = mu[i];
      for (std::size_t j = 0; j < dim; ++j) raw[i * dim + j] = i == j ? diag : T(0);
    }
  }
};

template <class T>
struct LinearHead {
  std::size_t num_classes = 0;
  std::size_t num_components = 0;
  Parameter<T> raw_weights;  // [C, N]

  LinearHead() = default;
  LinearHead(std::size_t c, std::size_t n)
      : num_classes(c), num_components(n), raw_weights("head.raw_weights", Tensor<T>(Shape{c, n})) {}

  // Own-class weights start at 1, cross-class weights at 0.01.
  static LinearHead for_classes(std::span<const int> class_of, std::size_t num_classes) {
    LinearHead h(num_classes, class_of.size());
    const T own = softplus_inverse<T>(T(1));
    const T cross = softplus_inverse<T>(T(0.01));
    for (std::size_t y = 0; y < num_classes; ++y)
      for (std::size_t k = 0; k < class_of.size(); ++k)
        h.raw_weights.value[y * class_of.size() + k] =
            static_cast<std::size_t>(class_of[k]) == y ? own : cross;
    return h;
  }

  std::vector<Parameter<T>*> parameters() { return {&raw_weights}; }

  Tensor<T> effective() const {
    Tensor<T> a = raw_weights.value;
    for (auto& v : a.data()) v = softplus(v);
    return a;
  }
};

namespace ops {

// log N(z_b; mu_k, Sigma_k) for every row b of z[B, D] and component k,
// returning [B, N]. Sigma_k is rebuilt from chol_raw with the eps floor and
// factorized; the quadratic form uses triangular solves against that factor.
template <class T>
Var<T> gaussian_log_density(Var<T> z, Var<T> means, Var<T> chol_raw, T eps) {
  const auto& zv = z.value();
  const auto& mv = means.value();
  const auto& rv = chol_raw.value();
  if (zv.rank() != 2 || mv.rank() != 2 || rv.rank() != 3 || zv.dim(1) != mv.dim(1) ||
      rv.dim(0) != mv.dim(0) || rv.dim(1) != mv.dim(1) || rv.dim(2) != mv.dim(1)) {
    throw ShapeMismatch("gaussian_log_density: z " + shape_string(zv.shape()) + ", means " +
                        shape_string(mv.shape()) + ", chol_raw " + shape_string(rv.shape()));
  }
  const std::size_t batch = zv.dim(0), n = mv.dim(0), d = mv.dim(1);
  const std::size_t dd = d * d;

  // Per component: L (raw-derived), C = chol(L L^T + eps I), log|Sigma|.
  std::vector<T> lfac(n * dd, T(0)), cfac(n * dd, T(0)), logdet(n);
  for (std::size_t k = 0; k < n; ++k) {
    const T* raw = rv.data().data() + k * dd;
    T* l = lfac.data() + k * dd;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j <= i; ++j) l[i * d + j] = i == j ? std::exp(raw[i * d + i]) : raw[i * d + j];
    T* c = cfac.data() + k * dd;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j <= i; ++j) {
        T s{};
        for (std::size_t p = 0; p <= j; ++p) s += l[i * d + p] * l[j * d + p];
        c[i * d + j] = s + (i == j ? eps : T(0));
        c[j * d + i] = c[i * d + j];
      }
    cholesky_in_place<T>(std::span<T>(c, dd), d);
    T ld{};
    for (std::size_t i = 0; i < d; ++i) ld += std::log(c[i * d + i]);
    logdet[k] = T(2) * ld;
  }

  const T log2pi = static_cast<T>(std::log(2.0 * std::numbers::pi));
  Tensor<T> out(Shape{batch, n});
  std::vector<T> y(d);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* zb = zv.data().data() + b * d;
    for (std::size_t k = 0; k < n; ++k) {
      const T* mu = mv.data().data() + k * d;
      for (std::size_t i = 0; i < d; ++i) y[i] = zb[i] - mu[i];
      solve_lower<T>(std::span<const T>(cfac.data() + k * dd, dd), d, y);
      T q{};
      for (std::size_t i = 0; i < d; ++i) q += y[i] * y[i];
      out[b * n + k] = -T(0.5) * (static_cast<T>(d) * log2pi + logdet[k] + q);
    }
  }

  return z.graph->record(
      "gaussian_log_density", std::move(out), {z, means, chol_raw},
      [z, means, chol_raw, lfac = std::move(lfac), cfac = std::move(cfac), batch, n, d,
       dd](Graph<T>& g, const Tensor<T>& grad) {
        const auto& zv = g.value(z);
        const auto& mv = g.value(means);
        const auto& rv = g.value(chol_raw);
        const bool need_z = g.requires_grad(z);
        const bool need_mu = g.requires_grad(means);
        const bool need_raw = g.requires_grad(chol_raw);
        std::vector<T> scatter(need_raw ? n * dd : 0, T(0));
        std::vector<T> gsum(n, T(0));
        std::vector<T> u(d);
        Tensor<T>* gz = need_z ? &g.grad_ref(z) : nullptr;
        Tensor<T>* gmu = need_mu ? &g.grad_ref(means) : nullptr;
        for (std::size_t b = 0; b < batch; ++b) {
          const T* zb = zv.data().data() + b * d;
          for (std::size_t k = 0; k < n; ++k) {
            const T w = grad[b * n + k];
            if (w == T(0)) continue;
            const T* mu = mv.data().data() + k * d;
            for (std::size_t i = 0; i < d; ++i) u[i] = zb[i] - mu[i];
            const std::span<const T> c(cfac.data() + k * dd, dd);
            solve_lower<T>(c, d, u);
            solve_lower_transposed<T>(c, d, u);  // u = Sigma^-1 (z - mu)
            if (gz) {
              for (std::size_t i = 0; i < d; ++i) (*gz)[b * d + i] -= w * u[i];
            }
            if (gmu) {
              for (std::size_t i = 0; i < d; ++i) (*gmu)[k * d + i] += w * u[i];
            }
            if (need_raw) {
              gsum[k] += w;
              T* s = scatter.data() + k * dd;
              for (std::size_t i = 0; i < d; ++i) {
                const T wu = w * u[i];
                for (std::size_t j = 0; j <= i; ++j) s[i * d + j] += wu * u[j];
              }
            }
          }
        }
        if (!need_raw) return;
        auto& graw = g.grad_ref(chol_raw);
        std::vector<T> inv(dd), gsig(dd);
        for (std::size_t k = 0; k < n; ++k) {
          const T* s = scatter.data() + k * dd;
          cholesky_inverse<T>(std::span<const T>(cfac.data() + k * dd, dd), d, inv);
          // dLogN/dSigma, symmetric: 0.5 * S - 0.5 * gsum * Sigma^-1
          for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j <= i; ++j) {
              const T v = T(0.5) * s[i * d + j] - T(0.5) * gsum[k] * inv[i * d + j];
              gsig[i * d + j] = v;
              gsig[j * d + i] = v;
            }
          // dL = 2 * dSigma * L, restricted to the lower triangle.
          const T* l = lfac.data() + k * dd;
          const T* raw = rv.data().data() + k * dd;
          T* gr = graw.data().data() + k * dd;
          for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j <= i; ++j) {
              T v{};
              for (std::size_t p = j; p < d; ++p) v += gsig[i * d + p] * l[p * d + j];
              v *= T(2);
              gr[i * d + j] += i == j ? v * std::exp(raw[i * d + i]) : v;
            }
        }
      });
}

}  // namespace ops

// Graph handles for the layer's parameters within one recording session.
template <class T>
struct GplVars {
  Var<T> logits, means, chol_raw;
  T eps;
};

template <class T>
GplVars<T> bind(Graph<T>& g, GplParams<T>& p, bool trainable) {
  if (trainable) {
    return {g.parameter(p.logits), g.parameter(p.means), g.parameter(p.chol_raw), p.eps};
  }
  return {g.constant(p.logits.value), g.constant(p.means.value), g.constant(p.chol_raw.value), p.eps};
}

template <class T>
GplVars<T> bind(Graph<T>& g, const GplParams<T>& p) {
  return {g.constant(p.logits.value), g.constant(p.means.value), g.constant(p.chol_raw.value), p.eps};
}

template <class T>
Var<T> bind_head(Graph<T>& g, LinearHead<T>& h, bool trainable) {
  return trainable ? g.parameter(h.raw_weights) : g.constant(h.raw_weights.value);
}

// log w_k + log N(z; mu_k, Sigma_k), shape [B, N].
template <class T>
Var<T> log_joint(const GplVars<T>& p, Var<T> z) {
  Var<T> log_w = ops::log_softmax(p.logits);
  return ops::add_rowvec(ops::gaussian_log_density(z, p.means, p.chol_raw, p.eps), log_w);
}

// log p(K = k | z), rows normalized so each log-sum-exps to zero.
template <class T>
Var<T> log_responsibilities(const GplVars<T>& p, Var<T> z) {
  return ops::log_softmax(log_joint(p, z));
}

// Mean negative log-likelihood of the mixture over the rows of z.
template <class T>
Var<T> gmm_nll(const GplVars<T>& p, Var<T> z) {
  if (z.value().rank() != 2) throw ShapeMismatch("gmm_nll expects [B, D] latent rows");
  return ops::scale(ops::mean(ops::log_sum_exp(log_joint(p, z))), T(-1));
}

// c_y = sum_k A[y, k] log p(K = k | z), shape [B, C].
template <class T>
Var<T> class_scores(Var<T> head_raw, Var<T> logresp) {
  if (logresp.value().rank() != 2 || head_raw.value().dim(1) != logresp.value().dim(1)) {
    throw ShapeMismatch("class_scores: head " + shape_string(head_raw.value().shape()) +
                        " vs log-responsibilities " + shape_string(logresp.value().shape()));
  }
  return ops::matmul_nt(logresp, ops::softplus(head_raw));
}

template <class T>
Var<T> classification_loss(Var<T> head_raw, Var<T> logresp, std::span<const int> labels) {
  return ops::cross_entropy(class_scores(head_raw, logresp), labels);
}

// Sum of effective head weights linking a class to other classes' components.
template <class T>
Var<T> l1_cross_class(Var<T> head_raw, std::span<const int> class_of) {
  const auto& shape = head_raw.value().shape();
  if (shape.size() != 2 || shape[1] != class_of.size()) {
    throw ShapeMismatch("l1_cross_class: class_of does not match head width");
  }
  Tensor<T> mask(shape);
  for (std::size_t y = 0; y < shape[0]; ++y)
    for (std::size_t k = 0; k < shape[1]; ++k)
      mask[y * shape[1] + k] = static_cast<std::size_t>(class_of[k]) == y ? T(0) : T(1);
  Var<T> a = ops::softplus(head_raw);
  return ops::sum(ops::mul(a, a.graph->constant(std::move(mask))));
}

// ---- tensor-level conveniences (no gradients) ------------------------------

template <class T>
Tensor<T> log_responsibilities(const GplParams<T>& params, const Tensor<T>& z) {
  Graph<T> g;
  auto vars = bind(g, params);
  Tensor<T> rows = z.rank() == 1 ? z.reshaped(Shape{1, z.dim(0)}) : z;
  Tensor<T> out = log_responsibilities(vars, g.constant(std::move(rows))).value();
  return z.rank() == 1 ? out.reshaped(Shape{params.num_components}) : out;
}

template <class T>
T gmm_nll(const GplParams<T>& params, const Tensor<T>& z) {
  if (z.rank() != 2) throw ShapeMismatch("gmm_nll expects [B, D] latent rows");
  Graph<T> g;
  auto vars = bind(g, params);
  return gmm_nll(vars, g.constant(z)).value().item();
}

template <class T>
Tensor<T> class_scores(const LinearHead<T>& head, const Tensor<T>& logresp) {
  Graph<T> g;
  Tensor<T> rows = logresp.rank() == 1 ? logresp.reshaped(Shape{1, logresp.dim(0)}) : logresp;
  Tensor<T> out = class_scores(g.constant(head.raw_weights.value), g.constant(std::move(rows))).value();
  return logresp.rank() == 1 ? out.reshaped(Shape{head.num_classes}) : out;
}

// Argmax of a score row; ties resolve to the smallest class index.
template <class T>
int argmax_class(std::span<const T> scores) {
  int best = 0;
  for (std::size_t y = 1; y < scores.size(); ++y) {
    if (scores[y] > scores[static_cast<std::size_t>(best)]) best = static_cast<int>(y);
  }
  return best;
}

// Class label of every latent row.
template <class T>
std::vector<int> classify(const LinearHead<T>& head, const GplParams<T>& params, const Tensor<T>& z) {
  Tensor<T> rows = z.rank() == 1 ? z.reshaped(Shape{1, z.dim(0)}) : z;
  const Tensor<T> scores = class_scores(head, log_responsibilities(params, rows));
  const std::size_t c = head.num_classes;
  std::vector<int> out(rows.dim(0));
  for (std::size_t b = 0; b < out.size(); ++b) {
    out[b] = argmax_class<T>(scores.data().subspan(b * c, c));
  }
  return out;
}

template <class T>
T classification_loss(const LinearHead<T>& head, const Tensor<T>& logresp, std::span<const int> labels) {
  Graph<T> g;
  return classification_loss(g.constant(head.raw_weights.value), g.constant(logresp), labels).value().item();
}

template <class T>
T l1_cross_class(const LinearHead<T>& head, std::span<const int> class_of) {
  Graph<T> g;
  return l1_cross_class(g.constant(head.raw_weights.value), class_of).value().item();
}

// ---- initialization --------------------------------------------------------

namespace detail {

// k-means++ seeding followed by Lloyd iterations on rows of `data` [M, D].
// Returns the centers [K, D] and the per-row assignment.
template <class T>
std::pair<std::vector<T>, std::vector<std::size_t>> kmeans(const std::vector<T>& data, std::size_t m,
                                                           std::size_t d, std::size_t k,
                                                           std::mt19937_64& rng,
                                                           std::size_t iterations = 50) {
  std::vector<T> centers(k * d);
  std::vector<double> dist(m, std::numeric_limits<double>::infinity());
  auto sqdist = [&](std::size_t row, const T* c) {
    double s = 0;
    for (std::size_t i = 0; i < d; ++i) {
      const double v = double(data[row * d + i]) - double(c[i]);
      s += v * v;
    }
    return s;
  };
  std::uniform_int_distribution<std::size_t> first(0, m - 1);
  std::size_t pick = first(rng);
  for (std::size_t c = 0; c < k; ++c) {
    if (c > 0) {
      double total = 0;
      for (double v : dist) total += v;
      if (total <= 0) {
        // Every row coincides with a chosen center; reuse rows in order.
        pick = c % m;
      } else {
        std::uniform_real_distribution<double> u(0.0, total);
        double r = u(rng);
        pick = m - 1;
        for (std::size_t i = 0; i < m; ++i) {
          if (dist[i] <= 0) continue;
          r -= dist[i];
          if (r <= 0) {
            pick = i;
            break;
          }
        }
      }
    }
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(pick * d), d, centers.begin() + static_cast<std::ptrdiff_t>(c * d));
    for (std::size_t i = 0; i < m; ++i) dist[i] = std::min(dist[i], sqdist(i, centers.data() + c * d));
  }

  std::vector<std::size_t> assign(m, 0);
  for (std::size_t it = 0; it < iterations; ++it) {
    bool changed = it == 0;
    for (std::size_t i = 0; i < m; ++i) {
      std::size_t best = 0;
      double bd = sqdist(i, centers.data());
      for (std::size_t c = 1; c < k; ++c) {
        const double v = sqdist(i, centers.data() + c * d);
        if (v < bd) {
          bd = v;
          best = c;
        }
      }
      if (assign[i] != best) changed = true;
      assign[i] = best;
    }
    if (!changed) break;
    std::vector<double> acc(k * d, 0.0);
    std::vector<std::size_t> cnt(k, 0);
    for (std::size_t i = 0; i < m; ++i) {
      ++cnt[assign[i]];
      for (std::size_t j = 0; j < d; ++j) acc[assign[i] * d + j] += double(data[i * d + j]);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (cnt[c] == 0) continue;  // keep an empty cluster's seed
      for (std::size_t j = 0; j < d; ++j) centers[c * d + j] = static_cast<T>(acc[c * d + j] / double(cnt[c]));
    }
  }
  return {std::move(centers), std::move(assign)};
}

}  // namespace detail

// Builds layer parameters from a batch of latent rows z[M, D]. With labels,
// the components of each class are seeded from that class's rows only.
// Covariances start isotropic at the mean within-cluster variance; prior
// logits start uniform.
template <class T>
GplParams<T> init_from_data(const Tensor<T>& z, std::size_t n, std::vector<int> class_of,
                            const std::vector<int>* labels = nullptr, std::uint64_t seed = 0) {
  if (z.rank() != 2 || z.dim(0) == 0) throw EmptyBatch("init_from_data needs a non-empty [M, D] batch");
  const std::size_t m = z.dim(0), d = z.dim(1);
  if (m < n) throw EmptyBatch("init_from_data needs at least as many rows as components");
  if (labels && labels->size() != m) throw ShapeMismatch("one label per latent row required");
  GplParams<T> params(n, d, std::move(class_of));
  std::mt19937_64 rng(seed);

  std::vector<std::vector<std::size_t>> groups;  // component ids per group
  std::vector<std::vector<std::size_t>> rows;    // data rows per group
  if (labels) {
    const int classes = params.num_classes();
    groups.resize(static_cast<std::size_t>(classes));
    rows.resize(static_cast<std::size_t>(classes));
    for (std::size_t k = 0; k < n; ++k) groups[static_cast<std::size_t>(params.class_of[k])].push_back(k);
    for (std::size_t i = 0; i < m; ++i) {
      const int y = (*labels)[i];
      if (y < 0 || y >= classes) throw LabelOutOfRange("latent row label out of range");
      rows[static_cast<std::size_t>(y)].push_back(i);
    }
  } else {
    groups.emplace_back();
    rows.emplace_back();
    for (std::size_t k = 0; k < n; ++k) groups[0].push_back(k);
    for (std::size_t i = 0; i < m; ++i) rows[0].push_back(i);
  }

  double sse = 0;
  std::size_t total_rows = 0;
  std::vector<T> centers_all(n * d);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& comps = groups[gi];
    if (comps.empty()) continue;
    const auto& rs = rows[gi];
    if (rs.size() < comps.size()) {
      throw MissingClass("class " + std::to_string(gi) + " has " + std::to_string(rs.size()) +
                         " rows for " + std::to_string(comps.size()) + " components");
    }
    std::vector<T> data(rs.size() * d);
    for (std::size_t i = 0; i < rs.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) data[i * d + j] = z[rs[i] * d + j];
    auto [centers, assign] = detail::kmeans(data, rs.size(), d, comps.size(), rng);
    for (std::size_t i = 0; i < rs.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double v = double(data[i * d + j]) - double(centers[assign[i] * d + j]);
        sse += v * v;
      }
    total_rows += rs.size();
    for (std::size_t c = 0; c < comps.size(); ++c)
      std::copy_n(centers.begin() + static_cast<std::ptrdiff_t>(c * d), d,
                  centers_all.begin() + static_cast<std::ptrdiff_t>(comps[c] * d));
  }
  const T sigma2 = static_cast<T>(std::max(sse / double(total_rows * d), 2.0 * kCovarianceFloor));
  for (std::size_t k = 0; k < n; ++k) {
    params.set_isotropic(k, std::span<const T>(centers_all.data() + k * d, d), sigma2);
  }
  return params;
}

// Minimizes gmm_nll over the rows of z with the given optimizer, using
// shuffled mini-batches (batch_size 0 means full batch). Returns the mean
// loss of every epoch.
template <class T>
std::vector<double> fit_gmm(GplParams<T>& params, const Tensor<T>& z, const OptimizerConfig& opt_cfg,
                            std::size_t epochs, std::size_t batch_size = 0, std::uint64_t seed = 0,
                            bool cosine_decay = false) {
  if (z.rank() != 2 || z.dim(1) != params.dim) throw ShapeMismatch("fit_gmm: latent rows must be [M, dim]");
  const std::size_t m = z.dim(0);
  if (batch_size == 0 || batch_size > m) batch_size = m;
  Optimizer<T> opt(opt_cfg, params.parameters());
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(m);
  std::vector<double> history;
  for (std::size_t e = 0; e < epochs; ++e) {
    // Annealing to zero lets Adam settle on collapsed components instead of
    // circling them at lr-sized steps.
    if (cosine_decay) {
      opt.set_learning_rate(opt_cfg.learning_rate * 0.5 *
                            (1 + std::cos(std::numbers::pi * double(e) / double(epochs))));
    }
    for (std::size_t i = 0; i < m; ++i) order[i] = i;
    if (batch_size < m) std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::size_t b0 = 0; b0 < m; b0 += batch_size) {
      const std::size_t b1 = std::min(m, b0 + batch_size);
      Tensor<T> batch(Shape{b1 - b0, params.dim});
      for (std::size_t i = b0; i < b1; ++i)
        std::copy_n(z.data().begin() + static_cast<std::ptrdiff_t>(order[i] * params.dim), params.dim,
                    batch.data().begin() + static_cast<std::ptrdiff_t>((i - b0) * params.dim));
      opt.zero_grad();
      Graph<T> g;
      auto vars = bind(g, params, true);
      auto loss = gmm_nll(vars, g.constant(std::move(batch)));
      g.backward(loss);
      const double l = double(loss.value().item());
      opt.step();
      total += l * double(b1 - b0);
    }
    history.push_back(total / double(m));
  }
  return history;
}

}  // namespace gaussproto
