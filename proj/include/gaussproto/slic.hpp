#pragma once

// SLIC superpixels: grid-seeded local k-means in CIELAB + position space,
// followed by connectivity enforcement.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "gaussproto/color.hpp"
#include "gaussproto/errors.hpp"
#include "gaussproto/tensor.hpp"

namespace gaussproto {

struct SlicConfig {
  std::size_t segments = 200;
  double compactness = 10.0;
  std::size_t max_iter = 10;
};

struct SuperpixelMap {
  std::size_t height = 0, width = 0;
  std::vector<int> labels;  // row-major, ids 0..count-1
  std::size_t count = 0;
  double compactness = 0;
  std::size_t requested = 0;
  // Windowed k-means objective after each assignment step.
  std::vector<double> energy;

  int at(std::size_t r, std::size_t c) const { return labels[r * width + c]; }
};

namespace detail {

// Splits the labels into 4-connected components. Returns the component id of
// every pixel and fills `sizes` and `owner` (the label of each component).
inline std::vector<int> connected_components(const std::vector<int>& labels, std::size_t h, std::size_t w,
                                             std::vector<std::size_t>& sizes, std::vector<int>& owner) {
  std::vector<int> comp(labels.size(), -1);
  std::vector<std::size_t> stack;
  sizes.clear();
  owner.clear();
  for (std::size_t start = 0; start < labels.size(); ++start) {
    if (comp[start] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    const int lab = labels[start];
    std::size_t n = 0;
    comp[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++n;
      const std::size_t r = p / w, c = p % w;
      const std::size_t nb[4] = {r > 0 ? p - w : p, r + 1 < h ? p + w : p, c > 0 ? p - 1 : p, c + 1 < w ? p + 1 : p};
      for (std::size_t q : nb) {
        if (q != p && comp[q] < 0 && labels[q] == lab) {
          comp[q] = id;
          stack.push_back(q);
        }
      }
    }
    sizes.push_back(n);
    owner.push_back(lab);
  }
  return comp;
}

}  // namespace detail

// Every segment 4-connected after this pass: each label keeps its largest
// component; the other fragments are merged, repeatedly, into the largest
// adjacent kept segment. Ids are then renumbered in scan order.
inline std::size_t enforce_connectivity(std::vector<int>& labels, std::size_t h, std::size_t w) {
  std::vector<std::size_t> sizes;
  std::vector<int> owner;
  std::vector<int> comp = detail::connected_components(labels, h, w, sizes, owner);
  const std::size_t nc = sizes.size();

  // The kept component of every label is its largest (first in scan order on ties).
  const int max_label = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end());
  std::vector<int> best(static_cast<std::size_t>(max_label) + 1, -1);
  for (std::size_t c = 0; c < nc; ++c) {
    int& b = best[static_cast<std::size_t>(owner[c])];
    if (b < 0 || sizes[c] > sizes[static_cast<std::size_t>(b)]) b = static_cast<int>(c);
  }
  // Every component is mapped to the kept component that absorbs it.
  std::vector<int> target(nc, -1);
  std::vector<std::size_t> kept_size(nc, 0);
  std::size_t orphans = 0;
  for (std::size_t c = 0; c < nc; ++c) {
    if (best[static_cast<std::size_t>(owner[c])] == static_cast<int>(c)) {
      target[c] = static_cast<int>(c);
      kept_size[c] = sizes[c];
    } else {
      ++orphans;
    }
  }
  // Adjacency between components.
  std::vector<std::vector<int>> adj(nc);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const int a = comp[r * w + c];
      if (c + 1 < w && comp[r * w + c + 1] != a) {
        adj[static_cast<std::size_t>(a)].push_back(comp[r * w + c + 1]);
        adj[static_cast<std::size_t>(comp[r * w + c + 1])].push_back(a);
      }
      if (r + 1 < h && comp[(r + 1) * w + c] != a) {
        adj[static_cast<std::size_t>(a)].push_back(comp[(r + 1) * w + c]);
        adj[static_cast<std::size_t>(comp[(r + 1) * w + c])].push_back(a);
      }
    }
  while (orphans > 0) {
    std::size_t merged = 0;
    for (std::size_t c = 0; c < nc; ++c) {
      if (target[c] >= 0) continue;
      int pick = -1;
      for (int nb : adj[c]) {
        const int t = target[static_cast<std::size_t>(nb)];
        if (t < 0) continue;
        if (pick < 0 || kept_size[static_cast<std::size_t>(t)] > kept_size[static_cast<std::size_t>(pick)] ||
            (kept_size[static_cast<std::size_t>(t)] == kept_size[static_cast<std::size_t>(pick)] && t < pick)) {
          pick = t;
        }
      }
      if (pick < 0) continue;
      target[c] = pick;
      kept_size[static_cast<std::size_t>(pick)] += sizes[c];
      ++merged;
    }
    if (merged == 0) throw InvalidArgument("connectivity enforcement stalled");
    orphans -= merged;
  }
  // Contiguous renumbering in scan order.
  std::vector<int> renum(nc, -1);
  int next = 0;
  for (std::size_t p = 0; p < labels.size(); ++p) {
    const auto t = static_cast<std::size_t>(target[static_cast<std::size_t>(comp[p])]);
    if (renum[t] < 0) renum[t] = next++;
    labels[p] = renum[t];
  }
  return static_cast<std::size_t>(next);
}

// rgb: [3, H, W] with values in [0, 1].
template <class T>
SuperpixelMap slic(const Tensor<T>& rgb, const SlicConfig& cfg) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeMismatch("slic expects a [3, H, W] image");
  const std::size_t h = rgb.dim(1), w = rgb.dim(2), n = h * w;
  if (cfg.segments == 0) throw InvalidArgument("slic needs at least one segment");
  if (cfg.segments > n) {
    throw MTooLarge("requested " + std::to_string(cfg.segments) + " superpixels for " + std::to_string(n) +
                    " pixels");
  }
  if (!(cfg.compactness > 0)) throw InvalidArgument("compactness must be positive");

  std::vector<std::array<double, 3>> lab(n);
  for (std::size_t p = 0; p < n; ++p) {
    lab[p] = rgb_to_lab(double(rgb[p]), double(rgb[n + p]), double(rgb[2 * n + p]));
  }
  const double m = double(cfg.segments);
  const double step = std::sqrt(double(n) / m);
  const std::size_t ny = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(std::sqrt(m * double(h) / double(w)))));
  const std::size_t nx = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(m / double(ny))));
  const std::size_t gy = std::min(ny, h), gx = std::min(nx, w);
  const double cell_h = double(h) / double(gy), cell_w = double(w) / double(gx);

  // Centres: (L, a, b, y, x) with positions at pixel-centre coordinates.
  struct Centre {
    double l, a, b, y, x;
  };
  std::vector<Centre> centres;
  auto gradient = [&](std::size_t r, std::size_t c) {
    auto at = [&](std::size_t rr, std::size_t cc) { return lab[rr * w + cc]; };
    const auto& l = at(r, c > 0 ? c - 1 : c);
    const auto& rt = at(r, c + 1 < w ? c + 1 : c);
    const auto& u = at(r > 0 ? r - 1 : r, c);
    const auto& d = at(r + 1 < h ? r + 1 : r, c);
    double g = 0;
    for (int k = 0; k < 3; ++k) g += (rt[k] - l[k]) * (rt[k] - l[k]) + (d[k] - u[k]) * (d[k] - u[k]);
    return g;
  };
  for (std::size_t i = 0; i < gy; ++i)
    for (std::size_t j = 0; j < gx; ++j) {
      double y = (double(i) + 0.5) * cell_h, x = (double(j) + 0.5) * cell_w;
      std::size_t r = std::min(h - 1, static_cast<std::size_t>(y)), c = std::min(w - 1, static_cast<std::size_t>(x));
      // Seeds move to the lowest-gradient pixel of their 3x3 neighbourhood;
      // on grids finer than three pixels those neighbourhoods overlap other
      // seeds, so the perturbation is skipped.
      if (step >= 3.0) {
        double gbest = gradient(r, c);
        std::size_t br = r, bc = c;
        for (std::size_t rr = r > 0 ? r - 1 : 0; rr <= std::min(h - 1, r + 1); ++rr)
          for (std::size_t cc = c > 0 ? c - 1 : 0; cc <= std::min(w - 1, c + 1); ++cc) {
            const double gv = gradient(rr, cc);
            if (gv < gbest) {
              gbest = gv;
              br = rr;
              bc = cc;
            }
          }
        if (br != r || bc != c) {
          r = br;
          c = bc;
          y = double(r) + 0.5;
          x = double(c) + 0.5;
        }
      }
      const auto& v = lab[r * w + c];
      centres.push_back({v[0], v[1], v[2], y, x});
    }

  const double spatial = (cfg.compactness / step) * (cfg.compactness / step);
  auto dist2 = [&](const Centre& k, std::size_t p) {
    const auto& v = lab[p];
    const double dy = double(p / w) + 0.5 - k.y, dx = double(p % w) + 0.5 - k.x;
    return (v[0] - k.l) * (v[0] - k.l) + (v[1] - k.a) * (v[1] - k.a) + (v[2] - k.b) * (v[2] - k.b) +
           (dy * dy + dx * dx) * spatial;
  };
  const double half = std::max({step, cell_h, cell_w});

  SuperpixelMap out;
  out.height = h;
  out.width = w;
  out.compactness = cfg.compactness;
  out.requested = cfg.segments;
  std::vector<int> label(n, -1);
  std::vector<double> best(n);
  const std::size_t iters = std::max<std::size_t>(1, cfg.max_iter);
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t p = 0; p < n; ++p) {
      best[p] = label[p] >= 0 ? dist2(centres[static_cast<std::size_t>(label[p])], p)
                              : std::numeric_limits<double>::infinity();
    }
    for (std::size_t k = 0; k < centres.size(); ++k) {
      const auto& ck = centres[k];
      const auto r0 = static_cast<std::ptrdiff_t>(std::floor(ck.y - half));
      const auto r1 = static_cast<std::ptrdiff_t>(std::ceil(ck.y + half));
      const auto c0 = static_cast<std::ptrdiff_t>(std::floor(ck.x - half));
      const auto c1 = static_cast<std::ptrdiff_t>(std::ceil(ck.x + half));
      for (std::ptrdiff_t r = std::max<std::ptrdiff_t>(0, r0); r < std::min<std::ptrdiff_t>(std::ptrdiff_t(h), r1); ++r)
        for (std::ptrdiff_t c = std::max<std::ptrdiff_t>(0, c0); c < std::min<std::ptrdiff_t>(std::ptrdiff_t(w), c1);
             ++c) {
          const std::size_t p = static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c);
          const double d = dist2(ck, p);
          if (d < best[p]) {
            best[p] = d;
            label[p] = static_cast<int>(k);
          }
        }
    }
    double e = 0;
    for (std::size_t p = 0; p < n; ++p) {
      if (label[p] < 0) throw InvalidArgument("slic left a pixel unassigned");
      e += best[p];
    }
    out.energy.push_back(e);
    std::vector<Centre> acc(centres.size(), Centre{0, 0, 0, 0, 0});
    std::vector<std::size_t> cnt(centres.size(), 0);
    for (std::size_t p = 0; p < n; ++p) {
      const auto k = static_cast<std::size_t>(label[p]);
      acc[k].l += lab[p][0];
      acc[k].a += lab[p][1];
      acc[k].b += lab[p][2];
      acc[k].y += double(p / w) + 0.5;
      acc[k].x += double(p % w) + 0.5;
      ++cnt[k];
    }
    for (std::size_t k = 0; k < centres.size(); ++k) {
      if (cnt[k] == 0) continue;
      const double inv = 1.0 / double(cnt[k]);
      centres[k] = {acc[k].l * inv, acc[k].a * inv, acc[k].b * inv, acc[k].y * inv, acc[k].x * inv};
    }
  }
  out.count = enforce_connectivity(label, h, w);
  out.labels = std::move(label);
  return out;
}

// True when every segment id in 0..count-1 is used and forms one 4-connected
// component.
inline bool is_connected_partition(const SuperpixelMap& sp) {
  if (sp.labels.size() != sp.height * sp.width || sp.count == 0) return false;
  std::vector<std::size_t> sizes;
  std::vector<int> owner;
  detail::connected_components(sp.labels, sp.height, sp.width, sizes, owner);
  if (owner.size() != sp.count) return false;
  std::vector<bool> seen(sp.count, false);
  for (int o : owner) {
    if (o < 0 || static_cast<std::size_t>(o) >= sp.count || seen[static_cast<std::size_t>(o)]) return false;
    seen[static_cast<std::size_t>(o)] = true;
  }
  return true;
}

}  // namespace gaussproto
