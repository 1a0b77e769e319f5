#pragma once

// Region proposals from superpixels and RoIAlign cropping of latent grids.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gaussproto/autodiff.hpp"
#include "gaussproto/errors.hpp"
#include "gaussproto/slic.hpp"
#include "gaussproto/tensor.hpp"

namespace gaussproto {

// Half-open pixel rectangle [row0, row1) x [col0, col1).
struct PixelBox {
  std::size_t row0 = 0, col0 = 0, row1 = 0, col1 = 0;
  friend bool operator==(const PixelBox&, const PixelBox&) = default;
};

// Continuous rectangle in grid-cell units; cell (i, j) spans [i, i+1) x [j, j+1).
struct LatentBox {
  double y0 = 0, x0 = 0, y1 = 0, x1 = 0;
  friend bool operator==(const LatentBox&, const LatentBox&) = default;
};

struct RegionProposal {
  int segment = 0;
  std::vector<std::uint32_t> pixels;  // row-major indices
  PixelBox box;
  int label = 0;
  LatentBox latent_box;
  friend bool operator==(const RegionProposal&, const RegionProposal&) = default;
};

// Class with a strict majority among `counts`, else background (class 0).
inline int majority_label(std::span<const std::size_t> counts) {
  std::size_t total = 0;
  for (auto c : counts) total += c;
  for (std::size_t y = 1; y < counts.size(); ++y) {
    if (2 * counts[y] > total) return static_cast<int>(y);
  }
  return 0;
}

// Pixel box divided by the scale, clamped to the grid and widened to span at
// least one cell on each axis.
inline LatentBox to_latent_box(const PixelBox& box, std::size_t scale, std::size_t grid_h, std::size_t grid_w) {
  auto axis = [scale](std::size_t a, std::size_t b, std::size_t extent, double& lo, double& hi) {
    const double e = double(extent);
    lo = std::clamp(double(a) / double(scale), 0.0, e);
    hi = std::clamp(double(b) / double(scale), 0.0, e);
    if (hi - lo < 1.0) {
      const double span = std::min(1.0, e);
      const double mid = 0.5 * (lo + hi);
      lo = std::clamp(mid - 0.5 * span, 0.0, e - span);
      hi = lo + span;
    }
  };
  LatentBox out;
  axis(box.row0, box.row1, grid_h, out.y0, out.y1);
  axis(box.col0, box.col1, grid_w, out.x0, out.x1);
  return out;
}

// One proposal per superpixel. `mask` holds a class id per pixel.
inline std::vector<RegionProposal> proposals_from_superpixels(const SuperpixelMap& sp, std::span<const int> mask,
                                                              std::size_t scale, int num_classes = 2) {
  if (mask.size() != sp.height * sp.width) {
    throw ShapeMismatch("mask has " + std::to_string(mask.size()) + " pixels, superpixel map " +
                        std::to_string(sp.height * sp.width));
  }
  if (scale == 0 || sp.height % scale != 0 || sp.width % scale != 0) {
    throw SizeNotDivisible("image size is not divisible by the latent scale");
  }
  std::vector<RegionProposal> out(sp.count);
  std::vector<std::vector<std::size_t>> counts(sp.count, std::vector<std::size_t>(std::size_t(num_classes), 0));
  for (std::size_t s = 0; s < sp.count; ++s) {
    out[s].segment = static_cast<int>(s);
    out[s].box = {sp.height, sp.width, 0, 0};
  }
  for (std::size_t p = 0; p < mask.size(); ++p) {
    const auto s = static_cast<std::size_t>(sp.labels[p]);
    const int y = mask[p];
    if (y < 0 || y >= num_classes) throw LabelOutOfRange("mask value " + std::to_string(y) + " out of range");
    auto& pr = out[s];
    pr.pixels.push_back(static_cast<std::uint32_t>(p));
    const std::size_t r = p / sp.width, c = p % sp.width;
    pr.box.row0 = std::min(pr.box.row0, r);
    pr.box.col0 = std::min(pr.box.col0, c);
    pr.box.row1 = std::max(pr.box.row1, r + 1);
    pr.box.col1 = std::max(pr.box.col1, c + 1);
    ++counts[s][static_cast<std::size_t>(y)];
  }
  for (std::size_t s = 0; s < sp.count; ++s) {
    out[s].label = majority_label(counts[s]);
    out[s].latent_box = to_latent_box(out[s].box, scale, sp.height / scale, sp.width / scale);
  }
  return out;
}

namespace detail {

template <class T>
struct RoiTap {
  std::uint32_t out;   // (proposal, bin) flat index, without the channel
  std::uint32_t cell;  // (image, row, col) flat index, without the channel
  T weight;
};

}  // namespace detail

struct RoiAlignConfig {
  std::size_t output_size = 8;
  std::size_t samples = 2;  // per bin and axis
};

// grid [B, C, H, W]; boxes with their image index -> [P, C, s, s]. Sample
// points sit at regular sub-bin positions; a point at continuous coordinate y
// reads cell row y - 0.5 by bilinear interpolation, clamped to the grid.
template <class T>
Var<T> roi_align(Var<T> grid, std::span<const LatentBox> boxes, std::span<const std::size_t> image_of,
                 const RoiAlignConfig& cfg = {}) {
  const auto& gv = grid.value();
  if (gv.rank() != 4) throw ShapeMismatch("roi_align expects a [B, C, H, W] grid");
  if (boxes.size() != image_of.size() || boxes.empty()) {
    throw ShapeMismatch("roi_align needs one image index per box and at least one box");
  }
  const std::size_t nb = gv.dim(0), ch = gv.dim(1), h = gv.dim(2), w = gv.dim(3);
  const std::size_t s = cfg.output_size, sr = cfg.samples;
  if (s == 0 || sr == 0) throw InvalidArgument("roi_align output size and samples must be positive");
  const std::size_t np = boxes.size(), bins = s * s;

  std::vector<detail::RoiTap<T>> taps;
  taps.reserve(np * bins * sr * sr * 4);
  const T norm = T(1) / static_cast<T>(sr * sr);
  for (std::size_t p = 0; p < np; ++p) {
    if (image_of[p] >= nb) throw ShapeMismatch("roi_align box refers to a missing image");
    const double y0 = std::clamp(boxes[p].y0, 0.0, double(h)), y1 = std::clamp(boxes[p].y1, 0.0, double(h));
    const double x0 = std::clamp(boxes[p].x0, 0.0, double(w)), x1 = std::clamp(boxes[p].x1, 0.0, double(w));
    if (!(y1 > y0) || !(x1 > x0)) throw DegenerateBox("roi_align box has zero extent after clamping");
    const double bh = (y1 - y0) / double(s), bw = (x1 - x0) / double(s);
    const std::size_t base = image_of[p] * h * w;
    for (std::size_t oy = 0; oy < s; ++oy)
      for (std::size_t ox = 0; ox < s; ++ox) {
        const auto out = static_cast<std::uint32_t>(p * bins + oy * s + ox);
        for (std::size_t iy = 0; iy < sr; ++iy)
          for (std::size_t ix = 0; ix < sr; ++ix) {
            const double y = y0 + (double(oy) + (double(iy) + 0.5) / double(sr)) * bh;
            const double x = x0 + (double(ox) + (double(ix) + 0.5) / double(sr)) * bw;
            const double u = std::clamp(y - 0.5, 0.0, double(h - 1));
            const double v = std::clamp(x - 0.5, 0.0, double(w - 1));
            const auto r0 = static_cast<std::size_t>(u), c0 = static_cast<std::size_t>(v);
            const std::size_t r1 = std::min(r0 + 1, h - 1), c1 = std::min(c0 + 1, w - 1);
            const double fy = u - double(r0), fx = v - double(c0);
            const std::size_t cells[4] = {r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1};
            const double wts[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
            for (int q = 0; q < 4; ++q) {
              if (wts[q] == 0) continue;
              taps.push_back({out, static_cast<std::uint32_t>(base + cells[q]), static_cast<T>(wts[q]) * norm});
            }
          }
      }
  }

  Tensor<T> result(Shape{np, ch, s, s});
  const std::size_t plane = h * w;
  for (const auto& t : taps) {
    const std::size_t p = t.out / bins, bin = t.out % bins;
    const std::size_t img = t.cell / plane, cell = t.cell % plane;
    for (std::size_t c = 0; c < ch; ++c) {
      result[(p * ch + c) * bins + bin] += t.weight * gv[(img * ch + c) * plane + cell];
    }
  }
  return grid.graph->record("roi_align", std::move(result), {grid},
                            [grid, taps = std::move(taps), ch, bins, plane](Graph<T>& g, const Tensor<T>& d) {
                              auto& gg = g.grad_ref(grid);
                              for (const auto& t : taps) {
                                const std::size_t p = t.out / bins, bin = t.out % bins;
                                const std::size_t img = t.cell / plane, cell = t.cell % plane;
                                for (std::size_t c = 0; c < ch; ++c) {
                                  gg[(img * ch + c) * plane + cell] += t.weight * d[(p * ch + c) * bins + bin];
                                }
                              }
                            });
}

// Tensor-level convenience: grid [C, H, W] and one box -> [C, s, s].
template <class T>
Tensor<T> roi_align(const Tensor<T>& grid, const LatentBox& box, const RoiAlignConfig& cfg = {}) {
  if (grid.rank() != 3) throw ShapeMismatch("roi_align expects a [C, H, W] grid");
  Graph<T> g;
  auto x = g.constant(grid.reshaped(Shape{1, grid.dim(0), grid.dim(1), grid.dim(2)}));
  const std::size_t zero = 0;
  auto out = roi_align(x, std::span<const LatentBox>(&box, 1), std::span<const std::size_t>(&zero, 1), cfg);
  return out.value().reshaped(Shape{grid.dim(0), cfg.output_size, cfg.output_size});
}

}  // namespace gaussproto
