#pragma once

// Segmentation output: tiled inference for images larger than the model
// input, 50% colour overlays, and class maps in the mask encoding.

#include <array>
#include <cstdint>
#include <vector>

#include "gaussproto/dataset.hpp"
#include "gaussproto/image.hpp"
#include "gaussproto/pipeline.hpp"

namespace gaussproto {

inline constexpr std::array<std::array<std::uint8_t, 3>, 6> kClassPalette{{
    {40, 40, 160},   // background
    {255, 220, 0},
    {0, 200, 255},
    {255, 0, 200},
    {0, 255, 80},
    {255, 120, 0},
}};

// Segments an image of any size >= the model input. Larger images are cut
// into input-sized tiles on the tile_dataset grid; where the last row or
// column of tiles overlaps its neighbour, the later tile wins.
template <class T>
std::vector<int> segment_tiled(Model<T>& m, const Image& img) {
  const std::size_t n = m.spec.encoder.input_size;
  if (img.width == n && img.height == n) return segment(m, img);
  Dataset one;
  one.samples.push_back({"image", img, std::vector<int>(img.width * img.height, 0)});
  const Dataset tiles = tile_dataset(one, n);
  const auto preds = segment_all(m, tiles);
  std::vector<int> out(img.width * img.height, 0);
  for (std::size_t t = 0; t < tiles.size(); ++t) {
    // tile names end in "@row_col"
    const auto& name = tiles.samples[t].name;
    const auto at = name.rfind('@'), us = name.rfind('_');
    const std::size_t r0 = std::stoul(name.substr(at + 1, us - at - 1)), c0 = std::stoul(name.substr(us + 1));
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) out[(r0 + r) * img.width + c0 + c] = preds[t][r * n + c];
  }
  return out;
}

inline Image overlay(const Image& img, std::span<const int> classes) {
  if (classes.size() != img.width * img.height || img.channels != 3) throw ShapeMismatch("overlay: size mismatch");
  Image out = img;
  for (std::size_t p = 0; p < classes.size(); ++p) {
    const auto& col = kClassPalette[std::size_t(classes[p]) % kClassPalette.size()];
    for (std::size_t ch = 0; ch < 3; ++ch) {
      out.pixels[p * 3 + ch] = std::uint8_t((unsigned(img.pixels[p * 3 + ch]) + col[ch] + 1) / 2);
    }
  }
  return out;
}

// Two classes use the mask encoding {0, 255}; more classes store the id.
inline Image class_map(std::span<const int> classes, std::size_t width, std::size_t height, int num_classes) {
  if (classes.size() != width * height) throw ShapeMismatch("class_map: size mismatch");
  Image out(width, height, 1);
  for (std::size_t p = 0; p < classes.size(); ++p) {
    out.pixels[p] = std::uint8_t(num_classes == 2 ? (classes[p] ? 255 : 0) : classes[p]);
  }
  return out;
}

}  // namespace gaussproto
