#pragma once

// 8-bit images, PNG I/O through libpng, and atomic file writes.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gaussproto/errors.hpp"
#include "gaussproto/tensor.hpp"

namespace gaussproto {

namespace fs = std::filesystem;

// Runs `write` against a temporary sibling of `path`, then renames it into
// place, so readers never observe a partial file.
inline void atomic_write(const fs::path& path, const std::function<void(const fs::path&)>& write) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  static thread_local std::mt19937_64 rng(std::random_device{}());
  fs::path tmp = path;
  tmp += ".tmp" + std::to_string(rng() % 1000000007ULL);
  try {
    write(tmp);
    fs::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  atomic_write(path, [&](const fs::path& tmp) {
    std::ofstream out(tmp, std::ios::binary);
    out << text;
    if (!out.flush()) throw IoError("cannot write " + tmp.string());
  });
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Interleaved 8-bit pixels, 1 (gray) or 3 (RGB) channels.
struct Image {
  std::size_t width = 0, height = 0, channels = 3;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  std::uint8_t& at(std::size_t r, std::size_t c, std::size_t ch = 0) { return pixels[(r * width + c) * channels + ch]; }
  std::uint8_t at(std::size_t r, std::size_t c, std::size_t ch = 0) const {
    return pixels[(r * width + c) * channels + ch];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

namespace detail {

struct PngWriteGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  std::FILE* file = nullptr;
  ~PngWriteGuard() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    if (file) std::fclose(file);
  }
};

struct PngReadGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  std::FILE* file = nullptr;
  ~PngReadGuard() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (file) std::fclose(file);
  }
};

// bit_depth 8 or 16; rows are big-endian for 16-bit as PNG requires.
inline void write_png_raw(const fs::path& path, std::size_t w, std::size_t h, int color_type, int bit_depth,
                          const std::vector<std::uint8_t>& data, std::size_t row_bytes,
                          const std::vector<std::pair<std::string, std::string>>& text) {
  PngWriteGuard g;
  g.file = std::fopen(path.c_str(), "wb");
  if (!g.file) throw IoError("cannot open " + path.string() + " for writing");
  g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!g.png) throw IoError("libpng write init failed");
  g.info = png_create_info_struct(g.png);
  if (!g.info) throw IoError("libpng info init failed");
  if (setjmp(png_jmpbuf(g.png))) throw IoError("libpng failed writing " + path.string());
  png_init_io(g.png, g.file);
  png_set_IHDR(g.png, g.info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_text> chunks(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    chunks[i].compression = PNG_TEXT_COMPRESSION_NONE;
    chunks[i].key = const_cast<char*>(text[i].first.c_str());
    chunks[i].text = const_cast<char*>(text[i].second.c_str());
    chunks[i].text_length = text[i].second.size();
  }
  if (!chunks.empty()) png_set_text(g.png, g.info, chunks.data(), static_cast<int>(chunks.size()));
  // No tIME chunk is written, so identical pixels give identical files.
  png_write_info(g.png, g.info);
  for (std::size_t r = 0; r < h; ++r) {
    png_write_row(g.png, const_cast<png_bytep>(data.data() + r * row_bytes));
  }
  png_write_end(g.png, nullptr);
  if (std::fflush(g.file) != 0) throw IoError("cannot flush " + path.string());
}

}  // namespace detail

inline void write_png(const fs::path& path, const Image& img,
                      const std::vector<std::pair<std::string, std::string>>& text = {}) {
  if (img.channels != 1 && img.channels != 3) throw InvalidArgument("PNG output supports 1 or 3 channels");
  if (img.width == 0 || img.height == 0) throw InvalidArgument("cannot write an empty image");
  atomic_write(path, [&](const fs::path& tmp) {
    detail::write_png_raw(tmp, img.width, img.height, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                          8, img.pixels, img.width * img.channels, text);
  });
}

// Single-channel 16-bit PNG, e.g. superpixel id maps.
inline void write_png16(const fs::path& path, std::size_t w, std::size_t h, const std::vector<int>& values) {
  if (values.size() != w * h) throw ShapeMismatch("value count does not match image size");
  std::vector<std::uint8_t> data(w * h * 2);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] < 0 || values[i] > 65535) throw InvalidArgument("value does not fit 16 bits");
    data[2 * i] = static_cast<std::uint8_t>(values[i] >> 8);
    data[2 * i + 1] = static_cast<std::uint8_t>(values[i] & 0xff);
  }
  atomic_write(path, [&](const fs::path& tmp) {
    detail::write_png_raw(tmp, w, h, PNG_COLOR_TYPE_GRAY, 16, data, w * 2, {});
  });
}

struct PngContents {
  Image image;  // 8-bit; 16-bit sources are reduced
  std::vector<int> values16;  // raw samples of a 16-bit gray source, else empty
  std::map<std::string, std::string> text;
};

inline PngContents read_png_full(const fs::path& path) {
  detail::PngReadGuard g;
  g.file = std::fopen(path.c_str(), "rb");
  if (!g.file) throw IoError("cannot open " + path.string());
  g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!g.png) throw IoError("libpng read init failed");
  g.info = png_create_info_struct(g.png);
  if (!g.info) throw IoError("libpng info init failed");
  if (setjmp(png_jmpbuf(g.png))) throw IoError("corrupt PNG " + path.string());
  png_init_io(g.png, g.file);
  png_read_info(g.png, g.info);
  const auto w = png_get_image_width(g.png, g.info), h = png_get_image_height(g.png, g.info);
  const int color = png_get_color_type(g.png, g.info);
  const int depth = png_get_bit_depth(g.png, g.info);
  const bool gray16 = depth == 16 && (color == PNG_COLOR_TYPE_GRAY);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(g.png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(g.png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(g.png);
  if (png_get_valid(g.png, g.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(g.png), png_set_strip_alpha(g.png);
  png_read_update_info(g.png, g.info);
  const std::size_t channels = png_get_channels(g.png, g.info);
  const std::size_t row_bytes = png_get_rowbytes(g.png, g.info);
  std::vector<std::uint8_t> raw(row_bytes * h);
  std::vector<png_bytep> rows(h);
  for (std::size_t r = 0; r < h; ++r) rows[r] = raw.data() + r * row_bytes;
  png_read_image(g.png, rows.data());
  png_read_end(g.png, g.info);

  PngContents out;
  const std::size_t out_channels = channels == 1 ? 1 : 3;
  out.image = Image(w, h, out_channels);
  const std::size_t bytes = depth == 16 ? 2 : 1;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t ch = 0; ch < out_channels; ++ch) {
        out.image.at(r, c, ch) = raw[r * row_bytes + (c * channels + ch) * bytes];
      }
  if (gray16) {
    out.values16.resize(std::size_t(w) * h);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const std::uint8_t* p = raw.data() + r * row_bytes + c * 2;
        out.values16[r * w + c] = (int(p[0]) << 8) | int(p[1]);
      }
  }
  png_textp text = nullptr;
  int n = 0;
  png_get_text(g.png, g.info, &text, &n);
  for (int i = 0; i < n; ++i) out.text[text[i].key] = std::string(text[i].text, text[i].text_length);
  return out;
}

inline Image read_png(const fs::path& path) { return read_png_full(path).image; }

// RGB image -> [3, H, W] with values in [0, 1].
template <class T>
Tensor<T> image_to_tensor(const Image& img) {
  if (img.channels != 3) throw ShapeMismatch("expected an RGB image");
  const std::size_t n = img.width * img.height;
  Tensor<T> t(Shape{3, img.height, img.width});
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t ch = 0; ch < 3; ++ch) t[ch * n + p] = static_cast<T>(img.pixels[p * 3 + ch]) / T(255);
  return t;
}

template <class T>
Image tensor_to_image(const Tensor<T>& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw ShapeMismatch("expected a [3, H, W] tensor");
  const std::size_t h = t.dim(1), w = t.dim(2), n = h * w;
  Image img(w, h, 3);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double v = std::clamp(double(t[ch * n + p]), 0.0, 1.0);
      img.pixels[p * 3 + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return img;
}

// Gray mask (0 background, nonzero foreground) -> class ids {0, 1}.
inline std::vector<int> mask_to_labels(const Image& mask) {
  if (mask.channels != 1) throw ShapeMismatch("masks must be single-channel");
  std::vector<int> out(mask.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask.pixels[i] >= 128 ? 1 : 0;
  return out;
}

inline Image labels_to_mask(const std::vector<int>& labels, std::size_t w, std::size_t h) {
  if (labels.size() != w * h) throw ShapeMismatch("label count does not match mask size");
  Image m(w, h, 1);
  for (std::size_t i = 0; i < labels.size(); ++i) m.pixels[i] = labels[i] > 0 ? 255 : 0;
  return m;
}

}  // namespace gaussproto
