#pragma once

// Datasets on disk (images/*.png, masks/*.png, train.txt, val.txt) and the
// synthetic fruit-on-foliage generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gaussproto/color.hpp"
#include "gaussproto/errors.hpp"
#include "gaussproto/image.hpp"
#include "gaussproto/parallel.hpp"

namespace gaussproto {

struct Sample {
  std::string name;
  Image image;            // RGB
  std::vector<int> mask;  // class id per pixel
};

struct Dataset {
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

struct SyntheticOptions {
  std::size_t count = 250;
  std::size_t size = 64;
  std::uint64_t seed = 0;
  int difficulty = 0;  // 0 separable colours, 1 adds occluding stripes, 2 adds fruit-coloured decoys
  double val_fraction = 0.2;
};

namespace detail {

inline std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Rgb {
  double r, g, b;
};

}  // namespace detail

// One synthetic image: textured green/brown foliage, one or two shaded red or
// purple discs, Gaussian noise. Difficulty 1 draws background-coloured stripes
// over the discs; difficulty 2 also scatters checker-textured patches whose
// mean colour matches the fruit.
inline Sample synthesize_image(std::size_t size, std::uint64_t seed, int difficulty, std::string name) {
  std::mt19937_64 rng(detail::splitmix(seed));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t n = size * size;
  const double unit = double(size) / 64.0;  // shape sizes are given for 64 px images
  std::vector<detail::Rgb> px(n);
  std::vector<int> mask(n, 0);

  const detail::Rgb green{0.26, 0.46, 0.15}, brown{0.43, 0.33, 0.20};
  const double t = u(rng);
  const detail::Rgb base{green.r + t * (brown.r - green.r), green.g + t * (brown.g - green.g),
                         green.b + t * (brown.b - green.b)};
  const double fy = 0.15 + 0.35 * u(rng), fx = 0.15 + 0.35 * u(rng), phase = 2 * std::numbers::pi * u(rng);
  const double fy2 = 0.6 + 0.6 * u(rng), fx2 = 0.6 + 0.6 * u(rng);
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c) {
      const double tex = 0.10 * std::sin(fy * double(r) + fx * double(c) + phase) +
                         0.05 * std::sin(fy2 * double(r) - fx2 * double(c));
      px[r * size + c] = {base.r * (1 + tex), base.g * (1 + tex), base.b * (1 + tex)};
    }

  const detail::Rgb red{0.80, 0.12, 0.10}, purple{0.46, 0.12, 0.44};
  auto fruit_colour = [&]() {
    const detail::Rgb& f = u(rng) < 0.5 ? red : purple;
    const double j = 0.06 * (u(rng) - 0.5);
    return detail::Rgb{f.r + j, f.g + j * 0.5, f.b + j};
  };

  if (difficulty >= 2) {
    const int decoys = 1 + int(rng() % 3);
    for (int d = 0; d < decoys; ++d) {
      // Scaling RGB keeps hue and saturation, and the +-20% checker averages
      // out, so a decoy's mean HSV matches a shaded fruit's.
      auto col = fruit_colour();
      const double dim = 0.75 + 0.25 * u(rng);
      col = {col.r * dim, col.g * dim, col.b * dim};
      const double rad = (5.0 + 4.0 * u(rng)) * unit;
      const double cy = u(rng) * double(size), cx = u(rng) * double(size);
      for (std::size_t r = 0; r < size; ++r)
        for (std::size_t c = 0; c < size; ++c) {
          const double dy = double(r) + 0.5 - cy, dx = double(c) + 0.5 - cx;
          if (std::max(std::abs(dy), std::abs(dx)) > rad) continue;
          const double k = ((r / 2 + c / 2) % 2 == 0) ? 1.2 : 0.8;
          px[r * size + c] = {col.r * k, col.g * k, col.b * k};
        }
    }
  }

  const int discs = 1 + int(rng() % 2);
  for (int d = 0; d < discs; ++d) {
    const auto col = fruit_colour();
    const double rad = (9.0 + 5.0 * u(rng)) * unit;
    const double lo = 0.6 * rad, hi = double(size) - 0.6 * rad;
    const double cy = lo + (hi - lo) * u(rng), cx = lo + (hi - lo) * u(rng);
    const double hy = -0.35 * rad, hx = -0.3 * rad;  // highlight offset
    for (std::size_t r = 0; r < size; ++r)
      for (std::size_t c = 0; c < size; ++c) {
        const double dy = double(r) + 0.5 - cy, dx = double(c) + 0.5 - cx;
        const double q = (dy * dy + dx * dx) / (rad * rad);
        if (q > 1.0) continue;
        const double hl = std::exp(-((dy - hy) * (dy - hy) + (dx - hx) * (dx - hx)) / (0.08 * rad * rad));
        const double shade = 1.0 - 0.25 * q;
        px[r * size + c] = {col.r * shade + 0.25 * hl, col.g * shade + 0.15 * hl, col.b * shade + 0.15 * hl};
        mask[r * size + c] = 1;
      }
  }

  if (difficulty >= 1) {
    const int stripes = 1 + int(rng() % 2);
    for (int s = 0; s < stripes; ++s) {
      const double ang = std::numbers::pi * u(rng);
      const double oy = u(rng) * double(size), ox = u(rng) * double(size);
      const double ny = std::cos(ang), nx = -std::sin(ang);
      const double half = (1.0 + 0.5 * u(rng)) * unit;
      for (std::size_t r = 0; r < size; ++r)
        for (std::size_t c = 0; c < size; ++c) {
          const double dist = (double(r) + 0.5 - oy) * ny + (double(c) + 0.5 - ox) * nx;
          if (std::abs(dist) > half) continue;
          px[r * size + c] = {brown.r * 0.8, brown.g * 0.8, brown.b * 0.8};
          mask[r * size + c] = 0;
        }
    }
  }

  std::normal_distribution<double> noise(0.0, 0.02 + 0.01 * difficulty);
  Sample s;
  s.name = std::move(name);
  s.image = Image(size, size, 3);
  for (std::size_t p = 0; p < n; ++p) {
    const double v[3] = {px[p].r, px[p].g, px[p].b};
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double x = std::clamp(v[ch] + noise(rng), 0.0, 1.0);
      s.image.pixels[p * 3 + ch] = static_cast<std::uint8_t>(std::lround(x * 255.0));
    }
  }
  s.mask = std::move(mask);
  return s;
}

struct SplitDataset {
  Dataset train, val;
};

inline std::string sample_name(std::size_t i) {
  std::ostringstream os;
  os << "img_";
  os.width(4);
  os.fill('0');
  os << i << ".png";
  return os.str();
}

inline SplitDataset generate_synthetic(const SyntheticOptions& opt) {
  if (opt.count == 0 || opt.size == 0) throw InvalidArgument("synthetic dataset needs images of positive size");
  if (opt.difficulty < 0 || opt.difficulty > 2) throw InvalidArgument("difficulty must be 0, 1 or 2");
  if (!(opt.val_fraction >= 0 && opt.val_fraction < 1)) throw InvalidArgument("val_fraction must be in [0, 1)");
  std::vector<Sample> all(opt.count);
  parallel_for(opt.count, [&](std::size_t i) {
    all[i] = synthesize_image(opt.size, opt.seed * 1000003ULL + i, opt.difficulty, sample_name(i));
  });
  const auto val = static_cast<std::size_t>(std::llround(opt.val_fraction * double(opt.count)));
  SplitDataset out;
  for (std::size_t i = 0; i < opt.count; ++i) (i < opt.count - val ? out.train : out.val).samples.push_back(all[i]);
  return out;
}

inline void write_split(const fs::path& root, const std::string& split, const Dataset& ds) {
  std::string manifest;
  for (const auto& s : ds.samples) {
    write_png(root / "images" / s.name, s.image);
    write_png(root / "masks" / s.name, labels_to_mask(s.mask, s.image.width, s.image.height));
    manifest += s.name + "\n";
  }
  write_text_file(root / (split + ".txt"), manifest);
}

// Writes the layout into a fresh sibling directory and renames it into place
// when `root` does not exist yet; otherwise files are replaced one by one.
inline void write_dataset(const fs::path& root, const SplitDataset& ds) {
  if (fs::exists(root)) {
    write_split(root, "train", ds.train);
    write_split(root, "val", ds.val);
    return;
  }
  fs::path tmp = root;
  tmp += ".partial";
  fs::remove_all(tmp);
  try {
    write_split(tmp, "train", ds.train);
    write_split(tmp, "val", ds.val);
    fs::rename(tmp, root);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(tmp, ec);
    throw;
  }
}

inline std::vector<std::string> read_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("split manifest not found: " + path.string());
  std::istringstream in(read_text_file(path));
  std::vector<std::string> names;
  for (std::string line; std::getline(in, line);) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) names.push_back(line);
  }
  return names;
}

inline Dataset load_split(const fs::path& root, const std::string& split) {
  Dataset ds;
  const auto names = read_manifest(root / (split + ".txt"));
  if (names.empty()) throw IoError("split " + split + " in " + root.string() + " lists no images");
  ds.samples.resize(names.size());
  parallel_for(names.size(), [&](std::size_t i) {
    const fs::path img_path = root / "images" / names[i], mask_path = root / "masks" / names[i];
    if (!fs::exists(img_path)) throw IoError("missing image file: " + img_path.string());
    if (!fs::exists(mask_path)) throw IoError("missing mask file: " + mask_path.string());
    Sample s;
    s.name = names[i];
    s.image = read_png(img_path);
    if (s.image.channels != 3) throw IoError("image is not RGB: " + img_path.string());
    const Image mask = read_png(mask_path);
    if (mask.width != s.image.width || mask.height != s.image.height) {
      throw IoError("mask size differs from image: " + mask_path.string());
    }
    Image gray = mask;
    if (mask.channels == 3) {
      gray = Image(mask.width, mask.height, 1);
      for (std::size_t p = 0; p < gray.pixels.size(); ++p) gray.pixels[p] = mask.pixels[p * 3];
    }
    s.mask = mask_to_labels(gray);
    ds.samples[i] = std::move(s);
  });
  return ds;
}

// Cuts every image larger than `size` into size x size tiles on a regular
// grid (the last row and column of tiles flush with the border). Smaller
// images are rejected.
inline Dataset tile_dataset(const Dataset& ds, std::size_t size) {
  Dataset out;
  for (const auto& s : ds.samples) {
    const std::size_t h = s.image.height, w = s.image.width;
    if (h < size || w < size) {
      throw SizeNotDivisible("image " + s.name + " is smaller than the model input " + std::to_string(size));
    }
    if (h == size && w == size) {
      out.samples.push_back(s);
      continue;
    }
    auto starts = [size](std::size_t extent) {
      std::vector<std::size_t> v;
      for (std::size_t o = 0; o + size <= extent; o += size) v.push_back(o);
      if (v.back() + size < extent) v.push_back(extent - size);
      return v;
    };
    for (std::size_t r0 : starts(h))
      for (std::size_t c0 : starts(w)) {
        Sample t;
        t.name = s.name + "@" + std::to_string(r0) + "_" + std::to_string(c0);
        t.image = Image(size, size, 3);
        t.mask.resize(size * size);
        for (std::size_t r = 0; r < size; ++r)
          for (std::size_t c = 0; c < size; ++c) {
            for (std::size_t ch = 0; ch < 3; ++ch) t.image.at(r, c, ch) = s.image.at(r0 + r, c0 + c, ch);
            t.mask[r * size + c] = s.mask[(r0 + r) * w + c0 + c];
          }
        out.samples.push_back(std::move(t));
      }
  }
  return out;
}

}  // namespace gaussproto
