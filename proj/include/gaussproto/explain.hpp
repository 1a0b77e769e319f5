#pragma once

// Prototype localization. Every mixture component is matched to the training
// region whose latent vector gives it the highest log p(K = k | z): a grid
// cell mapped back through the upscaling rule, or a whole superpixel.

#include <algorithm>
#include <cstdio>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gaussproto/dataset.hpp"
#include "gaussproto/gpl.hpp"
#include "gaussproto/image.hpp"
#include "gaussproto/parallel.hpp"
#include "gaussproto/pipeline.hpp"

namespace gaussproto {

struct PrototypeReport {
  std::size_t component = 0;
  int label = 0;
  std::size_t image = 0;  // index into the scanned dataset
  std::string image_name;
  PixelBox box;                        // grid cell patch, or the superpixel's bounding box
  std::vector<std::uint32_t> pixels;   // superpixel pixels (proposal prototypes only)
  double log_prob = -std::numeric_limits<double>::infinity();
};

// Pixel box of grid cell (i, j) at scale p.
inline PixelBox cell_box(std::size_t i, std::size_t j, std::size_t p) { return {i * p, j * p, (i + 1) * p, (j + 1) * p}; }

namespace detail {

struct Candidate {
  double score = -std::numeric_limits<double>::infinity();
  std::size_t index = 0;  // cell or proposal index within the image
};

// Best row of `logresp` for every component; the first row wins ties.
template <class T>
std::vector<Candidate> best_rows(const Tensor<T>& logresp) {
  const std::size_t m = logresp.dim(0), n = logresp.dim(1);
  std::vector<Candidate> best(n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      const double v = double(logresp[i * n + k]);
      if (v > best[k].score) best[k] = {v, i};
    }
  return best;
}

}  // namespace detail

// Reports for all components at once; each image is encoded a single time.
template <class T>
std::vector<PrototypeReport> locate_prototypes(Model<T>& m, const Dataset& ds) {
  if (ds.empty()) throw EmptyBatch("prototype localization needs at least one image");
  const std::size_t n = m.gpl.num_components;
  std::vector<std::vector<detail::Candidate>> per_image(ds.size());
  std::vector<std::vector<RegionProposal>> props(ds.size());
  parallel_for(ds.size(), [&](std::size_t i) {
    const Image& img = ds.samples[i].image;
    if (m.spec.kind == ModelKind::kProtoSeg) {
      per_image[i] = detail::best_rows(log_responsibilities(m.gpl, grid_vectors(m, img)));
    } else {
      m.check_image(img);
      props[i] = image_proposals(m, img);
      per_image[i] = detail::best_rows(log_responsibilities(m.gpl, proposal_vectors(m, img, props[i])));
    }
  });
  std::vector<PrototypeReport> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    out[k].component = k;
    out[k].label = m.gpl.class_of[k];
  }
  std::vector<detail::Candidate> winner(n);
  std::vector<std::size_t> winner_image(n, 0);
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t k = 0; k < n; ++k) {
      if (per_image[i][k].score > winner[k].score) {
        winner[k] = per_image[i][k];
        winner_image[k] = i;
      }
    }
  const std::size_t p = m.scale(), g = m.spec.encoder.grid_size();
  for (std::size_t k = 0; k < n; ++k) {
    auto& r = out[k];
    r.image = winner_image[k];
    r.image_name = ds.samples[r.image].name;
    r.log_prob = winner[k].score;
    if (m.spec.kind == ModelKind::kProtoSeg) {
      r.box = cell_box(winner[k].index / g, winner[k].index % g, p);
    } else {
      const auto& pr = props[r.image][winner[k].index];
      r.box = pr.box;
      r.pixels = pr.pixels;
    }
  }
  return out;
}

template <class T>
PrototypeReport locate_grid_prototype(Model<T>& m, const Dataset& ds, std::size_t k) {
  if (m.spec.kind != ModelKind::kProtoSeg) throw InvalidArgument("grid prototypes need a protoseg model");
  if (k >= m.gpl.num_components) throw InvalidArgument("component index out of range");
  return locate_prototypes(m, ds)[k];
}

template <class T>
PrototypeReport locate_proposal_prototype(Model<T>& m, const Dataset& ds, std::size_t k) {
  if (m.spec.kind != ModelKind::kProtoBB) throw InvalidArgument("proposal prototypes need a protobb model");
  if (k >= m.gpl.num_components) throw InvalidArgument("component index out of range");
  return locate_prototypes(m, ds)[k];
}

// Share of the report's region that is foreground (any class > 0) in `mask`.
inline double foreground_fraction(const PrototypeReport& r, std::span<const int> mask, std::size_t width) {
  std::size_t fg = 0, total = 0;
  if (!r.pixels.empty()) {
    for (auto p : r.pixels) fg += mask[p] > 0;
    total = r.pixels.size();
  } else {
    for (std::size_t y = r.box.row0; y < r.box.row1; ++y)
      for (std::size_t x = r.box.col0; x < r.box.col1; ++x) fg += mask[y * width + x] > 0;
    total = (r.box.row1 - r.box.row0) * (r.box.col1 - r.box.col0);
  }
  return total ? double(fg) / double(total) : 0.0;
}

inline Image crop(const Image& img, const PixelBox& b) {
  if (b.row1 > img.height || b.col1 > img.width || b.row0 >= b.row1 || b.col0 >= b.col1) {
    throw InvalidArgument("crop box outside the image");
  }
  Image out(b.col1 - b.col0, b.row1 - b.row0, img.channels);
  for (std::size_t r = 0; r < out.height; ++r)
    for (std::size_t c = 0; c < out.width; ++c)
      for (std::size_t ch = 0; ch < img.channels; ++ch) out.at(r, c, ch) = img.at(b.row0 + r, b.col0 + c, ch);
  return out;
}

inline nlohmann::json report_json(const PrototypeReport& r) {
  nlohmann::json region{{"box", {r.box.row0, r.box.col0, r.box.row1, r.box.col1}}};
  if (!r.pixels.empty()) region["pixels"] = r.pixels;
  return {{"component", r.component}, {"class", r.label},      {"image", r.image_name},
          {"image_index", r.image},   {"region", region},      {"score", r.log_prob}};
}

inline std::string prototype_caption(const PrototypeReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "prototype %zu, class %d, log p(K|z) = %.6g, image %s", r.component, r.label,
                r.log_prob, r.image_name.c_str());
  return buf;
}

struct GalleryLayout {
  std::size_t thumb = 32;   // thumbnail edge in the index sheet
  std::size_t margin = 2;
};

// One PNG per prototype plus index.png (one row per class, thumbnails in
// component order), index.json describing that layout, and report.json.
inline void render_gallery(const std::vector<PrototypeReport>& reports, const Dataset& ds, const fs::path& out_dir,
                           const GalleryLayout& layout = {}) {
  if (reports.empty()) throw InvalidArgument("render_gallery needs at least one report");
  fs::create_directories(out_dir);
  nlohmann::json records = nlohmann::json::array();
  std::map<int, std::vector<const PrototypeReport*>> by_class;
  for (const auto& r : reports) {
    if (r.image >= ds.size()) throw InvalidArgument("report refers to an image outside the dataset");
    char name[32];
    std::snprintf(name, sizeof name, "prototype_%03zu.png", r.component);
    write_png(out_dir / name, crop(ds.samples[r.image].image, r.box), {{"Caption", prototype_caption(r)}});
    auto rec = report_json(r);
    rec["file"] = name;
    records.push_back(std::move(rec));
    by_class[r.label].push_back(&r);
  }

  std::size_t cols = 0;
  for (const auto& [y, v] : by_class) cols = std::max(cols, v.size());
  const std::size_t cell = layout.thumb + layout.margin;
  Image sheet(cols * cell + layout.margin, by_class.size() * cell + layout.margin, 3, 255);
  nlohmann::json rows = nlohmann::json::array();
  std::size_t row = 0;
  for (const auto& [y, v] : by_class) {
    nlohmann::json comps = nlohmann::json::array();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const Image c = crop(ds.samples[v[i]->image].image, v[i]->box);
      const std::size_t oy = layout.margin + row * cell, ox = layout.margin + i * cell;
      for (std::size_t r = 0; r < layout.thumb; ++r)
        for (std::size_t q = 0; q < layout.thumb; ++q)
          for (std::size_t ch = 0; ch < 3; ++ch) {
            sheet.at(oy + r, ox + q, ch) = c.at(r * c.height / layout.thumb, q * c.width / layout.thumb, ch);
          }
      comps.push_back(v[i]->component);
    }
    rows.push_back({{"class", y}, {"components", comps}});
    ++row;
  }
  write_png(out_dir / "index.png", sheet, {{"Caption", "prototype gallery, one row per class"}});
  write_text_file(out_dir / "index.json", nlohmann::json{{"rows", rows}}.dump(2) + "\n");
  write_text_file(out_dir / "report.json", nlohmann::json{{"prototypes", records}}.dump(2) + "\n");
}

}  // namespace gaussproto
