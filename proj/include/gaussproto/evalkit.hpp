#pragma once

// Segmentation metrics from a dataset-level confusion matrix, and the
// colour-space baseline: per-class Gaussian mixtures over the mean HSV colour
// of each superpixel.

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gaussproto/color.hpp"
#include "gaussproto/dataset.hpp"
#include "gaussproto/errors.hpp"
#include "gaussproto/gpl.hpp"
#include "gaussproto/parallel.hpp"
#include "gaussproto/regions.hpp"
#include "gaussproto/slic.hpp"

namespace gaussproto {

// counts[truth][pred]
struct ConfusionMatrix {
  int classes = 2;
  std::vector<std::size_t> counts;

  explicit ConfusionMatrix(int c = 2) : classes(c), counts(std::size_t(c * c), 0) {}

  std::size_t& at(int truth, int pred) { return counts[std::size_t(truth * classes + pred)]; }
  std::size_t at(int truth, int pred) const { return counts[std::size_t(truth * classes + pred)]; }

  void add(std::span<const int> pred, std::span<const int> truth) {
    if (pred.size() != truth.size()) {
      throw ShapeMismatch("prediction has " + std::to_string(pred.size()) + " pixels, ground truth " +
                          std::to_string(truth.size()));
    }
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] < 0 || pred[i] >= classes || truth[i] < 0 || truth[i] >= classes) {
        throw LabelOutOfRange("label outside 0.." + std::to_string(classes - 1));
      }
      ++at(truth[i], pred[i]);
    }
  }

  void merge(const ConfusionMatrix& o) {
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
  }
};

struct Metrics {
  double mean_iou = 0, class_iou = 0, pixel_accuracy = 0, class_accuracy = 0;
  std::vector<double> iou;  // per class
};

struct MetricTable : Metrics {
  std::vector<std::string> names;  // per image
  std::vector<Metrics> per_image;
};

// An empty denominator (class absent from both prediction and truth) scores 1.
inline Metrics metrics_from_confusion(const ConfusionMatrix& m) {
  Metrics out;
  std::size_t total = 0, correct = 0, fg_truth = 0, fg_hit = 0;
  for (int t = 0; t < m.classes; ++t)
    for (int p = 0; p < m.classes; ++p) {
      const std::size_t v = m.at(t, p);
      total += v;
      if (t == p) correct += v;
      if (t > 0) {
        fg_truth += v;
        if (t == p) fg_hit += v;
      }
    }
  out.pixel_accuracy = total ? double(correct) / double(total) : 1.0;
  out.class_accuracy = fg_truth ? double(fg_hit) / double(fg_truth) : 1.0;
  double sum = 0, fg_sum = 0;
  for (int c = 0; c < m.classes; ++c) {
    std::size_t tp = m.at(c, c), fp = 0, fn = 0;
    for (int o = 0; o < m.classes; ++o) {
      if (o == c) continue;
      fp += m.at(o, c);
      fn += m.at(c, o);
    }
    const std::size_t denom = tp + fp + fn;
    const double iou = denom ? double(tp) / double(denom) : 1.0;
    out.iou.push_back(iou);
    sum += iou;
    if (c > 0) fg_sum += iou;
  }
  out.mean_iou = sum / double(m.classes);
  out.class_iou = m.classes > 1 ? fg_sum / double(m.classes - 1) : out.mean_iou;
  return out;
}

inline MetricTable evaluate(const std::vector<std::vector<int>>& predictions,
                            const std::vector<std::vector<int>>& ground_truth, int classes = 2,
                            const std::vector<std::string>& names = {}) {
  if (predictions.size() != ground_truth.size()) throw ShapeMismatch("prediction and ground-truth counts differ");
  ConfusionMatrix total(classes);
  MetricTable table;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    ConfusionMatrix m(classes);
    m.add(predictions[i], ground_truth[i]);
    total.merge(m);
    table.per_image.push_back(metrics_from_confusion(m));
    table.names.push_back(i < names.size() ? names[i] : std::to_string(i));
  }
  static_cast<Metrics&>(table) = metrics_from_confusion(total);
  return table;
}

inline nlohmann::json metrics_json(const Metrics& m) {
  return {{"Mean IoU", m.mean_iou},
          {"Class IoU", m.class_iou},
          {"Pixel Accuracy", m.pixel_accuracy},
          {"Class Accuracy", m.class_accuracy},
          {"Per-class IoU", m.iou}};
}

inline nlohmann::json metric_table_json(const MetricTable& t) {
  nlohmann::json j = metrics_json(t);
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t i = 0; i < t.per_image.size(); ++i) {
    auto e = metrics_json(t.per_image[i]);
    e["image"] = t.names[i];
    per.push_back(std::move(e));
  }
  j["per_image"] = std::move(per);
  return j;
}

// ---- colour-space baseline ---------------------------------------------------

struct HsvBaselineConfig {
  SlicConfig slic{64, 10.0, 10};
  std::size_t components_per_class = 2;
  std::size_t epochs = 150;
  double learning_rate = 0.005;
  std::uint64_t seed = 0;
};

// (cos 2 pi h, sin 2 pi h, s, v): hue on the unit circle so red near h = 0
// and h = 1 encodes identically.
inline std::array<double, 4> encode_hsv(double h, double s, double v) {
  const double a = 2 * std::numbers::pi * h;
  return {std::cos(a), std::sin(a), s, v};
}

// Mean encoded HSV colour of every superpixel, [count, 4].
inline Tensor<double> superpixel_hsv_features(const Image& img, const SuperpixelMap& sp) {
  Tensor<double> f(Shape{sp.count, 4});
  std::vector<std::size_t> n(sp.count, 0);
  for (std::size_t p = 0; p < sp.labels.size(); ++p) {
    const auto hsv = rgb_to_hsv(img.pixels[p * 3] / 255.0, img.pixels[p * 3 + 1] / 255.0, img.pixels[p * 3 + 2] / 255.0);
    const auto e = encode_hsv(hsv[0], hsv[1], hsv[2]);
    const auto s = static_cast<std::size_t>(sp.labels[p]);
    for (std::size_t k = 0; k < 4; ++k) f[s * 4 + k] += e[k];
    ++n[s];
  }
  for (std::size_t s = 0; s < sp.count; ++s)
    for (std::size_t k = 0; k < 4; ++k) f[s * 4 + k] /= double(n[s]);
  return f;
}

struct HsvBaseline {
  HsvBaselineConfig config;
  std::vector<GplParams<double>> class_models;
  std::vector<double> log_priors;

  int num_classes() const { return static_cast<int>(class_models.size()); }

  // log prior + log density of each class for every feature row, [M, C].
  Tensor<double> class_log_scores(const Tensor<double>& features) const {
    const std::size_t m = features.dim(0), c = class_models.size();
    Tensor<double> out(Shape{m, c});
    for (std::size_t y = 0; y < c; ++y) {
      Graph<double> g;
      auto vars = bind(g, class_models[y]);
      const auto lse = ops::log_sum_exp(log_joint(vars, g.constant(features))).value();
      for (std::size_t i = 0; i < m; ++i) out[i * c + y] = lse[i] + log_priors[y];
    }
    return out;
  }

  // Superpixel-wise labels; exact ties go to the smaller class index.
  std::vector<int> predict_features(const Tensor<double>& features) const {
    const auto scores = class_log_scores(features);
    const std::size_t c = class_models.size();
    std::vector<int> out(features.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = argmax_class<double>(std::span<const double>(scores.data().data() + i * c, c));
    }
    return out;
  }

  std::vector<int> predict(const Image& img) const {
    const auto sp = slic(image_to_tensor<double>(img), config.slic);
    const auto labels = predict_features(superpixel_hsv_features(img, sp));
    std::vector<int> out(sp.labels.size());
    for (std::size_t p = 0; p < out.size(); ++p) out[p] = labels[static_cast<std::size_t>(sp.labels[p])];
    return out;
  }
};

// Fits one mixture per class on labelled feature rows.
inline HsvBaseline fit_hsv_baseline_features(const Tensor<double>& features, const std::vector<int>& labels,
                                             int classes, const HsvBaselineConfig& cfg) {
  HsvBaseline model;
  model.config = cfg;
  const std::size_t d = features.dim(1);
  for (int y = 0; y < classes; ++y) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == y) rows.push_back(i);
    if (rows.empty()) throw MissingClass("no superpixel of class " + std::to_string(y) + " in the training set");
    Tensor<double> z(Shape{rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t k = 0; k < d; ++k) z[i * d + k] = features[rows[i] * d + k];
    const std::size_t n = std::min(cfg.components_per_class, rows.size());
    auto params = init_from_data(z, n, std::vector<int>(n, 0), nullptr, cfg.seed + std::uint64_t(y));
    OptimizerConfig opt;
    opt.learning_rate = cfg.learning_rate;
    fit_gmm(params, z, opt, cfg.epochs, 0, cfg.seed, true);
    model.class_models.push_back(std::move(params));
    model.log_priors.push_back(std::log(double(rows.size()) / double(labels.size())));
  }
  return model;
}

inline HsvBaseline fit_hsv_baseline(const Dataset& ds, int classes, const HsvBaselineConfig& cfg) {
  if (ds.empty()) throw EmptyBatch("baseline needs training images");
  std::vector<Tensor<double>> feats(ds.size());
  std::vector<std::vector<int>> labs(ds.size());
  parallel_for(ds.size(), [&](std::size_t i) {
    const auto& s = ds.samples[i];
    const auto sp = slic(image_to_tensor<double>(s.image), cfg.slic);
    feats[i] = superpixel_hsv_features(s.image, sp);
    std::vector<std::vector<std::size_t>> counts(sp.count, std::vector<std::size_t>(std::size_t(classes), 0));
    for (std::size_t p = 0; p < sp.labels.size(); ++p) ++counts[std::size_t(sp.labels[p])][std::size_t(s.mask[p])];
    for (const auto& c : counts) labs[i].push_back(majority_label(c));
  });
  std::size_t rows = 0;
  for (const auto& f : feats) rows += f.dim(0);
  Tensor<double> all(Shape{rows, 4});
  std::vector<int> labels;
  std::size_t off = 0;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    std::copy(feats[i].data().begin(), feats[i].data().end(), all.data().begin() + std::ptrdiff_t(off));
    off += feats[i].size();
    labels.insert(labels.end(), labs[i].begin(), labs[i].end());
  }
  return fit_hsv_baseline_features(all, labels, classes, cfg);
}

}  // namespace gaussproto
