#pragma once

// ProtoSegNet (one prototype-classified vector per grid cell) and ProtoBBNet
// (one vector per SLIC region proposal), their four-stage training schedule
// and per-pixel segmentation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "gaussproto/dataset.hpp"
#include "gaussproto/encoders.hpp"
#include "gaussproto/errors.hpp"
#include "gaussproto/gpl.hpp"
#include "gaussproto/image.hpp"
#include "gaussproto/optim.hpp"
#include "gaussproto/parallel.hpp"
#include "gaussproto/regions.hpp"
#include "gaussproto/slic.hpp"

namespace gaussproto {

enum class ModelKind { kProtoSeg, kProtoBB };

inline std::string to_string(ModelKind k) { return k == ModelKind::kProtoSeg ? "protoseg" : "protobb"; }

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "protoseg") return ModelKind::kProtoSeg;
  if (s == "protobb") return ModelKind::kProtoBB;
  throw ConfigError("unknown model '" + s + "' (expected protoseg or protobb)");
}

struct RegionConfig {
  SlicConfig slic{200, 10.0, 10};
  RoiAlignConfig roi{8, 2};
  std::size_t train_proposals = 16;  // sampled per image and epoch in stages 1 and 4; 0 = all
};

struct LossWeights {
  double gmm = 1.0, clf = 1.0, l1 = 1e-4;
};

struct ModelSpec {
  ModelKind kind = ModelKind::kProtoSeg;
  EncoderConfig encoder;
  std::size_t prototypes_per_class = 5;
  int num_classes = 2;
  std::optional<RegionConfig> region;  // ProtoBBNet only
  LossWeights loss;

  std::size_t num_prototypes() const { return prototypes_per_class * std::size_t(num_classes); }

  std::vector<int> class_of() const {
    std::vector<int> out;
    for (int y = 0; y < num_classes; ++y)
      for (std::size_t k = 0; k < prototypes_per_class; ++k) out.push_back(y);
    return out;
  }

  void validate() const {
    encoder.validate();
    if (num_classes < 2) throw ConfigError("need at least two classes (background and one foreground)");
    if (prototypes_per_class == 0) throw ConfigError("prototypes_per_class must be positive");
    if ((kind == ModelKind::kProtoBB) != region.has_value()) {
      throw ConfigError("a region config is required for protobb and not allowed for protoseg");
    }
    if (region) {
      const auto s = region->roi.output_size;
      if (s < 4 || (s & (s - 1)) != 0) throw ConfigError("roi output size must be a power of two >= 4");
      if (region->roi.samples == 0) throw ConfigError("roi samples must be positive");
    }
  }
};

// Per-channel standardization of [0, 1] RGB, fitted on the training split.
struct Normalization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};

  static Normalization fit(const Dataset& ds) {
    std::array<double, 3> s{}, s2{};
    double n = 0;
    for (const auto& smp : ds.samples) {
      const auto& px = smp.image.pixels;
      for (std::size_t p = 0; p < px.size(); p += 3)
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = px[p + c] / 255.0;
          s[c] += v;
          s2[c] += v * v;
        }
      n += double(px.size() / 3);
    }
    Normalization out;
    if (n == 0) return out;
    for (std::size_t c = 0; c < 3; ++c) {
      out.mean[c] = s[c] / n;
      out.stddev[c] = std::sqrt(std::max(s2[c] / n - out.mean[c] * out.mean[c], 1e-12));
    }
    return out;
  }

  template <class T>
  Tensor<T> apply(const Image& img) const {
    Tensor<T> t = image_to_tensor<T>(img);
    const std::size_t n = img.width * img.height;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < n; ++p) t[c * n + p] = static_cast<T>((double(t[c * n + p]) - mean[c]) / stddev[c]);
    return t;
  }
};

template <class T>
class Model {
 public:
  ModelSpec spec;
  Normalization norm;
  PrimaryEncoder<T> encoder;
  std::optional<SecondaryEncoder<T>> secondary;
  GplParams<T> gpl;
  LinearHead<T> head;

  Model() = default;
  Model(const ModelSpec& s, std::uint64_t seed) : spec(s) {
    spec.validate();
    std::mt19937_64 rng(seed);
    encoder = PrimaryEncoder<T>(spec.encoder, rng);
    if (spec.kind == ModelKind::kProtoBB) {
      secondary.emplace(spec.encoder.latent_dim, spec.encoder.secondary_channels, spec.region->roi.output_size, rng);
    }
    const auto classes = spec.class_of();
    gpl = GplParams<T>(classes.size(), spec.encoder.latent_dim, classes);
    head = LinearHead<T>::for_classes(classes, std::size_t(spec.num_classes));
  }

  std::size_t scale() const { return spec.encoder.scale(); }

  // Every trainable tensor, in a fixed order with unique names.
  std::vector<Parameter<T>*> parameters() {
    auto out = encoder.parameters();
    if (secondary) {
      for (auto* p : secondary->parameters()) out.push_back(p);
      for (auto* p : secondary->decoder_parameters()) out.push_back(p);
    }
    for (auto* p : gpl.parameters()) out.push_back(p);
    for (auto* p : head.parameters()) out.push_back(p);
    return out;
  }

  std::vector<std::pair<std::string, BatchNormStats<T>*>> norm_stats() {
    auto out = encoder.norm_stats();
    if (secondary) {
      for (auto& e : secondary->norm_stats()) out.push_back(e);
    }
    return out;
  }

  // Parameters each training stage may change.
  std::vector<Parameter<T>*> stage_parameters(int stage) {
    std::vector<Parameter<T>*> out;
    auto add = [&out](const std::vector<Parameter<T>*>& v) { out.insert(out.end(), v.begin(), v.end()); };
    switch (stage) {
      case 1:
        add(encoder.reducer_parameters());
        add(encoder.decoder_parameters());
        if (secondary) {
          add(secondary->parameters());
          add(secondary->decoder_parameters());
        }
        break;
      case 2:
        add(gpl.parameters());
        break;
      case 3:
        add(head.parameters());
        break;
      case 4:
        add(encoder.backbone_parameters());
        add(encoder.reducer_parameters());
        if (secondary) add(secondary->parameters());
        add(gpl.parameters());
        add(head.parameters());
        break;
      default:
        throw InvalidArgument("stage must be 1..4");
    }
    return out;
  }

  void check_image(const Image& img) const {
    const std::size_t n = spec.encoder.input_size;
    if (img.channels != 3) throw ShapeMismatch("expected an RGB image");
    if (img.width != n || img.height != n) {
      throw ShapeMismatch("image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                          ", model expects " + std::to_string(n) + "x" + std::to_string(n));
    }
  }
};

// ---- batching helpers --------------------------------------------------------

template <class T>
Tensor<T> stack_images(const Model<T>& m, const Dataset& ds, std::span<const std::size_t> idx) {
  const std::size_t n = m.spec.encoder.input_size, plane = 3 * n * n;
  Tensor<T> out(Shape{idx.size(), 3, n, n});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& s = ds.samples[idx[b]];
    m.check_image(s.image);
    const Tensor<T> t = m.norm.template apply<T>(s.image);
    std::copy(t.data().begin(), t.data().end(), out.data().begin() + std::ptrdiff_t(b * plane));
  }
  return out;
}

// Majority class of every p x p patch, row-major over the grid.
inline std::vector<int> cell_labels(std::span<const int> mask, std::size_t size, std::size_t p, int classes) {
  const std::size_t g = size / p;
  std::vector<int> out(g * g);
  std::vector<std::size_t> counts(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = 0; j < g; ++j) {
      std::fill(counts.begin(), counts.end(), 0);
      for (std::size_t a = 0; a < p; ++a)
        for (std::size_t b = 0; b < p; ++b) {
          const int y = mask[(i * p + a) * size + j * p + b];
          if (y < 0 || y >= classes) throw LabelOutOfRange("mask value " + std::to_string(y) + " out of range");
          ++counts[std::size_t(y)];
        }
      out[i * g + j] = majority_label(counts);
    }
  return out;
}

// Paints every grid cell's class onto its p x p pixel patch.
inline std::vector<int> upscale_cells(std::span<const int> cells, std::size_t grid, std::size_t p) {
  if (cells.size() != grid * grid) throw ShapeMismatch("cell count does not match grid");
  const std::size_t n = grid * p;
  std::vector<int> out(n * n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = cells[(r / p) * grid + c / p];
  return out;
}

// Paints each proposal's class onto its superpixel.
inline std::vector<int> paint_proposals(const std::vector<RegionProposal>& props, std::span<const int> classes,
                                        std::size_t pixels) {
  std::vector<int> out(pixels, 0);
  for (std::size_t i = 0; i < props.size(); ++i)
    for (auto p : props[i].pixels) out[p] = classes[i];
  return out;
}

// ---- inference ---------------------------------------------------------------

template <class T>
Tensor<T> latent_map(Model<T>& m, const Image& img) {
  m.check_image(img);
  Graph<T> g;
  auto x = g.constant(m.norm.template apply<T>(img).reshaped(
      Shape{1, 3, m.spec.encoder.input_size, m.spec.encoder.input_size}));
  return m.encoder.encode(g, x, ForwardMode::inference()).value();  // [1, L, n', n']
}

// Grid vectors of one image, rows in (row, column) order: [n'^2, L].
template <class T>
Tensor<T> grid_vectors(Model<T>& m, const Image& img) {
  Graph<T> g;
  return ops::nchw_to_rows(g.constant(latent_map(m, img))).value();
}

template <class T>
std::vector<RegionProposal> image_proposals(const Model<T>& m, const Image& img, std::span<const int> mask = {}) {
  if (!m.spec.region) throw InvalidArgument("model has no region config");
  const auto sp = slic(image_to_tensor<double>(img), m.spec.region->slic);
  std::vector<int> zeros;
  if (mask.empty()) {
    zeros.assign(img.width * img.height, 0);
    mask = zeros;
  }
  return proposals_from_superpixels(sp, mask, m.scale(), m.spec.num_classes);
}

// Secondary-encoder embeddings of the proposals of one image: [P, L].
template <class T>
Tensor<T> proposal_vectors(Model<T>& m, const Image& img, const std::vector<RegionProposal>& props) {
  if (!m.secondary) throw InvalidArgument("model has no secondary encoder");
  Graph<T> g;
  auto z = g.constant(latent_map(m, img));
  std::vector<LatentBox> boxes;
  for (const auto& p : props) boxes.push_back(p.latent_box);
  std::vector<std::size_t> image_of(boxes.size(), 0);
  auto crops = roi_align(z, std::span<const LatentBox>(boxes), std::span<const std::size_t>(image_of),
                         m.spec.region->roi);
  return m.secondary->encode(g, crops, ForwardMode::inference()).value();
}

template <class T>
std::vector<int> classify_rows(const Model<T>& m, const Tensor<T>& z) {
  return classify(m.head, m.gpl, z);
}

template <class T>
std::vector<int> segment_protoseg(Model<T>& m, const Image& img) {
  if (m.spec.kind != ModelKind::kProtoSeg) throw InvalidArgument("segment_protoseg needs a protoseg model");
  const auto cells = classify_rows(m, grid_vectors(m, img));
  return upscale_cells(cells, m.spec.encoder.grid_size(), m.scale());
}

template <class T>
std::vector<int> segment_protobb(Model<T>& m, const Image& img) {
  if (m.spec.kind != ModelKind::kProtoBB) throw InvalidArgument("segment_protobb needs a protobb model");
  m.check_image(img);
  const auto props = image_proposals(m, img);
  const auto classes = classify_rows(m, proposal_vectors(m, img, props));
  return paint_proposals(props, classes, img.width * img.height);
}

template <class T>
std::vector<int> segment(Model<T>& m, const Image& img) {
  return m.spec.kind == ModelKind::kProtoSeg ? segment_protoseg(m, img) : segment_protobb(m, img);
}

template <class T>
std::vector<std::vector<int>> segment_all(Model<T>& m, const Dataset& ds) {
  std::vector<std::vector<int>> out(ds.size());
  // Inference leaves the model untouched, so images can be processed concurrently.
  parallel_for(ds.size(), [&](std::size_t i) { out[i] = segment(m, ds.samples[i].image); });
  return out;
}

// ---- training ----------------------------------------------------------------

struct Schedule {
  std::array<std::size_t, 4> epochs{50, 100, 50, 200};
  std::array<double, 4> learning_rates{1e-3, 1e-3, 1e-3, 1e-4};
  std::size_t batch_size = 16;           // images per step in stages 1 and 4
  std::size_t vector_batch_size = 1024;  // latent vectors per step in stages 2 and 3
  std::size_t patience = 10;
  double min_delta = 1e-4;
  std::size_t smoothing = 5;             // epochs in the moving average
  std::size_t calibration_images = 64;   // batch used to set batch-norm statistics
};

// One CSV row. Stage 1 has no mixture yet, so its terms are absent and only
// the reconstruction objective is recorded.
struct LossRecord {
  int stage = 0;
  std::size_t epoch = 0;
  bool has_terms = false;
  double gmm = 0, clf = 0, l1 = 0, total = 0;
  double objective = 0;  // what the stage minimized
};

inline std::string loss_csv_header() { return "stage,epoch,L_GMM,L_clf,L1,L,objective\n"; }

inline std::string loss_csv_row(const LossRecord& r) {
  auto f = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::string s = std::to_string(r.stage) + "," + std::to_string(r.epoch) + ",";
  if (r.has_terms) {
    s += f(r.gmm) + "," + f(r.clf) + "," + f(r.l1) + "," + f(r.total);
  } else {
    s += ",,,";
  }
  return s + "," + f(r.objective) + "\n";
}

// Stops once the moving average of the objective has not improved by
// min_delta for `patience` epochs.
class EarlyStopping {
 public:
  EarlyStopping(std::size_t patience, double min_delta, std::size_t window)
      : patience_(patience), min_delta_(min_delta), window_(std::max<std::size_t>(window, 1)) {}

  bool update(double loss) {
    recent_.push_back(loss);
    if (recent_.size() > window_) recent_.erase(recent_.begin());
    smoothed_ = std::accumulate(recent_.begin(), recent_.end(), 0.0) / double(recent_.size());
    ++epoch_;
    if (smoothed_ < best_ - min_delta_) {
      best_ = smoothed_;
      last_improvement_ = epoch_;
    }
    return patience_ > 0 && epoch_ - last_improvement_ >= patience_;
  }

  double smoothed() const { return smoothed_; }

 private:
  std::size_t patience_;
  double min_delta_;
  std::size_t window_;
  std::vector<double> recent_;
  double smoothed_ = 0, best_ = std::numeric_limits<double>::infinity();
  std::size_t epoch_ = 0, last_improvement_ = 0;
};

struct StageSummary {
  std::size_t epochs = 0;
  double final_smoothed = 0;       // moving average of the stage objective
  double final_smoothed_total = 0; // moving average of L (stages 2..4)
};

struct TrainSummary {
  std::array<StageSummary, 4> stages{};
  std::vector<LossRecord> history;
};

namespace detail {

template <class T>
struct TermVars {
  Var<T> gmm, clf, l1, total;
};

// L_GMM, L_clf, L1 and their weighted sum for a batch of latent rows.
template <class T>
TermVars<T> loss_terms(Graph<T>& g, Model<T>& m, Var<T> rows, std::span<const int> labels, bool train_gpl,
                       bool train_head) {
  const auto vars = bind(g, m.gpl, train_gpl);
  const auto head = bind_head(g, m.head, train_head);
  auto lj = log_joint(vars, rows);
  auto gmm = ops::scale(ops::mean(ops::log_sum_exp(lj)), T(-1));
  auto clf = classification_loss(head, ops::log_softmax(lj), labels);
  auto l1 = l1_cross_class(head, m.gpl.class_of);
  const auto& w = m.spec.loss;
  auto total = ops::add(ops::add(ops::scale(gmm, T(w.gmm)), ops::scale(clf, T(w.clf))), ops::scale(l1, T(w.l1)));
  return {gmm, clf, l1, total};
}

struct EpochAccumulator {
  double gmm = 0, clf = 0, l1 = 0, total = 0, objective = 0, weight = 0;

  template <class T>
  void add_terms(const TermVars<T>& t, double w) {
    gmm += w * double(t.gmm.value().item());
    clf += w * double(t.clf.value().item());
    l1 += w * double(t.l1.value().item());
    total += w * double(t.total.value().item());
  }

  LossRecord finish(int stage, std::size_t epoch, bool has_terms) const {
    LossRecord r;
    r.stage = stage;
    r.epoch = epoch;
    r.has_terms = has_terms;
    if (has_terms) {
      r.gmm = gmm / weight;
      r.clf = clf / weight;
      r.l1 = l1 / weight;
      r.total = total / weight;
    }
    r.objective = objective / weight;
    return r;
  }
};

inline std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  std::shuffle(v.begin(), v.end(), rng);
  return v;
}

}  // namespace detail

// Runs the four stages strictly in order. Each stage optimizes only its own
// parameter group; everything it needs from earlier stages is cached.
template <class T>
class Trainer {
 public:
  using Callback = std::function<void(const LossRecord&)>;

  Trainer(Model<T>& model, const Dataset& train, Schedule schedule, std::uint64_t seed, Callback on_epoch = {})
      : m_(model), ds_(train), sched_(schedule), seed_(seed), on_epoch_(std::move(on_epoch)) {
    if (ds_.empty()) throw EmptyBatch("training needs at least one image");
    if (sched_.batch_size == 0 || sched_.vector_batch_size == 0) throw ConfigError("batch sizes must be positive");
    m_.norm = Normalization::fit(ds_);
    const std::size_t n = m_.spec.encoder.input_size;
    for (const auto& s : ds_.samples) m_.check_image(s.image);
    if (m_.spec.kind == ModelKind::kProtoSeg) {
      std::vector<bool> seen(std::size_t(m_.spec.num_classes), false);
      for (const auto& s : ds_.samples) {
        cells_.push_back(cell_labels(s.mask, n, m_.scale(), m_.spec.num_classes));
        for (int y : cells_.back()) seen[std::size_t(y)] = true;
      }
      require_classes(seen, "grid cell");
    } else {
      proposals_.resize(ds_.size());
      parallel_for(ds_.size(), [&](std::size_t i) {
        proposals_[i] = image_proposals(m_, ds_.samples[i].image, ds_.samples[i].mask);
      });
      std::vector<bool> seen(std::size_t(m_.spec.num_classes), false);
      for (const auto& ps : proposals_)
        for (const auto& p : ps) seen[std::size_t(p.label)] = true;
      require_classes(seen, "region proposal");
    }
  }

  int next_stage() const { return next_; }
  const TrainSummary& summary() const { return summary_; }

  void run_stage(int stage) {
    if (stage != next_) {
      throw InvalidArgument("stage " + std::to_string(stage) + " requested, but stage " + std::to_string(next_) +
                            " is next");
    }
    try {
      switch (stage) {
        case 1: stage1(); break;
        case 2: stage2(); break;
        case 3: stage3(); break;
        case 4: stage4(); break;
        default: break;
      }
    } catch (const NotFinite& e) {
      throw NonFiniteLoss("stage " + std::to_string(stage) + ", epoch " + std::to_string(epoch_) +
                          ": non-finite value (" + e.what() + "); lower the learning rate");
    }
    ++next_;
  }

  TrainSummary run() {
    while (next_ <= 4) run_stage(next_);
    return summary_;
  }

 private:
  void require_classes(const std::vector<bool>& seen, const char* what) {
    for (std::size_t y = 0; y < seen.size(); ++y) {
      if (!seen[y]) throw MissingClass("no " + std::string(what) + " of class " + std::to_string(y) + " in the training set");
    }
  }

  std::size_t grid() const { return m_.spec.encoder.grid_size(); }

  // Sets every batch-norm layer of the backbone to the statistics of one
  // calibration batch, so inference-mode normalization is meaningful.
  void calibrate_backbone() {
    const std::size_t count = std::min(sched_.calibration_images, ds_.size());
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), 0);
    auto stats = m_.encoder.norm_stats();
    with_momentum_one(stats, [&] {
      Graph<T> g;
      m_.encoder.features(g, g.constant(stack_images(m_, ds_, idx)), ForwardMode{NormMode::kTrain, true, false});
    });
  }

  template <class F>
  static void with_momentum_one(std::vector<std::pair<std::string, BatchNormStats<T>*>>& stats, F&& f) {
    std::vector<T> saved;
    for (auto& [name, s] : stats) {
      saved.push_back(s->momentum);
      s->momentum = T(1);
    }
    f();
    for (std::size_t i = 0; i < stats.size(); ++i) stats[i].second->momentum = saved[i];
  }

  void cache_features() {
    features_.clear();
    const std::size_t b = sched_.batch_size;
    for (std::size_t i0 = 0; i0 < ds_.size(); i0 += b) {
      std::vector<std::size_t> idx(std::min(b, ds_.size() - i0));
      std::iota(idx.begin(), idx.end(), i0);
      Graph<T> g;
      features_.push_back(
          m_.encoder.features(g, g.constant(stack_images(m_, ds_, idx)), ForwardMode::inference()).value());
    }
  }

  // Features of images [i0, i0 + count) from the cache, [count, C, n', n'].
  Tensor<T> cached_features(std::span<const std::size_t> idx) const {
    const auto& f0 = features_.front();
    const std::size_t per = f0.size() / f0.dim(0), b = sched_.batch_size;
    Tensor<T> out(Shape{idx.size(), f0.dim(1), f0.dim(2), f0.dim(3)});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto& src = features_[idx[i] / b];
      std::copy_n(src.data().begin() + std::ptrdiff_t((idx[i] % b) * per), per,
                  out.data().begin() + std::ptrdiff_t(i * per));
    }
    return out;
  }

  // Proposals of the given images (all of them, or a seeded sample per image).
  void gather_proposals(std::span<const std::size_t> idx, std::size_t per_image, std::mt19937_64& rng,
                        std::vector<LatentBox>& boxes, std::vector<std::size_t>& image_of,
                        std::vector<int>& labels) const {
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto& ps = proposals_[idx[b]];
      std::vector<std::size_t> pick(ps.size());
      std::iota(pick.begin(), pick.end(), 0);
      if (per_image > 0 && per_image < ps.size()) {
        std::shuffle(pick.begin(), pick.end(), rng);
        pick.resize(per_image);
        std::sort(pick.begin(), pick.end());
      }
      for (auto k : pick) {
        boxes.push_back(ps[k].latent_box);
        image_of.push_back(b);
        labels.push_back(ps[k].label);
      }
    }
  }

  // Epoch bookkeeping shared by all stages; returns true to stop.
  bool end_epoch(int stage, EarlyStopping& stop, EarlyStopping& total_avg, const detail::EpochAccumulator& acc,
                 bool has_terms) {
    auto rec = acc.finish(stage, epoch_, has_terms);
    summary_.history.push_back(rec);
    if (on_epoch_) on_epoch_(rec);
    if (has_terms) total_avg.update(rec.total);
    const bool done = stop.update(rec.objective);
    auto& s = summary_.stages[std::size_t(stage - 1)];
    s.epochs = epoch_ + 1;
    s.final_smoothed = stop.smoothed();
    s.final_smoothed_total = has_terms ? total_avg.smoothed() : 0.0;
    return done;
  }

  EarlyStopping make_stopper() const { return {sched_.patience, sched_.min_delta, sched_.smoothing}; }

  Optimizer<T> make_optimizer(int stage) {
    OptimizerConfig oc;
    oc.learning_rate = sched_.learning_rates[std::size_t(stage - 1)];
    return Optimizer<T>(oc, m_.stage_parameters(stage));
  }

  // Stage 1: autoencoders. h/H reconstruct the frozen backbone features; for
  // ProtoBBNet the secondary encoder also learns to reconstruct its RoI crops.
  void stage1() {
    calibrate_backbone();
    cache_features();
    auto opt = make_optimizer(1);
    std::mt19937_64 rng(seed_ * 4 + 1);
    auto stop = make_stopper(), unused = make_stopper();
    const ForwardMode train_mode{NormMode::kInference, false, true};
    for (epoch_ = 0; epoch_ < sched_.epochs[0]; ++epoch_) {
      detail::EpochAccumulator acc;
      const auto order = detail::shuffled(ds_.size(), rng);
      for (std::size_t b0 = 0; b0 < order.size(); b0 += sched_.batch_size) {
        std::span<const std::size_t> idx(order.data() + b0, std::min(sched_.batch_size, order.size() - b0));
        opt.zero_grad();
        Graph<T> g;
        auto feat = g.constant(cached_features(idx));
        auto ae = m_.encoder.reduce_and_reconstruct(g, feat, train_mode);
        Var<T> loss = ae.mse;
        if (m_.secondary) {
          std::vector<LatentBox> boxes;
          std::vector<std::size_t> image_of;
          std::vector<int> labels;
          gather_proposals(idx, m_.spec.region->train_proposals, rng, boxes, image_of, labels);
          auto crops = roi_align(ae.reduced, std::span<const LatentBox>(boxes), std::span<const std::size_t>(image_of),
                                 m_.spec.region->roi);
          auto rec = m_.secondary->decode(g, m_.secondary->encode(g, crops, ForwardMode::training()), train_mode);
          loss = ops::add(loss, ops::mse(rec, g.constant(crops.value())));
        }
        g.backward(loss);
        opt.step();
        acc.objective += double(loss.value().item()) * double(idx.size());
        acc.weight += double(idx.size());
      }
      if (end_epoch(1, stop, unused, acc, false)) {
        ++epoch_;
        break;
      }
    }
    if (m_.secondary) calibrate_secondary();
  }

  void calibrate_secondary() {
    const std::size_t count = std::min(sched_.calibration_images, ds_.size());
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed_ * 4 + 2);
    std::vector<LatentBox> boxes;
    std::vector<std::size_t> image_of;
    std::vector<int> labels;
    gather_proposals(idx, m_.spec.region->train_proposals, rng, boxes, image_of, labels);
    auto stats = m_.secondary->norm_stats();
    with_momentum_one(stats, [&] {
      Graph<T> g;
      auto z = m_.encoder.reduce(g, g.constant(cached_features(idx)), ForwardMode::inference());
      auto crops = roi_align(z, std::span<const LatentBox>(boxes), std::span<const std::size_t>(image_of),
                             m_.spec.region->roi);
      m_.secondary->encode(g, crops, ForwardMode{NormMode::kTrain, true, false});
    });
  }

  // Latent vectors of the whole training split under the frozen encoders,
  // with their class labels.
  void cache_vectors() {
    const std::size_t b = sched_.batch_size;
    std::vector<Tensor<T>> parts;
    labels_.clear();
    std::size_t rows = 0;
    for (std::size_t i0 = 0; i0 < ds_.size(); i0 += b) {
      std::vector<std::size_t> idx(std::min(b, ds_.size() - i0));
      std::iota(idx.begin(), idx.end(), i0);
      Graph<T> g;
      auto z = m_.encoder.reduce(g, g.constant(cached_features(idx)), ForwardMode::inference());
      if (m_.spec.kind == ModelKind::kProtoSeg) {
        parts.push_back(ops::nchw_to_rows(z).value());
        for (auto i : idx) labels_.insert(labels_.end(), cells_[i].begin(), cells_[i].end());
      } else {
        std::vector<LatentBox> boxes;
        std::vector<std::size_t> image_of;
        std::vector<int> labels;
        std::mt19937_64 unused;
        gather_proposals(idx, 0, unused, boxes, image_of, labels);
        auto crops = roi_align(z, std::span<const LatentBox>(boxes), std::span<const std::size_t>(image_of),
                               m_.spec.region->roi);
        parts.push_back(m_.secondary->encode(g, crops, ForwardMode::inference()).value());
        labels_.insert(labels_.end(), labels.begin(), labels.end());
      }
      rows += parts.back().dim(0);
    }
    const std::size_t d = m_.spec.encoder.latent_dim;
    vectors_ = Tensor<T>(Shape{rows, d});
    std::size_t off = 0;
    for (const auto& p : parts) {
      std::copy(p.data().begin(), p.data().end(), vectors_.data().begin() + std::ptrdiff_t(off));
      off += p.size();
    }
  }

  Tensor<T> vector_rows(std::span<const std::size_t> idx, std::vector<int>& labels) const {
    const std::size_t d = vectors_.dim(1);
    Tensor<T> out(Shape{idx.size(), d});
    labels.clear();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(vectors_.data().begin() + std::ptrdiff_t(idx[i] * d), d,
                  out.data().begin() + std::ptrdiff_t(i * d));
      labels.push_back(labels_[idx[i]]);
    }
    return out;
  }

  // Stages 2 and 3 train on the cached vectors: the mixture, then the head.
  void vector_stage(int stage) {
    auto opt = make_optimizer(stage);
    std::mt19937_64 rng(seed_ * 4 + std::uint64_t(stage) + 1);
    auto stop = make_stopper(), total_avg = make_stopper();
    const std::size_t m = vectors_.dim(0), b = sched_.vector_batch_size;
    for (epoch_ = 0; epoch_ < sched_.epochs[std::size_t(stage - 1)]; ++epoch_) {
      detail::EpochAccumulator acc;
      const auto order = detail::shuffled(m, rng);
      std::vector<int> labels;
      for (std::size_t b0 = 0; b0 < m; b0 += b) {
        std::span<const std::size_t> idx(order.data() + b0, std::min(b, m - b0));
        opt.zero_grad();
        Graph<T> g;
        auto rows = g.constant(vector_rows(idx, labels));
        auto t = detail::loss_terms(g, m_, rows, labels, stage == 2, stage == 3);
        auto objective = stage == 2 ? t.gmm : t.clf;
        g.backward(objective);
        opt.step();
        const double w = double(idx.size());
        acc.add_terms(t, w);
        acc.objective += w * double(objective.value().item());
        acc.weight += w;
      }
      if (end_epoch(stage, stop, total_avg, acc, true)) {
        ++epoch_;
        break;
      }
    }
  }

  void stage2() {
    cache_vectors();
    m_.gpl = init_from_data(vectors_, m_.spec.num_prototypes(), m_.spec.class_of(), &labels_, seed_);
    vector_stage(2);
  }

  void stage3() { vector_stage(3); }

  // Stage 4: everything but the autoencoder decoders, on L = sum of weighted
  // terms. Batch-norm statistics stay frozen at their calibrated values.
  void stage4() {
    auto opt = make_optimizer(4);
    std::mt19937_64 rng(seed_ * 4 + 5);
    auto stop = make_stopper(), total_avg = make_stopper();
    const ForwardMode mode{NormMode::kInference, false, true};
    for (epoch_ = 0; epoch_ < sched_.epochs[3]; ++epoch_) {
      detail::EpochAccumulator acc;
      const auto order = detail::shuffled(ds_.size(), rng);
      for (std::size_t b0 = 0; b0 < order.size(); b0 += sched_.batch_size) {
        std::span<const std::size_t> idx(order.data() + b0, std::min(sched_.batch_size, order.size() - b0));
        opt.zero_grad();
        Graph<T> g;
        auto z = m_.encoder.encode(g, g.constant(stack_images(m_, ds_, idx)), mode);
        Var<T> rows;
        std::vector<int> labels;
        if (m_.spec.kind == ModelKind::kProtoSeg) {
          rows = ops::nchw_to_rows(z);
          for (auto i : idx) labels.insert(labels.end(), cells_[i].begin(), cells_[i].end());
        } else {
          std::vector<LatentBox> boxes;
          std::vector<std::size_t> image_of;
          gather_proposals(idx, m_.spec.region->train_proposals, rng, boxes, image_of, labels);
          auto crops = roi_align(z, std::span<const LatentBox>(boxes), std::span<const std::size_t>(image_of),
                                 m_.spec.region->roi);
          rows = m_.secondary->encode(g, crops, mode);
        }
        auto t = detail::loss_terms(g, m_, rows, labels, true, true);
        g.backward(t.total);
        opt.step();
        const double w = double(labels.size());
        acc.add_terms(t, w);
        acc.objective += w * double(t.total.value().item());
        acc.weight += w;
      }
      if (end_epoch(4, stop, total_avg, acc, true)) {
        ++epoch_;
        break;
      }
    }
  }

  Model<T>& m_;
  const Dataset& ds_;
  Schedule sched_;
  std::uint64_t seed_;
  Callback on_epoch_;
  int next_ = 1;
  std::size_t epoch_ = 0;
  TrainSummary summary_;

  std::vector<std::vector<int>> cells_;                   // ProtoSegNet: cell labels per image
  std::vector<std::vector<RegionProposal>> proposals_;    // ProtoBBNet: proposals per image
  std::vector<Tensor<T>> features_;                       // backbone features per batch of images
  Tensor<T> vectors_;                                     // stage 2/3 latent rows
  std::vector<int> labels_;
};

template <class T>
TrainSummary train(Model<T>& model, const Dataset& ds, const Schedule& schedule, std::uint64_t seed,
                   typename Trainer<T>::Callback on_epoch = {}) {
  Trainer<T> t(model, ds, schedule, seed, std::move(on_epoch));
  return t.run();
}

}  // namespace gaussproto
