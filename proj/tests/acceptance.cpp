// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <queue>
#include <random>
#include <string>
#include <vector>

#include "gaussproto/gaussproto.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

namespace gp = gaussproto;
using gp::Shape;
using gp::Tensor;
using gp::testing::random_tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void progress(const std::string& s) {
  std::fprintf(stderr, "[acceptance] %s\n", s.c_str());
  std::fflush(stderr);
}

// ---- 1: gradient suite -------------------------------------------------------

struct GradientTally {
  std::size_t instances = 0;
  double worst = 0;
  std::string worst_op;

  void add(const std::string& op, double err) {
    ++instances;
    if (!(err <= worst)) {
      worst = err;
      worst_op = op;
    }
  }
};

Verdict gradient_suite() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(20240601);
  GradientTally tally;
  auto uniform_int = [&](int lo, int hi) { return lo + int(rng() % std::uint64_t(hi - lo + 1)); };

  // Mixture log-responsibilities with respect to z and every parameter.
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = std::size_t(uniform_int(2, 4)), d = std::size_t(uniform_int(1, 4)), b = 3;
    auto op = [](gp::Graph<double>&, const std::vector<gp::Var<double>>& v) {
      const gp::GplVars<double> p{v[1], v[2], v[3], gp::kCovarianceFloor};
      return gp::log_responsibilities(p, v[0]);
    };
    tally.add("log_responsibilities",
              gp::testing::gradient_check(op,
                                          {random_tensor(Shape{b, d}, rng, -2, 2), random_tensor(Shape{n}, rng),
                                           random_tensor(Shape{n, d}, rng, -2, 2),
                                           random_tensor(Shape{n, d, d}, rng, -0.5, 0.5)},
                                          rng));
  }
  // Mixture negative log-likelihood.
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = std::size_t(uniform_int(1, 4)), d = std::size_t(uniform_int(1, 3)), b = 5;
    auto op = [](gp::Graph<double>&, const std::vector<gp::Var<double>>& v) {
      const gp::GplVars<double> p{v[1], v[2], v[3], gp::kCovarianceFloor};
      return gp::gmm_nll(p, v[0]);
    };
    tally.add("gmm_nll", gp::testing::gradient_check(op,
                                                     {random_tensor(Shape{b, d}, rng, -2, 2), random_tensor(Shape{n}, rng),
                                                      random_tensor(Shape{n, d}, rng, -2, 2),
                                                      random_tensor(Shape{n, d, d}, rng, -0.5, 0.5)},
                                                     rng));
  }
  // Classification head: scores and the cross-entropy through them.
  for (int t = 0; t < 20; ++t) {
    const std::size_t c = std::size_t(uniform_int(2, 3)), n = std::size_t(uniform_int(2, 5)), b = 4;
    std::vector<int> labels(b);
    for (auto& y : labels) y = int(rng() % c);
    auto op = [labels, t](gp::Graph<double>&, const std::vector<gp::Var<double>>& v) {
      auto logresp = gp::ops::log_softmax(v[1]);
      return t % 2 ? gp::class_scores(v[0], logresp) : gp::classification_loss<double>(v[0], logresp, labels);
    };
    tally.add("head", gp::testing::gradient_check(
                          op, {random_tensor(Shape{c, n}, rng, -2, 2), random_tensor(Shape{b, n}, rng, -2, 2)}, rng));
  }
  // Convolutions.
  for (int t = 0; t < 10; ++t) {
    const std::size_t stride = std::size_t(uniform_int(1, 2)), k = std::size_t(uniform_int(1, 3));
    auto op = [stride, k](gp::Graph<double>&, const std::vector<gp::Var<double>>& v) {
      return gp::ops::conv2d(v[0], v[1], &v[2], stride, k / 2);
    };
    tally.add("conv2d", gp::testing::gradient_check(op,
                                                    {random_tensor(Shape{2, 2, 5, 5}, rng), random_tensor(Shape{3, 2, k, k}, rng),
                                                     random_tensor(Shape{3}, rng)},
                                                    rng));
  }
  for (int t = 0; t < 5; ++t) {
    auto op = [](gp::Graph<double>&, const std::vector<gp::Var<double>>& v) {
      return gp::ops::conv_transpose2d(v[0], v[1], &v[2], 2, 0);
    };
    tally.add("conv_transpose2d",
              gp::testing::gradient_check(op,
                                          {random_tensor(Shape{2, 3, 3, 2}, rng), random_tensor(Shape{3, 2, 2, 2}, rng),
                                           random_tensor(Shape{2}, rng)},
                                          rng));
  }
  // Residual blocks, batch norm in training mode: input and parameter gradients.
  for (int t = 0; t < 10; ++t) {
    gp::ResidualBlock<double> block("res", 2, 3, rng);
    const auto x = random_tensor(Shape{2, 2, 6, 6}, rng);
    const auto w = random_tensor(Shape{2, 3, 3, 3}, rng);
    auto loss = [&](gp::Graph<double>& g) {
      return gp::ops::sum(gp::ops::mul(block(g, g.constant(x), gp::ForwardMode::training(false)), g.constant(w)));
    };
    double err = 0;
    for (auto* p : {&block.conv1.weight, &block.conv2.weight, &block.proj.weight, &block.bn1.gamma, &block.bn2.beta}) {
      err = std::max(err, gp::testing::parameter_gradient_check(loss, *p));
    }
    auto op = [&](gp::Graph<double>& g, const std::vector<gp::Var<double>>& v) {
      return block(g, v[0], gp::ForwardMode::training(false));
    };
    err = std::max(err, gp::testing::gradient_check(op, {x}, rng));
    tally.add("residual_block", err);
  }
  // Batch norm, both modes.
  for (int t = 0; t < 10; ++t) {
    const auto mode = t % 2 ? gp::ops::NormMode::kTrain : gp::ops::NormMode::kInference;
    gp::ops::BatchNormStats<double> stats(3);
    stats.running_mean = random_tensor(Shape{3}, rng);
    stats.running_var = random_tensor(Shape{3}, rng, 0.5, 2);
    auto op = [&](gp::Graph<double>&, const std::vector<gp::Var<double>>& v) {
      return gp::ops::batch_norm(v[0], v[1], v[2], stats, mode, false);
    };
    tally.add("batch_norm", gp::testing::gradient_check(op,
                                                        {random_tensor(Shape{3, 3, 2, 2}, rng),
                                                         random_tensor(Shape{3}, rng, 0.5, 2), random_tensor(Shape{3}, rng)},
                                                        rng));
  }
  // RoIAlign with random boxes, several per grid.
  for (int t = 0; t < 15; ++t) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<gp::LatentBox> boxes;
    std::vector<std::size_t> images;
    for (int b = 0; b < 3; ++b) {
      const double y0 = 4 * u(rng), x0 = 5 * u(rng);
      boxes.push_back({y0, x0, std::min(5.0, y0 + 0.5 + 2 * u(rng)), std::min(6.0, x0 + 0.5 + 2 * u(rng))});
      images.push_back(std::size_t(b % 2));
    }
    const gp::RoiAlignConfig cfg{std::size_t(uniform_int(1, 4)), std::size_t(uniform_int(1, 3))};
    auto op = [&](gp::Graph<double>&, const std::vector<gp::Var<double>>& v) {
      return gp::roi_align(v[0], std::span<const gp::LatentBox>(boxes), std::span<const std::size_t>(images), cfg);
    };
    tally.add("roi_align", gp::testing::gradient_check(op, {random_tensor(Shape{2, 2, 5, 6}, rng)}, rng));
  }

  const double secs = seconds_since(t0);
  const bool pass = tally.instances >= 100 && tally.worst < 1e-4 && secs < 120;
  return {pass, fmt("%zu instances (>= 100), max relative error %.2e (%s) < 1e-4, %.1f s < 120 s", tally.instances,
                    tally.worst, tally.worst_op.c_str(), secs)};
}

// ---- 2: mixture recovery -----------------------------------------------------

Verdict mixture_recovery() {
  const auto t0 = Clock::now();
  // Generating model: weights 0.3 / 0.7, distinct full covariances.
  const double w_true[2] = {0.3, 0.7};
  const double mu_true[2][2] = {{-2.0, -1.5}, {2.0, 1.0}};
  const double l_true[2][3] = {{0.8, 0.3, 0.5}, {0.6, -0.2, 0.9}};  // lower Cholesky factors: l00, l10, l11
  std::mt19937_64 rng(99);
  std::normal_distribution<double> nrm(0, 1);
  std::bernoulli_distribution pick(w_true[1]);
  const std::size_t n = 2000;
  Tensor<double> z(Shape{n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const int k = pick(rng) ? 1 : 0;
    const double e0 = nrm(rng), e1 = nrm(rng);
    z(i, 0) = mu_true[k][0] + l_true[k][0] * e0;
    z(i, 1) = mu_true[k][1] + l_true[k][1] * e0 + l_true[k][2] * e1;
  }
  // Exact NLL of the generating model, computed directly.
  double true_nll = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<long double> z_i{z(i, 0), z(i, 1)};
    long double mix = 0;
    for (int k = 0; k < 2; ++k) {
      const std::vector<long double> mu{mu_true[k][0], mu_true[k][1]};
      const long double s00 = l_true[k][0] * l_true[k][0], s01 = l_true[k][0] * l_true[k][1],
                        s11 = l_true[k][1] * l_true[k][1] + l_true[k][2] * l_true[k][2];
      mix += w_true[k] * std::exp(gp::testing::direct_log_density(z_i, mu, {s00, s01, s01, s11}));
    }
    true_nll -= double(std::log(mix));
  }
  true_nll /= double(n);

  auto p = gp::init_from_data(z, 2, {0, 1}, nullptr, 1);
  gp::OptimizerConfig cfg;
  cfg.learning_rate = 0.05;
  gp::fit_gmm(p, z, cfg, 300, 0, 1, true);
  double fit_nll;
  {
    gp::Graph<double> g;
    fit_nll = gp::gmm_nll(gp::bind(g, p), g.constant(z)).value().item();
  }
  const auto w = p.weights();
  // Match fitted components to the generating ones by the cheaper pairing.
  auto dist = [&](std::size_t a, int b) {
    return std::hypot(p.means.value[a * 2] - mu_true[b][0], p.means.value[a * 2 + 1] - mu_true[b][1]);
  };
  const bool swap = dist(0, 0) + dist(1, 1) > dist(0, 1) + dist(1, 0);
  double mean_err = 0, weight_err = 0;
  for (int k = 0; k < 2; ++k) {
    const std::size_t a = swap ? std::size_t(1 - k) : std::size_t(k);
    mean_err = std::max(mean_err, dist(a, k));
    weight_err = std::max(weight_err, std::abs(w[a] - w_true[k]));
  }
  const double rel = std::abs(fit_nll - true_nll) / std::abs(true_nll);
  const double secs = seconds_since(t0);
  const bool pass = mean_err < 0.1 && weight_err < 0.05 && rel < 0.01 && secs < 60;
  return {pass, fmt("mean error %.4f < 0.1, weight error %.4f < 0.05, NLL %.5f vs generating %.5f (%.3f%% < 1%%), "
                    "%.1f s < 60 s",
                    mean_err, weight_err, fit_nll, true_nll, 100 * rel, secs)};
}

// ---- 3: oracle equivalences --------------------------------------------------

Verdict oracle_equivalences() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double roi_err = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t h = 3 + rng() % 5, w = 3 + rng() % 5;
    const auto grid = random_tensor(Shape{2, h, w}, rng);
    const double y0 = u(rng) * double(h - 1), x0 = u(rng) * double(w - 1);
    const gp::LatentBox box{y0, x0, std::min(double(h), y0 + 0.3 + 3 * u(rng)), std::min(double(w), x0 + 0.3 + 3 * u(rng))};
    const gp::RoiAlignConfig cfg{1 + std::size_t(t % 4), 1 + std::size_t(t % 3)};
    roi_err = std::max(roi_err, gp::max_abs_diff(gp::roi_align(grid, box, cfg),
                                                 gp::testing::brute_force_roi_align(grid, box, cfg.output_size, cfg.samples)));
  }

  bool confusion_exact = true;
  for (int t = 0; t < 20; ++t) {
    const int classes = 2 + t % 3;
    std::vector<std::vector<int>> pred(3), truth(3);
    for (std::size_t i = 0; i < 3; ++i)
      for (int p = 0; p < 97; ++p) {
        pred[i].push_back(int(rng() % std::uint64_t(classes)));
        truth[i].push_back(int(rng() % std::uint64_t(classes)));
      }
    const auto oracle = gp::testing::count_confusion(pred, truth, classes);
    gp::ConfusionMatrix m(classes);
    for (std::size_t i = 0; i < 3; ++i) m.add(pred[i], truth[i]);
    for (int a = 0; a < classes; ++a)
      for (int b = 0; b < classes; ++b) confusion_exact &= m.at(a, b) == oracle[std::size_t(a)][std::size_t(b)];
    // evaluate() must agree with metrics computed from the counted matrix.
    gp::ConfusionMatrix counted(classes);
    for (int a = 0; a < classes; ++a)
      for (int b = 0; b < classes; ++b) counted.at(a, b) = oracle[std::size_t(a)][std::size_t(b)];
    const auto e = gp::evaluate(pred, truth, classes);
    const auto o = gp::metrics_from_confusion(counted);
    confusion_exact &= e.mean_iou == o.mean_iou && e.pixel_accuracy == o.pixel_accuracy &&
                       e.class_accuracy == o.class_accuracy && e.iou == o.iou;
  }

  double resp_err = 0;
  std::normal_distribution<double> nz(0, 2);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + std::size_t(t % 4), d = 1 + std::size_t(t % 5);
    std::vector<int> classes(n);
    for (std::size_t k = 0; k < n; ++k) classes[k] = int(k % 2);
    gp::GplParams<double> p(n, d, classes);
    for (auto& v : p.logits.value.data()) v = 2 * u(rng) - 1;
    for (auto& v : p.means.value.data()) v = 4 * u(rng) - 2;
    for (auto& v : p.chol_raw.value.data()) v = u(rng) - 0.5;
    std::vector<double> z(d);
    for (auto& v : z) v = nz(rng);
    const auto got = gp::log_responsibilities(p, Tensor<double>(Shape{d}, z));
    const auto want = gp::testing::direct_log_responsibilities(p, z);
    for (std::size_t k = 0; k < n; ++k) resp_err = std::max(resp_err, std::abs(got[k] - double(want[k])));
  }
  const bool pass = roi_err <= 1e-6 && confusion_exact && resp_err <= 1e-9;
  return {pass, fmt("roi_align vs brute force %.2e <= 1e-6; evaluate vs counting oracle %s; "
                    "log_responsibilities vs extended precision %.2e <= 1e-9",
                    roi_err, confusion_exact ? "exact" : "MISMATCH", resp_err)};
}

// ---- experiments shared by 4..7 ----------------------------------------------

gp::Schedule acceptance_schedule() {
  gp::Schedule s;
  s.epochs = {50, 100, 50, 40};
  s.learning_rates = {1e-3, 1e-3, 1e-3, 1e-3};
  return s;
}

gp::ModelSpec spec_for(gp::ModelKind kind) {
  gp::ModelSpec s;
  s.kind = kind;
  if (kind == gp::ModelKind::kProtoBB) s.region = gp::RegionConfig{};
  return s;
}

struct Trained {
  gp::Model<double> model;
  gp::TrainSummary summary;
  double seconds = 0;
};

Trained train_model(gp::ModelKind kind, const gp::Dataset& train) {
  const auto t0 = Clock::now();
  Trained t{gp::Model<double>(spec_for(kind), 0), {}, 0};
  t.summary = gp::train(t.model, train, acceptance_schedule(), 0);
  t.seconds = seconds_since(t0);
  progress(gp::to_string(kind) + " trained in " + fmt("%.1f s", t.seconds));
  return t;
}

std::vector<std::vector<int>> masks_of(const gp::Dataset& ds) {
  std::vector<std::vector<int>> out;
  for (const auto& s : ds.samples) out.push_back(s.mask);
  return out;
}

struct Scores {
  double pixel_accuracy = 0, fg_accuracy = 0, mean_iou = 0;
};

Scores score(const std::vector<std::vector<int>>& pred, const gp::Dataset& ds) {
  gp::ConfusionMatrix m(2);
  for (std::size_t i = 0; i < ds.size(); ++i) m.add(pred[i], ds.samples[i].mask);
  const auto metrics = gp::metrics_from_confusion(m);
  const double fg = double(m.at(1, 1)) / double(m.at(1, 0) + m.at(1, 1));
  return {metrics.pixel_accuracy, fg, metrics.mean_iou};
}

// ---- 4: structural invariants ------------------------------------------------

// Independent flood fill: every id 0..count-1 present, one 4-connected blob each.
bool flood_fill_partition(const gp::SuperpixelMap& sp) {
  const std::size_t h = sp.height, w = sp.width;
  std::vector<bool> seen(h * w, false), id_seen(sp.count, false);
  for (std::size_t s = 0; s < h * w; ++s) {
    if (seen[s]) continue;
    const int id = sp.labels[s];
    if (id < 0 || std::size_t(id) >= sp.count || id_seen[std::size_t(id)]) return false;
    id_seen[std::size_t(id)] = true;
    std::queue<std::size_t> q;
    q.push(s);
    seen[s] = true;
    while (!q.empty()) {
      const std::size_t p = q.front();
      q.pop();
      const std::size_t r = p / w, c = p % w;
      const std::size_t nb[4] = {r > 0 ? p - w : p, r + 1 < h ? p + w : p, c > 0 ? p - 1 : p, c + 1 < w ? p + 1 : p};
      for (auto x : nb) {
        if (!seen[x] && sp.labels[x] == id) {
          seen[x] = true;
          q.push(x);
        }
      }
    }
  }
  for (bool b : id_seen)
    if (!b) return false;
  return true;
}

bool stage_isolation(gp::ModelKind kind, const gp::Dataset& train) {
  gp::Dataset small;
  small.samples.assign(train.samples.begin(), train.samples.begin() + 24);
  gp::Model<double> m(spec_for(kind), 3);
  gp::Schedule s = acceptance_schedule();
  s.epochs = {2, 2, 2, 2};
  s.calibration_images = 16;
  gp::Trainer<double> t(m, small, s, 3);
  for (int stage = 1; stage <= 4; ++stage) {
    std::vector<std::vector<double>> before;
    for (auto* p : m.parameters()) before.emplace_back(p->value.data().begin(), p->value.data().end());
    std::set<const void*> group;
    for (auto* p : m.stage_parameters(stage)) group.insert(p);
    t.run_stage(stage);
    const auto params = m.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (group.count(params[i])) continue;
      if (!std::equal(before[i].begin(), before[i].end(), params[i]->value.data().begin())) return false;
    }
  }
  return true;
}

bool checkpoint_round_trip(gp::Model<double>& m, const gp::Dataset& val) {
  const auto bytes = gp::serialize_checkpoint(m);
  auto ck = gp::parse_checkpoint<double>(bytes);
  const auto a = m.parameters(), b = ck.model.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::equal(a[i]->value.data().begin(), a[i]->value.data().end(), b[i]->value.data().begin())) return false;
  }
  return gp::segment_all(m, val) == gp::segment_all(ck.model, val) && gp::serialize_checkpoint(ck.model) == bytes;
}

Verdict structural_invariants(std::vector<Trained*> models, const gp::Dataset& train, const gp::Dataset& val) {
  // Responsibilities of trained models on validation latents.
  double lse_err = 0;
  double min_head = std::numeric_limits<double>::infinity();
  for (auto* t : models) {
    auto& m = t->model;
    for (std::size_t i = 0; i < 10; ++i) {
      const auto& img = val.samples[i].image;
      const auto z = m.spec.kind == gp::ModelKind::kProtoSeg ? gp::grid_vectors(m, img)
                                                              : gp::proposal_vectors(m, img, gp::image_proposals(m, img));
      const auto lse = gp::log_sum_exp(gp::log_responsibilities(m.gpl, z), 1);
      for (double v : lse.data()) lse_err = std::max(lse_err, std::abs(v));
    }
    const auto a = m.head.effective();
    for (double v : a.data()) min_head = std::min(min_head, v);
  }
  bool partition = true;
  for (std::size_t i = 0; i < 20; ++i) {
    partition &= flood_fill_partition(gp::slic(gp::image_to_tensor<double>(val.samples[i].image), gp::SlicConfig{}));
  }
  const bool iso_seg = stage_isolation(gp::ModelKind::kProtoSeg, train);
  const bool iso_bb = stage_isolation(gp::ModelKind::kProtoBB, train);
  bool ck = true;
  for (auto* t : models) ck &= checkpoint_round_trip(t->model, val);
  const bool pass = lse_err <= 1e-9 && min_head >= 0 && partition && iso_seg && iso_bb && ck;
  return {pass, fmt("responsibility log-sum-exp |err| %.1e <= 1e-9; min effective head weight %.3g >= 0; "
                    "SLIC 4-connected partition %s; stage isolation %s/%s; checkpoint round-trip %s",
                    lse_err, min_head, partition ? "yes" : "NO", iso_seg ? "exact" : "BROKEN",
                    iso_bb ? "exact" : "BROKEN", ck ? "bit-exact" : "MISMATCH")};
}

// ---- 7: explanation sanity ---------------------------------------------------

struct ExplainCount {
  int fg_ok = 0, fg_total = 0, bg_ok = 0, bg_total = 0;
};

ExplainCount explanation_counts(gp::Model<double>& m, const gp::Dataset& train) {
  ExplainCount c;
  for (const auto& r : gp::locate_prototypes(m, train)) {
    const auto& s = train.samples[r.image];
    const double f = gp::foreground_fraction(r, s.mask, s.image.width);
    if (r.label > 0) {
      ++c.fg_total;
      c.fg_ok += f > 0.5;
    } else {
      ++c.bg_total;
      c.bg_ok += f < 0.5;
    }
  }
  return c;
}

}  // namespace

int main() {
  const auto t_all = Clock::now();
  std::vector<std::pair<std::string, Verdict>> rows(8);

  progress("1: gradient suite");
  rows[0] = {"gradient suite", gradient_suite()};
  progress("2: mixture recovery");
  rows[1] = {"mixture recovery", mixture_recovery()};
  progress("3: oracle equivalences");
  rows[2] = {"oracle equivalences", oracle_equivalences()};

  gp::SyntheticOptions easy;
  easy.count = 250;
  easy.difficulty = 0;
  const auto d0 = gp::generate_synthetic(easy);
  gp::SyntheticOptions hard = easy;
  hard.difficulty = 2;
  const auto d2 = gp::generate_synthetic(hard);
  progress(fmt("datasets: %zu train / %zu val per difficulty", d0.train.size(), d0.val.size()));

  progress("5: training protoseg and protobb on difficulty 0");
  auto seg = train_model(gp::ModelKind::kProtoSeg, d0.train);
  auto bb = train_model(gp::ModelKind::kProtoBB, d0.train);
  const auto seg_scores = score(gp::segment_all(seg.model, d0.val), d0.val);
  const auto bb_scores = score(gp::segment_all(bb.model, d0.val), d0.val);
  const double train_secs = seg.seconds + bb.seconds;
  rows[4] = {"synthetic end-to-end",
             {seg_scores.pixel_accuracy >= 0.95 && seg_scores.fg_accuracy >= 0.85 && bb_scores.pixel_accuracy >= 0.90 &&
                  train_secs < 900,
              fmt("protoseg pixel acc %.4f >= 0.95, fg class acc %.4f >= 0.85; protobb pixel acc %.4f >= 0.90 "
                  "(fg class acc %.4f); training %.0f s < 900 s",
                  seg_scores.pixel_accuracy, seg_scores.fg_accuracy, bb_scores.pixel_accuracy, bb_scores.fg_accuracy,
                  train_secs)}};

  progress("6: protoseg vs HSV-GMM baseline on difficulty 2");
  auto seg2 = train_model(gp::ModelKind::kProtoSeg, d2.train);
  const auto seg2_scores = score(gp::segment_all(seg2.model, d2.val), d2.val);
  const auto baseline = gp::fit_hsv_baseline(d2.train, 2, {});
  std::vector<std::vector<int>> base_pred(d2.val.size());
  gp::parallel_for(d2.val.size(), [&](std::size_t i) { base_pred[i] = baseline.predict(d2.val.samples[i].image); });
  const auto base_scores = score(base_pred, d2.val);
  rows[5] = {"baseline ordering",
             {base_scores.mean_iou < seg2_scores.mean_iou,
              fmt("difficulty 2 mean IoU: HSV-GMM baseline %.4f < protoseg %.4f (pixel acc %.4f vs %.4f)",
                  base_scores.mean_iou, seg2_scores.mean_iou, base_scores.pixel_accuracy, seg2_scores.pixel_accuracy)}};

  progress("4: structural invariants");
  rows[3] = {"structural invariants", structural_invariants({&seg, &bb, &seg2}, d0.train, d0.val)};

  progress("7: explanation sanity");
  const auto ex_seg = explanation_counts(seg.model, d0.train);
  const auto ex_bb = explanation_counts(bb.model, d0.train);
  auto ok = [](const ExplainCount& c) { return c.fg_ok >= 4 && c.bg_ok >= 4; };
  rows[6] = {"explanation sanity",
             {ok(ex_seg) && ok(ex_bb),
              fmt("protoseg: %d/%d foreground prototypes on >50%% foreground, %d/%d background prototypes on <50%%; "
                  "protobb: %d/%d and %d/%d (need >= 4 of 5 each)",
                  ex_seg.fg_ok, ex_seg.fg_total, ex_seg.bg_ok, ex_seg.bg_total, ex_bb.fg_ok, ex_bb.fg_total, ex_bb.bg_ok,
                  ex_bb.bg_total)}};

  bool all = true;
  std::printf("\nacceptance results (%.0f s)\n", seconds_since(t_all));
  for (std::size_t i = 0; i < 7; ++i) {
    all &= rows[i].second.pass;
    std::printf("%s  %zu. %-22s %s\n", rows[i].second.pass ? "PASS" : "FAIL", i + 1, rows[i].first.c_str(),
                rows[i].second.detail.c_str());
  }
  std::printf("SKIP  8. %-22s absolute real-dataset numbers need the real datasets and ImageNet-pretrained "
              "ResNet backbones; criteria 5-7 stand in for them\n",
              "real-dataset numbers");
  std::fflush(stdout);
  return all ? 0 : 1;
}
