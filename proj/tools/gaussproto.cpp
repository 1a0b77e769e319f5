// gaussproto: generate data, train, evaluate, segment and explain.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "gaussproto/gaussproto.hpp"

namespace gp = gaussproto;
namespace fs = std::filesystem;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string model;
  std::string out;
  std::string data;
};

gp::RunConfig effective_config(const Overrides& o) {
  gp::RunConfig c = o.config.empty() ? gp::parse_run_config(gp::json::object()) : gp::load_run_config(o.config);
  if (o.seed) c.seed = c.baseline.seed = *o.seed;
  if (!o.model.empty()) c.model = gp::parse_model_kind(o.model);
  if (!o.out.empty()) c.output = o.out;
  if (!o.data.empty()) c.data.root = o.data;
  c.model_spec().validate();
  return c;
}

// Images larger than the model input are cut into tiles.
gp::Dataset load_for_model(const fs::path& root, const std::string& split, std::size_t input_size) {
  auto ds = gp::load_split(root, split);
  for (const auto& s : ds.samples) {
    if (s.image.width != input_size || s.image.height != input_size) return gp::tile_dataset(ds, input_size);
  }
  return ds;
}

void write_json(const std::string& out, const gp::json& j) {
  const std::string text = j.dump(2) + "\n";
  if (out.empty()) {
    std::cout << text;
  } else {
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    gp::write_text_file(out, text);
  }
}

int cmd_generate(const gp::SyntheticOptions& opt, const std::string& out) {
  if (out.empty()) throw gp::ConfigError("generate-data needs --out");
  if (opt.count < 2) throw gp::ConfigError("--count must be at least 2");
  if (opt.difficulty < 0 || opt.difficulty > 2) throw gp::ConfigError("--difficulty must be 0, 1 or 2");
  const auto ds = gp::generate_synthetic(opt);
  gp::write_dataset(out, ds);
  std::cerr << "wrote " << ds.train.size() << " train and " << ds.val.size() << " val images to " << out << "\n";
  return 0;
}

int cmd_train(const Overrides& o) {
  const auto cfg = effective_config(o);
  const auto spec = cfg.model_spec();
  const auto train = load_for_model(cfg.data.root, cfg.data.train_split, spec.encoder.input_size);
  gp::Model<double> model(spec, cfg.seed);

  std::string csv = gp::loss_csv_header();
  const auto t0 = std::chrono::steady_clock::now();
  const auto summary = gp::train(model, train, cfg.schedule, cfg.seed, [&](const gp::LossRecord& r) {
    csv += gp::loss_csv_row(r);
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "stage %d epoch %3zu  objective %.6f  (%.1fs)\n", r.stage, r.epoch, r.objective, s);
  });

  const fs::path out = cfg.output;
  fs::create_directories(out);
  gp::write_text_file(out / "config.json", gp::to_json(cfg).dump(2) + "\n");
  gp::write_text_file(out / "loss.csv", csv);
  gp::save_checkpoint(model, out / "model.gplc", gp::detail::summary_json(summary));
  std::cerr << "checkpoint: " << (out / "model.gplc").string() << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, bool baseline, const Overrides& o, const std::string& split_arg) {
  if (checkpoint.empty() && !baseline) throw gp::ConfigError("eval needs a checkpoint or --baseline");
  const auto cfg = effective_config(o);
  const std::string split = split_arg.empty() ? cfg.data.eval_split : split_arg;
  gp::json result = gp::json::object();

  if (!checkpoint.empty()) {
    auto ck = gp::load_checkpoint<double>(checkpoint);
    const auto ds = gp::load_split(cfg.data.root, split);
    std::vector<std::vector<int>> pred(ds.size()), truth;
    std::vector<std::string> names;
    for (std::size_t i = 0; i < ds.size(); ++i) pred[i] = gp::segment_tiled(ck.model, ds.samples[i].image);
    for (const auto& s : ds.samples) {
      truth.push_back(s.mask);
      names.push_back(s.name);
    }
    result["model"] = gp::metric_table_json(gp::evaluate(pred, truth, ck.model.spec.num_classes, names));
  }
  if (baseline) {
    const auto train = gp::load_split(cfg.data.root, cfg.data.train_split);
    const auto ds = gp::load_split(cfg.data.root, split);
    const auto hsv = gp::fit_hsv_baseline(train, cfg.classes, cfg.baseline);
    std::vector<std::vector<int>> pred(ds.size()), truth;
    std::vector<std::string> names;
    gp::parallel_for(ds.size(), [&](std::size_t i) { pred[i] = hsv.predict(ds.samples[i].image); });
    for (const auto& s : ds.samples) {
      truth.push_back(s.mask);
      names.push_back(s.name);
    }
    result["baseline"] = gp::metric_table_json(gp::evaluate(pred, truth, cfg.classes, names));
  }
  write_json(o.out, result.size() == 1 ? result.begin().value() : result);
  return 0;
}

int cmd_segment(const std::string& checkpoint, const std::vector<std::string>& images, const std::string& out) {
  if (out.empty()) throw gp::ConfigError("segment needs --out");
  auto ck = gp::load_checkpoint<double>(checkpoint);
  fs::create_directories(out);
  for (const auto& path : images) {
    const auto img = gp::read_png(path);
    if (img.channels != 3) throw gp::IoError("image is not RGB: " + path);
    const auto classes = gp::segment_tiled(ck.model, img);
    const std::string stem = fs::path(path).stem().string();
    gp::write_png(fs::path(out) / (stem + "_overlay.png"), gp::overlay(img, classes));
    gp::write_png(fs::path(out) / (stem + "_mask.png"),
                  gp::class_map(classes, img.width, img.height, ck.model.spec.num_classes));
  }
  return 0;
}

int cmd_explain(const std::string& checkpoint, const Overrides& o, const std::string& split) {
  if (o.out.empty()) throw gp::ConfigError("explain needs --out");
  auto ck = gp::load_checkpoint<double>(checkpoint);
  const auto cfg = effective_config({o.config, std::nullopt, "", "", o.data});
  const auto ds = load_for_model(cfg.data.root, split.empty() ? cfg.data.train_split : split,
                                 ck.model.spec.encoder.input_size);
  const auto reports = gp::locate_prototypes(ck.model, ds);
  gp::render_gallery(reports, ds, o.out);
  std::cerr << "wrote " << reports.size() << " prototypes to " << o.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gaussian prototype segmentation"};
  app.require_subcommand(1);
  Overrides o;
  std::uint64_t seed = 0;

  auto* gen = app.add_subcommand("generate-data", "Write a synthetic dataset");
  gp::SyntheticOptions syn;
  gen->add_option("--out", o.out, "Dataset root to create")->required();
  gen->add_option("--count", syn.count, "Number of images")->capture_default_str();
  gen->add_option("--size", syn.size, "Image edge in pixels")->capture_default_str();
  gen->add_option("--seed", syn.seed, "Random seed")->capture_default_str();
  gen->add_option("--difficulty", syn.difficulty, "0 separable, 1 stripes, 2 decoys")->capture_default_str();
  gen->add_option("--val-fraction", syn.val_fraction, "Share of images in val.txt")->capture_default_str();

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run configuration");
    sub->add_option("--seed", seed, "Override the configured seed");
    sub->add_option("--data", o.data, "Override the dataset root");
  };

  auto* tr = app.add_subcommand("train", "Train a model; writes model.gplc, loss.csv and config.json");
  add_common(tr);
  tr->add_option("--model", o.model, "protoseg or protobb")->check(CLI::IsMember({"protoseg", "protobb"}));
  tr->add_option("--out", o.out, "Output directory");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint and/or the HSV-GMM baseline");
  std::string checkpoint, split;
  bool baseline = false;
  add_common(ev);
  ev->add_option("checkpoint", checkpoint, "Checkpoint file");
  ev->add_flag("--baseline", baseline, "Also fit and evaluate the HSV-GMM superpixel baseline");
  ev->add_option("--split", split, "Split to evaluate (default: data.eval_split)");
  ev->add_option("--out", o.out, "Metrics JSON (default: stdout)");

  auto* sg = app.add_subcommand("segment", "Write overlay and class-map PNGs");
  std::vector<std::string> images;
  sg->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  sg->add_option("images", images, "Input PNGs")->required();
  sg->add_option("--out", o.out, "Output directory")->required();

  auto* ex = app.add_subcommand("explain", "Render the prototype gallery");
  add_common(ex);
  ex->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  ex->add_option("--split", split, "Split to scan (default: data.train_split)");
  ex->add_option("--out", o.out, "Gallery directory")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    for (auto* sub : {tr, ev, ex}) {
      if (sub->parsed() && sub->count("--seed")) o.seed = seed;
    }
    if (gen->parsed()) return cmd_generate(syn, o.out);
    if (tr->parsed()) return cmd_train(o);
    if (ev->parsed()) return cmd_eval(checkpoint, baseline, o, split);
    if (sg->parsed()) return cmd_segment(checkpoint, images, o.out);
    if (ex->parsed()) return cmd_explain(checkpoint, o, split);
  } catch (const gp::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
