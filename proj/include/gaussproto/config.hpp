#pragma once

// Run configuration as JSON. Every key is optional and defaults to the value
// of the corresponding struct member; unknown keys are rejected so typos
// surface instead of silently falling back to defaults.

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gaussproto/errors.hpp"
#include "gaussproto/evalkit.hpp"
#include "gaussproto/image.hpp"
#include "gaussproto/pipeline.hpp"

namespace gaussproto {

using json = nlohmann::json;

struct DataConfig {
  std::string root = "data";
  std::string train_split = "train";
  std::string eval_split = "val";
};

struct RunConfig {
  ModelKind model = ModelKind::kProtoSeg;
  std::uint64_t seed = 0;
  DataConfig data;
  std::string output = "runs/default";
  int classes = 2;
  EncoderConfig encoder;
  std::size_t prototypes_per_class = 5;
  LossWeights loss;
  RegionConfig region;
  Schedule schedule;
  HsvBaselineConfig baseline;

  ModelSpec model_spec() const {
    ModelSpec s;
    s.kind = model;
    s.encoder = encoder;
    s.prototypes_per_class = prototypes_per_class;
    s.num_classes = classes;
    s.loss = loss;
    if (model == ModelKind::kProtoBB) s.region = region;
    return s;
  }
};

namespace detail {

// Reads members of one JSON object, remembering which keys were consumed.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <class V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).template get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(where() + "." + key + ": " + e.what());
    }
  }

  template <class F>
  void object(const char* key, F&& f) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    ObjectReader sub(j_.at(key), path_ + "." + key);
    f(sub);
    sub.finish();
  }

  const json* raw(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown key " + where() + "." + k);
    }
  }

  std::string where() const { return path_; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_encoder(ObjectReader& r, EncoderConfig& e) {
  r.get("input_size", e.input_size);
  r.get("num_blocks", e.num_blocks);
  r.get("channels", e.channels);
  r.get("latent_dim", e.latent_dim);
  r.get("secondary_channels", e.secondary_channels);
}

inline void read_loss(ObjectReader& r, LossWeights& l) {
  r.get("gmm", l.gmm);
  r.get("clf", l.clf);
  r.get("l1", l.l1);
}

inline void read_region(ObjectReader& r, RegionConfig& c) {
  r.get("segments", c.slic.segments);
  r.get("compactness", c.slic.compactness);
  r.get("max_iter", c.slic.max_iter);
  r.get("roi_size", c.roi.output_size);
  r.get("roi_samples", c.roi.samples);
  r.get("train_proposals", c.train_proposals);
}

inline json encoder_json(const EncoderConfig& e) {
  return {{"input_size", e.input_size},
          {"num_blocks", e.num_blocks},
          {"channels", e.channels},
          {"latent_dim", e.latent_dim},
          {"secondary_channels", e.secondary_channels}};
}

inline json loss_json(const LossWeights& l) { return {{"gmm", l.gmm}, {"clf", l.clf}, {"l1", l.l1}}; }

inline json region_json(const RegionConfig& c) {
  return {{"segments", c.slic.segments},       {"compactness", c.slic.compactness},
          {"max_iter", c.slic.max_iter},       {"roi_size", c.roi.output_size},
          {"roi_samples", c.roi.samples},      {"train_proposals", c.train_proposals}};
}

}  // namespace detail

inline RunConfig parse_run_config(const json& j) {
  RunConfig c;
  detail::ObjectReader r(j, "config");
  std::string model = to_string(c.model);
  r.get("model", model);
  c.model = parse_model_kind(model);
  r.get("seed", c.seed);
  r.object("data", [&](detail::ObjectReader& d) {
    d.get("root", c.data.root);
    d.get("train_split", c.data.train_split);
    d.get("eval_split", c.data.eval_split);
  });
  r.get("output", c.output);
  r.get("classes", c.classes);
  r.object("encoder", [&](detail::ObjectReader& e) { detail::read_encoder(e, c.encoder); });
  r.object("gpl", [&](detail::ObjectReader& g) { g.get("prototypes_per_class", c.prototypes_per_class); });
  r.object("loss", [&](detail::ObjectReader& l) { detail::read_loss(l, c.loss); });
  r.object("region", [&](detail::ObjectReader& g) { detail::read_region(g, c.region); });
  r.object("schedule", [&](detail::ObjectReader& s) {
    s.get("epochs", c.schedule.epochs);
    s.get("learning_rates", c.schedule.learning_rates);
    s.get("batch_size", c.schedule.batch_size);
    s.get("vector_batch_size", c.schedule.vector_batch_size);
    s.get("patience", c.schedule.patience);
    s.get("min_delta", c.schedule.min_delta);
    s.get("smoothing", c.schedule.smoothing);
    s.get("calibration_images", c.schedule.calibration_images);
  });
  r.object("baseline", [&](detail::ObjectReader& b) {
    b.get("segments", c.baseline.slic.segments);
    b.get("compactness", c.baseline.slic.compactness);
    b.get("max_iter", c.baseline.slic.max_iter);
    b.get("components_per_class", c.baseline.components_per_class);
    b.get("epochs", c.baseline.epochs);
    b.get("learning_rate", c.baseline.learning_rate);
  });
  r.finish();
  c.baseline.seed = c.seed;
  c.model_spec().validate();
  for (double lr : c.schedule.learning_rates) {
    if (!(lr > 0)) throw ConfigError("learning rates must be positive");
  }
  if (c.schedule.batch_size == 0 || c.schedule.vector_batch_size == 0) throw ConfigError("batch sizes must be positive");
  return c;
}

// The effective configuration with every default materialized.
inline json to_json(const RunConfig& c) {
  const auto& s = c.schedule;
  const auto& b = c.baseline;
  return {{"model", to_string(c.model)},
          {"seed", c.seed},
          {"data", {{"root", c.data.root}, {"train_split", c.data.train_split}, {"eval_split", c.data.eval_split}}},
          {"output", c.output},
          {"classes", c.classes},
          {"encoder", detail::encoder_json(c.encoder)},
          {"gpl", {{"prototypes_per_class", c.prototypes_per_class}}},
          {"loss", detail::loss_json(c.loss)},
          {"region", detail::region_json(c.region)},
          {"schedule",
           {{"epochs", s.epochs},
            {"learning_rates", s.learning_rates},
            {"batch_size", s.batch_size},
            {"vector_batch_size", s.vector_batch_size},
            {"patience", s.patience},
            {"min_delta", s.min_delta},
            {"smoothing", s.smoothing},
            {"calibration_images", s.calibration_images}}},
          {"baseline",
           {{"segments", b.slic.segments},
            {"compactness", b.slic.compactness},
            {"max_iter", b.slic.max_iter},
            {"components_per_class", b.components_per_class},
            {"epochs", b.epochs},
            {"learning_rate", b.learning_rate}}}};
}

inline RunConfig load_run_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

inline json spec_to_json(const ModelSpec& s) {
  json j{{"model", to_string(s.kind)},
         {"classes", s.num_classes},
         {"encoder", detail::encoder_json(s.encoder)},
         {"gpl", {{"prototypes_per_class", s.prototypes_per_class}}},
         {"loss", detail::loss_json(s.loss)}};
  if (s.region) j["region"] = detail::region_json(*s.region);
  return j;
}

inline ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  detail::ObjectReader r(j, "spec");
  std::string model;
  r.get("model", model);
  s.kind = parse_model_kind(model);
  r.get("classes", s.num_classes);
  r.object("encoder", [&](detail::ObjectReader& e) { detail::read_encoder(e, s.encoder); });
  r.object("gpl", [&](detail::ObjectReader& g) { g.get("prototypes_per_class", s.prototypes_per_class); });
  r.object("loss", [&](detail::ObjectReader& l) { detail::read_loss(l, s.loss); });
  if (r.raw("region")) {
    s.region.emplace();
    r.object("region", [&](detail::ObjectReader& g) { detail::read_region(g, *s.region); });
  }
  r.finish();
  s.validate();
  return s;
}

}  // namespace gaussproto
