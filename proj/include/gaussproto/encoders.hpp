#pragma once

// Convolutional feature extractors.
//
// PrimaryEncoder is f = h o g: g is a stack of residual blocks (stride-2 entry
// conv, batch norm, leaky ReLU), h is a 1x1 conv reducing to the latent width.
// The 1x1 decoder H reconstructs g's features from h's output for autoencoder
// pretraining. SecondaryEncoder embeds a RoIAlign crop of the latent grid into
// a single latent vector; its decoder mirrors it with transposed convolutions.
//
// Feature maps are NCHW throughout.

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gaussproto/autodiff.hpp"
#include "gaussproto/errors.hpp"
#include "gaussproto/nn_ops.hpp"
#include "gaussproto/ops.hpp"

namespace gaussproto {

inline constexpr double kLeakySlope = 0.01;

using ops::BatchNormStats;
using ops::NormMode;

struct EncoderConfig {
  std::size_t input_size = 64;
  std::size_t in_channels = 3;
  std::size_t num_blocks = 2;
  std::vector<std::size_t> channels{16, 32, 64, 128};
  std::size_t latent_dim = 16;
  std::vector<std::size_t> secondary_channels{16, 32, 32};

  std::size_t scale() const { return std::size_t{1} << num_blocks; }
  std::size_t grid_size() const { return input_size / scale(); }
  std::size_t feature_channels() const { return channels.at(num_blocks - 1); }

  void validate() const {
    if (num_blocks < 1 || num_blocks > 4) throw InvalidArgument("num_blocks must be in 1..4");
    if (channels.size() < num_blocks) throw InvalidArgument("need one channel width per block");
    if (latent_dim == 0 || in_channels == 0) throw InvalidArgument("latent_dim and in_channels must be positive");
    if (secondary_channels.size() != 3) throw InvalidArgument("secondary encoder needs three hidden widths");
    if (input_size == 0 || input_size % scale() != 0) {
      throw SizeNotDivisible("input size " + std::to_string(input_size) + " is not divisible by " +
                             std::to_string(scale()));
    }
  }
};

// How a forward pass treats batch norm and parameters.
struct ForwardMode {
  NormMode norm = NormMode::kInference;
  bool update_stats = false;
  bool trainable = false;

  static ForwardMode inference() { return {}; }
  static ForwardMode training(bool update = true) { return {NormMode::kTrain, update, true}; }
};

template <class T>
Var<T> bind_param(Graph<T>& g, Parameter<T>& p, bool trainable) {
  return trainable ? g.parameter(p) : g.constant(p.value);
}

template <class T>
struct Conv2d {
  Parameter<T> weight;  // [Co, Ci, k, k]
  Parameter<T> bias;    // [Co]
  std::size_t stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(const std::string& name, std::size_t ci, std::size_t co, std::size_t k, std::size_t s, std::size_t p,
         std::mt19937_64& rng)
      : weight(name + ".weight", Tensor<T>(Shape{co, ci, k, k})), bias(name + ".bias", Tensor<T>(Shape{co})),
        stride(s), pad(p) {
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / double(ci * k * k)));
    for (auto& v : weight.value.data()) v = static_cast<T>(nd(rng));
  }

  Var<T> operator()(Graph<T>& g, Var<T> x, const ForwardMode& m) {
    Var<T> b = bind_param(g, bias, m.trainable);
    return ops::conv2d(x, bind_param(g, weight, m.trainable), &b, stride, pad);
  }

  void collect(std::vector<Parameter<T>*>& out) { out.insert(out.end(), {&weight, &bias}); }
};

template <class T>
struct ConvTranspose2d {
  Parameter<T> weight;  // [Ci, Co, k, k]
  Parameter<T> bias;
  std::size_t stride = 1, pad = 0;

  ConvTranspose2d() = default;
  ConvTranspose2d(const std::string& name, std::size_t ci, std::size_t co, std::size_t k, std::size_t s,
                  std::mt19937_64& rng)
      : weight(name + ".weight", Tensor<T>(Shape{ci, co, k, k})), bias(name + ".bias", Tensor<T>(Shape{co})),
        stride(s) {
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / double(ci)));
    for (auto& v : weight.value.data()) v = static_cast<T>(nd(rng));
  }

  Var<T> operator()(Graph<T>& g, Var<T> x, const ForwardMode& m) {
    Var<T> b = bind_param(g, bias, m.trainable);
    return ops::conv_transpose2d(x, bind_param(g, weight, m.trainable), &b, stride, pad);
  }

  void collect(std::vector<Parameter<T>*>& out) { out.insert(out.end(), {&weight, &bias}); }
};

template <class T>
struct BatchNorm2d {
  std::string name;
  Parameter<T> gamma, beta;
  BatchNormStats<T> stats;

  BatchNorm2d() = default;
  BatchNorm2d(const std::string& n, std::size_t c)
      : name(n), gamma(n + ".gamma", Tensor<T>(Shape{c}, T(1))), beta(n + ".beta", Tensor<T>(Shape{c})),
        stats(c) {}

  Var<T> operator()(Graph<T>& g, Var<T> x, const ForwardMode& m) {
    return ops::batch_norm(x, bind_param(g, gamma, m.trainable), bind_param(g, beta, m.trainable), stats, m.norm,
                           m.update_stats);
  }

  void collect(std::vector<Parameter<T>*>& out) { out.insert(out.end(), {&gamma, &beta}); }
  void collect_stats(std::vector<std::pair<std::string, BatchNormStats<T>*>>& out) { out.emplace_back(name, &stats); }
};

// leaky(bn2(conv2(leaky(bn1(conv1(x))))) + proj(x)); conv1 and proj stride 2.
template <class T>
struct ResidualBlock {
  Conv2d<T> conv1, conv2, proj;
  BatchNorm2d<T> bn1, bn2;

  ResidualBlock() = default;
  ResidualBlock(const std::string& name, std::size_t ci, std::size_t co, std::mt19937_64& rng)
      : conv1(name + ".conv1", ci, co, 3, 2, 1, rng),
        conv2(name + ".conv2", co, co, 3, 1, 1, rng),
        proj(name + ".proj", ci, co, 1, 2, 0, rng),
        bn1(name + ".bn1", co),
        bn2(name + ".bn2", co) {}

  Var<T> operator()(Graph<T>& g, Var<T> x, const ForwardMode& m) {
    const T slope = static_cast<T>(kLeakySlope);
    Var<T> y = ops::leaky_relu(bn1(g, conv1(g, x, m), m), slope);
    y = bn2(g, conv2(g, y, m), m);
    return ops::leaky_relu(ops::add(y, proj(g, x, m)), slope);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    conv1.collect(out);
    bn1.collect(out);
    conv2.collect(out);
    bn2.collect(out);
    proj.collect(out);
  }
  void collect_stats(std::vector<std::pair<std::string, BatchNormStats<T>*>>& out) {
    bn1.collect_stats(out);
    bn2.collect_stats(out);
  }
};

template <class T>
struct AutoencoderOutput {
  Var<T> reduced;
  Var<T> reconstruction;
  Var<T> mse;
};

template <class T>
class PrimaryEncoder {
 public:
  PrimaryEncoder() = default;
  PrimaryEncoder(const EncoderConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg_.validate();
    std::size_t ci = cfg_.in_channels;
    for (std::size_t b = 0; b < cfg_.num_blocks; ++b) {
      blocks_.emplace_back("g.block" + std::to_string(b), ci, cfg_.channels[b], rng);
      ci = cfg_.channels[b];
    }
    reducer_ = Conv2d<T>("h", ci, cfg_.latent_dim, 1, 1, 0, rng);
    decoder_ = Conv2d<T>("H", cfg_.latent_dim, ci, 1, 1, 0, rng);
  }

  const EncoderConfig& config() const { return cfg_; }

  // g: image batch [B, 3, n, n] -> features [B, C, n', n'].
  Var<T> features(Graph<T>& g, Var<T> x, const ForwardMode& m) {
    const auto& s = x.value().shape();
    if (s.size() != 4 || s[1] != cfg_.in_channels) throw ShapeMismatch("encoder expects [B, 3, n, n] input");
    if (s[2] % cfg_.scale() != 0 || s[3] % cfg_.scale() != 0) {
      throw SizeNotDivisible("image extent " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                             " is not divisible by " + std::to_string(cfg_.scale()));
    }
    for (auto& b : blocks_) x = b(g, x, m);
    return x;
  }

  // h: features -> latent map [B, latent_dim, n', n'].
  Var<T> reduce(Graph<T>& g, Var<T> feat, const ForwardMode& m) {
    check_feature_channels(feat);
    return reducer_(g, feat, m);
  }

  Var<T> encode(Graph<T>& g, Var<T> x, const ForwardMode& m) { return reduce(g, features(g, x, m), m); }

  AutoencoderOutput<T> reduce_and_reconstruct(Graph<T>& g, Var<T> feat, const ForwardMode& m) {
    Var<T> z = reduce(g, feat, m);
    Var<T> r = decoder_(g, z, m);
    return {z, r, ops::mse(r, feat)};
  }

  std::vector<Parameter<T>*> backbone_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& b : blocks_) b.collect(out);
    return out;
  }
  std::vector<Parameter<T>*> reducer_parameters() {
    std::vector<Parameter<T>*> out;
    reducer_.collect(out);
    return out;
  }
  std::vector<Parameter<T>*> decoder_parameters() {
    std::vector<Parameter<T>*> out;
    decoder_.collect(out);
    return out;
  }
  std::vector<Parameter<T>*> parameters() {
    auto out = backbone_parameters();
    reducer_.collect(out);
    decoder_.collect(out);
    return out;
  }
  std::vector<std::pair<std::string, BatchNormStats<T>*>> norm_stats() {
    std::vector<std::pair<std::string, BatchNormStats<T>*>> out;
    for (auto& b : blocks_) b.collect_stats(out);
    return out;
  }

  std::vector<ResidualBlock<T>>& blocks() { return blocks_; }
  Conv2d<T>& reducer() { return reducer_; }
  Conv2d<T>& decoder() { return decoder_; }

 private:
  void check_feature_channels(Var<T> feat) const {
    const auto& s = feat.value().shape();
    if (s.size() != 4 || s[1] != reducer_.weight.value.dim(1)) {
      throw ShapeMismatch("reducer expects " + std::to_string(reducer_.weight.value.dim(1)) +
                          " feature channels, got " + shape_string(s));
    }
  }

  EncoderConfig cfg_;
  std::vector<ResidualBlock<T>> blocks_;
  Conv2d<T> reducer_, decoder_;
};

// Four 3x3 convs (strides 1, 2, 2, 1) with batch norm and leaky ReLU on the
// first three, then global average pooling to one latent vector per patch.
// The decoder maps that vector back to an s x s patch through log2(s)
// stride-2 transposed convs.
template <class T>
class SecondaryEncoder {
 public:
  SecondaryEncoder() = default;
  SecondaryEncoder(std::size_t latent_dim, const std::vector<std::size_t>& widths, std::size_t patch,
                   std::mt19937_64& rng)
      : latent_dim_(latent_dim), patch_(patch) {
    if (widths.size() != 3) throw InvalidArgument("secondary encoder needs three hidden widths");
    if (patch < 2 || (patch & (patch - 1)) != 0) throw InvalidArgument("patch size must be a power of two >= 2");
    const std::size_t c1 = widths[0], c2 = widths[1], c3 = widths[2];
    convs_.emplace_back("phi.conv0", latent_dim, c1, 3, 1, 1, rng);
    convs_.emplace_back("phi.conv1", c1, c2, 3, 2, 1, rng);
    convs_.emplace_back("phi.conv2", c2, c3, 3, 2, 1, rng);
    convs_.emplace_back("phi.conv3", c3, latent_dim, 3, 1, 1, rng);
    norms_.emplace_back("phi.bn0", c1);
    norms_.emplace_back("phi.bn1", c2);
    norms_.emplace_back("phi.bn2", c3);
    std::vector<std::size_t> dec_widths{latent_dim};
    std::size_t steps = 0;
    for (std::size_t s = patch; s > 1; s /= 2) ++steps;
    const std::size_t mids[] = {c3, c2, c1};
    for (std::size_t i = 0; i + 1 < steps; ++i) dec_widths.push_back(mids[std::min<std::size_t>(i, 2)]);
    dec_widths.push_back(latent_dim);
    for (std::size_t i = 0; i < steps; ++i) {
      decoder_.emplace_back("phi_dec.deconv" + std::to_string(i), dec_widths[i], dec_widths[i + 1], 2, 2, rng);
    }
  }

  std::size_t latent_dim() const { return latent_dim_; }
  std::size_t patch_size() const { return patch_; }

  // patches [P, latent_dim, s, s] -> embeddings [P, latent_dim]
  Var<T> encode(Graph<T>& g, Var<T> patches, const ForwardMode& m) {
    const auto& s = patches.value().shape();
    if (s.size() != 4 || s[1] != latent_dim_ || s[2] != patch_ || s[3] != patch_) {
      throw ShapeMismatch("secondary encoder expects [P, " + std::to_string(latent_dim_) + ", " +
                          std::to_string(patch_) + ", " + std::to_string(patch_) + "] patches, got " +
                          shape_string(s));
    }
    const T slope = static_cast<T>(kLeakySlope);
    Var<T> x = patches;
    for (std::size_t i = 0; i < 3; ++i) x = ops::leaky_relu(norms_[i](g, convs_[i](g, x, m), m), slope);
    return ops::global_avg_pool(convs_[3](g, x, m));
  }

  // embeddings [P, latent_dim] -> patches [P, latent_dim, s, s]
  Var<T> decode(Graph<T>& g, Var<T> z, const ForwardMode& m) {
    const std::size_t p = z.value().dim(0);
    Var<T> x = ops::reshape(z, Shape{p, latent_dim_, 1, 1});
    const T slope = static_cast<T>(kLeakySlope);
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
      x = decoder_[i](g, x, m);
      if (i + 1 < decoder_.size()) x = ops::leaky_relu(x, slope);
    }
    return x;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (std::size_t i = 0; i < 4; ++i) {
      convs_[i].collect(out);
      if (i < 3) norms_[i].collect(out);
    }
    return out;
  }
  std::vector<Parameter<T>*> decoder_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& d : decoder_) d.collect(out);
    return out;
  }
  std::vector<std::pair<std::string, BatchNormStats<T>*>> norm_stats() {
    std::vector<std::pair<std::string, BatchNormStats<T>*>> out;
    for (auto& n : norms_) n.collect_stats(out);
    return out;
  }

 private:
  std::size_t latent_dim_ = 0, patch_ = 0;
  std::vector<Conv2d<T>> convs_;
  std::vector<BatchNorm2d<T>> norms_;
  std::vector<ConvTranspose2d<T>> decoder_;
};

// The n' x n' x latent_dim embedding of one image, cells in row-major order.
template <class T>
struct LatentGrid {
  Tensor<T> values;  // [n', n', latent_dim]
  std::size_t scale = 1;
  std::size_t image_id = 0;

  std::size_t rows() const { return values.dim(0); }
  std::size_t cols() const { return values.dim(1); }
  std::size_t dim() const { return values.dim(2); }
};

// Splits an encoded batch [B, L, h, w] into per-image grids.
template <class T>
std::vector<LatentGrid<T>> to_grids(const Tensor<T>& z, std::size_t scale, std::size_t first_id = 0) {
  const std::size_t b = z.dim(0), l = z.dim(1), h = z.dim(2), w = z.dim(3);
  std::vector<LatentGrid<T>> out;
  for (std::size_t i = 0; i < b; ++i) {
    LatentGrid<T> grid{Tensor<T>(Shape{h, w, l}), scale, first_id + i};
    for (std::size_t c = 0; c < l; ++c)
      for (std::size_t p = 0; p < h * w; ++p) grid.values[p * l + c] = z[((i * l) + c) * h * w + p];
    out.push_back(std::move(grid));
  }
  return out;
}

// Inference-mode encoding of a single standardized image [3, n, n].
template <class T>
LatentGrid<T> encode(PrimaryEncoder<T>& enc, const Tensor<T>& image, std::size_t image_id = 0) {
  if (image.rank() != 3) throw ShapeMismatch("encode expects a [3, n, n] image");
  Graph<T> g;
  auto x = g.constant(image.reshaped(Shape{1, image.dim(0), image.dim(1), image.dim(2)}));
  auto z = enc.encode(g, x, ForwardMode::inference());
  return std::move(to_grids(z.value(), enc.config().scale(), image_id).front());
}

// Inference-mode embedding of one aligned patch [latent_dim, s, s].
template <class T>
Tensor<T> encode_proposal(SecondaryEncoder<T>& enc, const Tensor<T>& patch) {
  if (patch.rank() != 3) throw ShapeMismatch("encode_proposal expects a [latent_dim, s, s] patch");
  Graph<T> g;
  auto x = g.constant(patch.reshaped(Shape{1, patch.dim(0), patch.dim(1), patch.dim(2)}));
  return enc.encode(g, x, ForwardMode::inference()).value().reshaped(Shape{enc.latent_dim()});
}

}  // namespace gaussproto
