#pragma once

// Small convolutional encoder producing annotation grids. Stride-2 3x3 conv +
// relu blocks, a 1x1 projection to N channels, then adaptive average pooling
// to a G x G grid. Convolutions are expressed as a patch gather followed by a
// matmul, so they differentiate through the core primitives.

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "capkit/annotation.hpp"
#include "capkit/data.hpp"
#include "capkit/functional.hpp"
#include "capkit/optim.hpp"

namespace capkit {

enum class EncoderVariant { conv_s, conv_m, conv_l, precomputed };

inline const char* variant_name(EncoderVariant v) {
  switch (v) {
    case EncoderVariant::conv_s: return "conv-s";
    case EncoderVariant::conv_m: return "conv-m";
    case EncoderVariant::conv_l: return "conv-l";
    case EncoderVariant::precomputed: return "precomputed";
  }
  return "?";
}

inline EncoderVariant parse_variant(const std::string& s) {
  if (s == "conv-s") return EncoderVariant::conv_s;
  if (s == "conv-m") return EncoderVariant::conv_m;
  if (s == "conv-l") return EncoderVariant::conv_l;
  if (s == "precomputed") return EncoderVariant::precomputed;
  throw std::invalid_argument("unknown encoder variant: " + s);
}

struct EncoderConfig {
  EncoderVariant variant = EncoderVariant::conv_s;
  std::size_t channels = 64;   // N
  std::size_t grid = 14;       // G, so P = G * G
  std::size_t base_width = 16; // first block width, doubled per block
  bool finetune = false;
  bool finetune_all = false;

  std::size_t blocks() const {
    switch (variant) {
      case EncoderVariant::conv_s: return 2;
      case EncoderVariant::conv_m: return 3;
      case EncoderVariant::conv_l: return 4;
      case EncoderVariant::precomputed: return 0;
    }
    return 0;
  }
  std::size_t positions() const { return grid * grid; }
};

/// Channel-first feature volume N x H x W.
struct FeatureVolume {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<double> values;
};

/// Row p = (row * W + col) holds the N-channel fiber at that position.
inline AnnotationGrid flatten_annotations(const FeatureVolume& vol) {
  if (vol.values.size() != vol.channels * vol.height * vol.width) {
    throw ShapeError("feature volume payload does not match N x H x W");
  }
  const std::size_t p = vol.height * vol.width;
  std::vector<double> out(p * vol.channels);
  for (std::size_t c = 0; c < vol.channels; ++c)
    for (std::size_t i = 0; i < p; ++i) out[i * vol.channels + c] = vol.values[c * p + i];
  return AnnotationGrid(p, vol.channels, std::move(out));
}

inline FeatureVolume unflatten_annotations(const AnnotationGrid& grid, std::size_t height, std::size_t width) {
  if (height * width != grid.positions) throw ShapeError("grid positions do not match H x W");
  FeatureVolume vol{grid.channels, height, width, std::vector<double>(grid.values.size())};
  for (std::size_t c = 0; c < grid.channels; ++c)
    for (std::size_t i = 0; i < grid.positions; ++i) vol.values[c * grid.positions + i] = grid.at(i, c);
  return vol;
}

namespace detail {

/// Gather ids for 3x3 stride-2 pad-1 patches over an (H*W) x C matrix whose
/// extra row H*W is all zeros.
inline std::vector<std::size_t> patch_ids(std::size_t h, std::size_t w) {
  const std::size_t oh = h / 2, ow = w / 2, zero = h * w;
  std::vector<std::size_t> ids;
  ids.reserve(oh * ow * 9);
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox)
      for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const long y = static_cast<long>(2 * oy + ky) - 1, x = static_cast<long>(2 * ox + kx) - 1;
          const bool in = y >= 0 && x >= 0 && y < static_cast<long>(h) && x < static_cast<long>(w);
          ids.push_back(in ? static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x) : zero);
        }
  return ids;
}

/// Adaptive average pooling (sh x sw) -> (g x g) as a P x (sh*sw) matrix.
inline Tensor adaptive_pool_matrix(std::size_t sh, std::size_t sw, std::size_t g) {
  Tensor m({g * g, sh * sw}, 0.0);
  auto d = m.mutable_data();
  for (std::size_t gy = 0; gy < g; ++gy) {
    const std::size_t y0 = gy * sh / g, y1 = ((gy + 1) * sh + g - 1) / g;
    for (std::size_t gx = 0; gx < g; ++gx) {
      const std::size_t x0 = gx * sw / g, x1 = ((gx + 1) * sw + g - 1) / g;
      const double wgt = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) d[(gy * g + gx) * sh * sw + y * sw + x] = wgt;
    }
  }
  return m;
}

}  // namespace detail

class ConvEncoder {
 public:
  ConvEncoder(const EncoderConfig& config, ParameterStore& store, Rng& rng) : config_(config) {
    if (config.variant == EncoderVariant::precomputed) {
      throw std::invalid_argument("precomputed features need no convolutional encoder");
    }
    if (config.channels == 0 || config.grid == 0 || config.base_width == 0) {
      throw std::invalid_argument("encoder channels, grid and base_width must be positive");
    }
    std::size_t in = 3;
    for (std::size_t i = 0; i < config.blocks(); ++i) {
      const std::size_t out = config.base_width << i;
      const auto prefix = "enc.block" + std::to_string(i);
      blocks_.push_back({store.weight(prefix + ".w", 9 * in, out, rng), store.bias(prefix + ".b", out)});
      in = out;
    }
    proj_ = {store.weight("enc.proj.w", in, config.channels, rng), store.bias("enc.proj.b", config.channels)};
    set_finetune(config.finetune, config.finetune_all);
  }

  const EncoderConfig& config() const { return config_; }
  std::size_t stride() const { return std::size_t{1} << blocks_.size(); }

  /// Annotation vectors for one image as a differentiable P x N tensor.
  Tensor encode(const Image& image) const {
    if (image.height % stride() != 0 || image.width % stride() != 0) {
      throw std::invalid_argument("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                                  " is not divisible by encoder stride " + std::to_string(stride()));
    }
    std::size_t h = image.height, w = image.width;
    std::vector<double> hwc(h * w * 3);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < h * w; ++i) hwc[i * 3 + c] = image.values[c * h * w + i];
    Tensor x({h * w, 3}, std::move(hwc));
    for (const auto& blk : blocks_) {
      const std::size_t cin = x.dim(1);
      auto padded = concat({x, Tensor({1, cin}, 0.0)}, 0);
      auto patches = embedding(padded, detail::patch_ids(h, w));
      h /= 2;
      w /= 2;
      x = relu(linear(reshape(patches, {h * w, 9 * cin}), blk.w, blk.b));
    }
    auto projected = linear(x, proj_.w, proj_.b);
    return matmul(detail::adaptive_pool_matrix(h, w, config_.grid), projected);
  }

  AnnotationGrid encode_grid(const Image& image) const {
    NoGradGuard no_grad;
    auto t = encode(image);
    return AnnotationGrid(t.dim(0), t.dim(1), t.values());
  }

  /// false: every encoder parameter frozen. true: only the final conv block
  /// and the projection train (all blocks when `all` is set).
  void set_finetune(bool flag, bool all = false) {
    config_.finetune = flag;
    config_.finetune_all = all;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const bool on = flag && (all || i + 1 == blocks_.size());
      blocks_[i].w.set_requires_grad(on);
      blocks_[i].b.set_requires_grad(on);
    }
    proj_.w.set_requires_grad(flag);
    proj_.b.set_requires_grad(flag);
  }

  bool frozen() const { return !config_.finetune; }

 private:
  struct Layer {
    Tensor w, b;
  };
  EncoderConfig config_;
  std::vector<Layer> blocks_;
  Layer proj_;
};

}  // namespace capkit
