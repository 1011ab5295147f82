#pragma once

// Patchwise prototypical matching.
//
// The target's stage-4 feature is tiled into non-overlapping P×P patches and
// each patch is averaged into a prototype. Every source pixel is scored by
// its best cosine similarity to any prototype, then damped by the normalized
// entropy of the source prediction. All values here are detached: they weight
// the loss but never receive gradient.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "osuda/tensor.hpp"

namespace osuda {

inline constexpr double kCosineNormFloor = 1e-12;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct FeatureView {
  std::size_t channels, height, width;
  std::span<const double> values;

  double at(std::size_t c, std::size_t y, std::size_t x) const { return values[(c * height + y) * width + x]; }
};

inline FeatureView view_single(const Tensor& f, const char* what) {
  if (f.rank() == 3) return {f.dim(0), f.dim(1), f.dim(2), f.data()};
  if (f.rank() == 4 && f.dim(0) == 1) return {f.dim(1), f.dim(2), f.dim(3), f.data()};
  throw ShapeError(std::string(what) + " must be C×H×W or 1×C×H×W, got " + to_string(f.shape()));
}

}  // namespace detail

// N patches of C×P² values, row-major over the patch grid.
struct Patches {
  std::size_t patch_size = 0;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t channels = 0;
  std::vector<double> values;  // [N][C][P*P]

  std::size_t count() const { return grid_h * grid_w; }
  double at(std::size_t patch, std::size_t c, std::size_t pos) const {
    return values[(patch * channels + c) * patch_size * patch_size + pos];
  }
};

struct PrototypeSet {
  std::size_t patch_size = 0;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::vector<std::vector<double>> protos;

  std::size_t count() const { return protos.size(); }
  std::size_t channels() const { return protos.empty() ? 0 : protos.front().size(); }
};

enum class ConfidenceKind { PerPrototype, Fused, Entropy, Rectified };

struct ConfidenceMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  ConfidenceKind kind = ConfidenceKind::Fused;

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }

  static ConfidenceMap constant(std::size_t h, std::size_t w, double v, ConfidenceKind kind) {
    return {h, w, std::vector<double>(h * w, v), kind};
  }
};

inline void check_patch_size(std::size_t height, std::size_t width, std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw ConfigError("patch size " + std::to_string(patch) + " does not divide the " + std::to_string(height) +
                      "x" + std::to_string(width) + " stage-4 grid");
  }
}

inline Patches patchify(const Tensor& f4, std::size_t patch) {
  const auto f = detail::view_single(f4, "patchify input");
  check_patch_size(f.height, f.width, patch);
  Patches out;
  out.patch_size = patch;
  out.grid_h = f.height / patch;
  out.grid_w = f.width / patch;
  out.channels = f.channels;
  out.values.resize(f.values.size());
  std::size_t k = 0;
  for (std::size_t gy = 0; gy < out.grid_h; ++gy)
    for (std::size_t gx = 0; gx < out.grid_w; ++gx)
      for (std::size_t c = 0; c < f.channels; ++c)
        for (std::size_t s = 0; s < patch; ++s)
          for (std::size_t t = 0; t < patch; ++t) out.values[k++] = f.at(c, gy * patch + s, gx * patch + t);
  return out;
}

// Inverse of patchify; returns a C×H×W tensor.
inline Tensor unpatchify(const Patches& patches) {
  const std::size_t p = patches.patch_size;
  const std::size_t h = patches.grid_h * p, w = patches.grid_w * p;
  std::vector<double> out(patches.values.size());
  std::size_t k = 0;
  for (std::size_t gy = 0; gy < patches.grid_h; ++gy)
    for (std::size_t gx = 0; gx < patches.grid_w; ++gx)
      for (std::size_t c = 0; c < patches.channels; ++c)
        for (std::size_t s = 0; s < p; ++s)
          for (std::size_t t = 0; t < p; ++t) out[(c * h + gy * p + s) * w + gx * p + t] = patches.values[k++];
  return Tensor(Shape{patches.channels, h, w}, std::move(out));
}

inline PrototypeSet prototypes(const Patches& patches) {
  if (patches.count() == 0 || patches.channels == 0) throw std::invalid_argument("prototypes of empty patch set");
  const std::size_t area = patches.patch_size * patches.patch_size;
  PrototypeSet out{patches.patch_size, patches.grid_h, patches.grid_w, {}};
  out.protos.assign(patches.count(), std::vector<double>(patches.channels, 0.0));
  for (std::size_t i = 0; i < patches.count(); ++i) {
    for (std::size_t c = 0; c < patches.channels; ++c) {
      double s = 0.0;
      for (std::size_t pos = 0; pos < area; ++pos) s += patches.at(i, c, pos);
      out.protos[i][c] = s / static_cast<double>(area);
    }
  }
  return out;
}

namespace detail {

inline void require_proto_channels(const FeatureView& f, std::size_t channels) {
  if (f.channels != channels) {
    throw ShapeError("source feature has " + std::to_string(f.channels) + " channels, prototypes have " +
                     std::to_string(channels));
  }
}

inline std::vector<double> pixel_norms(const FeatureView& f) {
  std::vector<double> norms(f.height * f.width, 0.0);
  for (std::size_t c = 0; c < f.channels; ++c)
    for (std::size_t i = 0; i < norms.size(); ++i) {
      const double v = f.values[c * norms.size() + i];
      norms[i] += v * v;
    }
  for (double& n : norms) n = std::max(std::sqrt(n), kCosineNormFloor);
  return norms;
}

inline std::vector<double> cosine_to(const FeatureView& f, const std::vector<double>& norms,
                                     const std::vector<double>& proto) {
  const std::size_t hw = f.height * f.width;
  double pn = 0.0;
  for (double v : proto) pn += v * v;
  pn = std::max(std::sqrt(pn), kCosineNormFloor);
  std::vector<double> dot(hw, 0.0);
  for (std::size_t c = 0; c < f.channels; ++c)
    for (std::size_t i = 0; i < hw; ++i) dot[i] += f.values[c * hw + i] * proto[c];
  for (std::size_t i = 0; i < hw; ++i) dot[i] = std::clamp(dot[i] / (norms[i] * pn), -1.0, 1.0);
  return dot;
}

}  // namespace detail

// Cosine similarity of every source pixel to one prototype, H4×W4.
inline ConfidenceMap prototype_confidence(const Tensor& f4_source, const std::vector<double>& proto) {
  const auto f = detail::view_single(f4_source, "source feature");
  detail::require_proto_channels(f, proto.size());
  return {f.height, f.width, detail::cosine_to(f, detail::pixel_norms(f), proto), ConfidenceKind::PerPrototype};
}

// Max over prototypes of the per-prototype cosine maps.
inline ConfidenceMap confidence(const Tensor& f4_source, const PrototypeSet& protos) {
  if (protos.count() == 0) throw std::invalid_argument("confidence against an empty prototype set");
  const auto f = detail::view_single(f4_source, "source feature");
  detail::require_proto_channels(f, protos.channels());
  const auto norms = detail::pixel_norms(f);
  ConfidenceMap out = ConfidenceMap::constant(f.height, f.width, -INFINITY, ConfidenceKind::Fused);
  for (const auto& proto : protos.protos) {
    const auto cos = detail::cosine_to(f, norms, proto);
    for (std::size_t i = 0; i < cos.size(); ++i) out.values[i] = std::max(out.values[i], cos[i]);
  }
  return out;
}

// Normalized prediction entropy in [0,1]; 0·log 0 is taken as 0.
inline ConfidenceMap entropy_map(const Tensor& p_source) {
  const auto p = detail::view_single(p_source, "prediction");
  if (p.channels < 2) throw std::invalid_argument("entropy needs at least 2 classes");
  const double norm = std::log(static_cast<double>(p.channels));
  const std::size_t hw = p.height * p.width;
  ConfidenceMap out = ConfidenceMap::constant(p.height, p.width, 0.0, ConfidenceKind::Entropy);
  for (std::size_t i = 0; i < hw; ++i) {
    double h = 0.0, lo = INFINITY, hi = -INFINITY;
    for (std::size_t c = 0; c < p.channels; ++c) {
      const double v = p.values[c * hw + i];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      if (v > 0.0) h -= v * std::log(v);
    }
    // A flat distribution has entropy log C exactly; skip the rounding.
    out.values[i] = lo == hi ? 1.0 : std::clamp(h / norm, 0.0, 1.0);
  }
  return out;
}

// fused ⊙ (1 − E); optionally floored at 0.
inline ConfidenceMap rectify(const ConfidenceMap& fused, const ConfidenceMap& entropy, bool clamp_nonneg = false) {
  if (fused.height != entropy.height || fused.width != entropy.width) {
    throw ShapeError("rectify dim mismatch: " + std::to_string(fused.height) + "x" + std::to_string(fused.width) +
                     " vs " + std::to_string(entropy.height) + "x" + std::to_string(entropy.width));
  }
  ConfidenceMap out = fused;
  out.kind = ConfidenceKind::Rectified;
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    out.values[i] = fused.values[i] * (1.0 - entropy.values[i]);
    if (clamp_nonneg) out.values[i] = std::clamp(out.values[i], 0.0, 1.0);
  }
  return out;
}

}  // namespace osuda
