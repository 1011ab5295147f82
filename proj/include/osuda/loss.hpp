#pragma once

// Pixel-wise cross-entropy objectives at prediction resolution.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "osuda/ppm.hpp"
#include "osuda/tensor.hpp"

namespace osuda {

inline constexpr std::uint8_t kIgnoreLabel = 255;
inline constexpr double kProbabilityFloor = 1e-12;
inline constexpr double kDefaultAlpha = 0.5;

struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
};

// Nearest-neighbour resampling; each output cell takes the label at the
// centre of its source block.
inline LabelMap downsample_nearest(const LabelMap& y, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || height > y.height || width > y.width) {
    throw ShapeError("cannot downsample " + std::to_string(y.height) + "x" + std::to_string(y.width) + " labels to " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  LabelMap out{height, width, std::vector<std::uint8_t>(height * width)};
  for (std::size_t r = 0; r < height; ++r) {
    const std::size_t sr = (2 * r + 1) * y.height / (2 * height);
    for (std::size_t c = 0; c < width; ++c) {
      const std::size_t sc = (2 * c + 1) * y.width / (2 * width);
      out.labels[r * width + c] = y.at(sr, sc);
    }
  }
  return out;
}

struct LossTerms {
  double l_ce = 0.0;
  double l_pce = 0.0;
  double total = 0.0;
  double alpha = kDefaultAlpha;
};

namespace detail {

// -(1/|valid|) Σ_valid w(h,w) log p[y,h,w], built from tape ops so the
// gradient reaches p. Weights are plain numbers (detached).
inline Tensor masked_nll(const Tensor& p, const LabelMap& y, const std::vector<double>* weights) {
  if (p.rank() != 4 || p.dim(0) != 1) throw ShapeError("loss expects a 1×C×H×W prediction, got " + to_string(p.shape()));
  const std::size_t c = p.dim(1), h = p.dim(2), w = p.dim(3), hw = h * w;
  if (y.height != h || y.width != w) {
    throw ShapeError("label map " + std::to_string(y.height) + "x" + std::to_string(y.width) +
                     " does not match prediction " + to_string(p.shape()));
  }
  if (weights && weights->size() != hw) throw ShapeError("confidence map does not match prediction resolution");
  std::size_t valid = 0;
  for (std::uint8_t label : y.labels) {
    if (label == kIgnoreLabel) continue;
    if (label >= c) throw std::invalid_argument("label " + std::to_string(label) + " outside [0," + std::to_string(c) + ")");
    ++valid;
  }
  if (valid == 0) throw std::invalid_argument("every pixel is ignored; cross-entropy is undefined");

  const double inv = 1.0 / static_cast<double>(valid);
  std::vector<double> mask(c * hw, 0.0);
  for (std::size_t i = 0; i < hw; ++i) {
    const std::uint8_t label = y.labels[i];
    if (label == kIgnoreLabel) continue;
    mask[label * hw + i] = weights ? (*weights)[i] * inv : inv;
  }
  const Tensor m(p.shape(), std::move(mask));
  return mul_scalar(sum(mul(m, log(clamp_min(p, kProbabilityFloor)))), -1.0);
}

}  // namespace detail

inline Tensor cross_entropy(const Tensor& p, const LabelMap& y) { return detail::masked_nll(p, y, nullptr); }

inline Tensor weighted_cross_entropy(const Tensor& p, const LabelMap& y, const ConfidenceMap& conf_hat) {
  if (conf_hat.height != y.height || conf_hat.width != y.width) {
    throw ShapeError("confidence map " + std::to_string(conf_hat.height) + "x" + std::to_string(conf_hat.width) +
                     " does not match labels " + std::to_string(y.height) + "x" + std::to_string(y.width));
  }
  return detail::masked_nll(p, y, &conf_hat.values);
}

inline Tensor total_loss(const Tensor& l_ce, const Tensor& l_pce, double alpha = kDefaultAlpha) {
  if (!std::isfinite(l_ce.item()) || !std::isfinite(l_pce.item())) {
    throw std::domain_error("non-finite loss term");
  }
  return add(mul_scalar(l_ce, alpha), l_pce);
}

}  // namespace osuda
