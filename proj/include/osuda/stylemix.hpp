#pragma once

// Parameter-free style mixing of per-channel feature statistics.
//
// A source feature is instance-normalized and re-scaled with a random convex
// combination of its own statistics and a randomly perturbed copy of the
// target's statistics:
//
//   gamma = lambda * sigma_s + (1 - lambda) * (sigma_t + r_sigma)
//   beta  = lambda * mu_s    + (1 - lambda) * (mu_t    + r_mu)
//   out   = gamma * (f - mu_s) / sigma_s + beta
//
// lambda ~ U(0,1) per channel, r ~ N(0, |t - s| / divisor). Samples are
// constants with respect to gradients; the source statistics are not.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <vector>

#include "osuda/rng.hpp"
#include "osuda/tensor.hpp"

namespace osuda {

inline constexpr double kStatEpsilon = 1e-30;

struct ChannelStats {
  Tensor mu;     // [N,C]
  Tensor sigma;  // [N,C], sqrt(var + eps) > 0

  std::size_t channels() const { return mu.dim(1); }
};

inline Tensor as_batched(const Tensor& f) {
  if (f.rank() == 4) return f;
  if (f.rank() == 3) return reshape(f, Shape{1, f.dim(0), f.dim(1), f.dim(2)});
  throw ShapeError("expected a C×H×W or N×C×H×W feature, got " + to_string(f.shape()));
}

inline ChannelStats channel_stats(const Tensor& f, double eps = kStatEpsilon) {
  const Tensor x = as_batched(f);
  return {channel_mean(x), channel_std(x, eps)};
}

struct MixSettings {
  double perturbation_divisor = 10.0;
  // Test hooks. lambda forced to 0 with zero perturbation is plain AdaIN.
  std::optional<double> forced_lambda;
  bool zero_perturbation = false;
};

struct MixStreams {
  Rng lambda;
  Rng perturbation;

  static MixStreams from_seed(std::uint64_t root) {
    return {make_stream(root, "lambda"), make_stream(root, "perturbation")};
  }
};

// The random part of one mixing call: lambda and the realized perturbations.
struct MixDraw {
  std::vector<double> lambda;
  std::vector<double> r_mu;
  std::vector<double> r_sigma;
};

struct MixParams {
  std::vector<double> lambda;
  std::vector<double> r_mu;
  std::vector<double> r_sigma;
  Tensor gamma;  // [N,C]
  Tensor beta;   // [N,C]
};

namespace detail {

inline void require_same_channels(const ChannelStats& source, const ChannelStats& target) {
  if (source.mu.shape() != target.mu.shape()) {
    throw ShapeError("channel-count mismatch in style mixing: " + to_string(source.mu.shape()) + " vs " +
                     to_string(target.mu.shape()));
  }
}

}  // namespace detail

// Draws are taken unconditionally (lambda first, then one normal pair per
// channel) so forcing a hook never changes how many numbers a stream yields.
inline MixDraw draw_mix(const ChannelStats& source, const ChannelStats& target, MixStreams& streams,
                        const MixSettings& settings = {}) {
  detail::require_same_channels(source, target);
  if (settings.perturbation_divisor <= 0.0) throw std::invalid_argument("perturbation divisor must be positive");
  const std::size_t n = source.mu.numel();
  MixDraw d{std::vector<double>(n), std::vector<double>(n), std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i) d.lambda[i] = uniform01(streams.lambda);

  const auto mu_s = source.mu.data(), sd_s = source.sigma.data();
  const auto mu_t = target.mu.data(), sd_t = target.sigma.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double z_sigma = standard_normal(streams.perturbation);
    const double z_mu = standard_normal(streams.perturbation);
    d.r_sigma[i] = z_sigma * std::abs(sd_t[i] - sd_s[i]) / settings.perturbation_divisor;
    d.r_mu[i] = z_mu * std::abs(mu_t[i] - mu_s[i]) / settings.perturbation_divisor;
  }
  if (settings.forced_lambda) {
    if (*settings.forced_lambda < 0.0 || *settings.forced_lambda > 1.0) {
      throw std::invalid_argument("forced lambda outside [0,1]");
    }
    std::fill(d.lambda.begin(), d.lambda.end(), *settings.forced_lambda);
  }
  if (settings.zero_perturbation) {
    std::fill(d.r_mu.begin(), d.r_mu.end(), 0.0);
    std::fill(d.r_sigma.begin(), d.r_sigma.end(), 0.0);
  }
  return d;
}

// gamma and beta from a draw; differentiable in the source statistics.
inline MixParams mix_params(const ChannelStats& source, const ChannelStats& target, MixDraw draw) {
  detail::require_same_channels(source, target);
  const std::size_t n = source.mu.numel();
  if (draw.lambda.size() != n || draw.r_mu.size() != n || draw.r_sigma.size() != n) {
    throw ShapeError("mix draw has the wrong channel count for " + to_string(source.mu.shape()));
  }
  const auto mu_t = target.mu.data(), sd_t = target.sigma.data();
  std::vector<double> sigma_rest(n), mu_rest(n);
  for (std::size_t i = 0; i < n; ++i) {
    sigma_rest[i] = (1.0 - draw.lambda[i]) * (sd_t[i] + draw.r_sigma[i]);
    mu_rest[i] = (1.0 - draw.lambda[i]) * (mu_t[i] + draw.r_mu[i]);
  }
  const Shape shape = source.mu.shape();
  const Tensor lam(shape, draw.lambda);
  MixParams out;
  out.gamma = add(mul(lam, source.sigma), Tensor(shape, std::move(sigma_rest)));
  out.beta = add(mul(lam, source.mu), Tensor(shape, std::move(mu_rest)));
  out.lambda = std::move(draw.lambda);
  out.r_mu = std::move(draw.r_mu);
  out.r_sigma = std::move(draw.r_sigma);
  return out;
}

inline MixParams sample_mix_params(const ChannelStats& source, const ChannelStats& target, MixStreams& streams,
                                   const MixSettings& settings = {}) {
  return mix_params(source, target, draw_mix(source, target, streams, settings));
}

inline Tensor stylize(const Tensor& f_s, const Tensor& gamma, const Tensor& beta) {
  const Tensor f = as_batched(f_s);
  if (gamma.shape() != Shape{f.dim(0), f.dim(1)} || beta.shape() != gamma.shape()) {
    throw ShapeError("channel mismatch in stylize: feature " + to_string(f.shape()) + " vs gamma " +
                     to_string(gamma.shape()) + " / beta " + to_string(beta.shape()));
  }
  const ChannelStats s = channel_stats(f);
  const Tensor normalized = div(sub(f, broadcast_like(s.mu, f)), broadcast_like(s.sigma, f));
  return add(mul(broadcast_like(gamma, f), normalized), broadcast_like(beta, f));
}

// The mixing layer as it sits inside the segmentor. Holds RNG state and
// diagnostics only.
class StyleMixer {
 public:
  StyleMixer(MixSettings settings, MixStreams streams) : settings_(settings), streams_(std::move(streams)) {}

  Tensor operator()(const Tensor& source, const Tensor& target_style) {
    const Tensor f_s = as_batched(source);
    const Tensor f_t = as_batched(target_style);
    if (f_s.dim(1) != f_t.dim(1)) {
      throw ShapeError("style reference has " + std::to_string(f_t.dim(1)) + " channels, feature has " +
                       std::to_string(f_s.dim(1)));
    }
    ChannelStats target;
    {
      NoGradGuard no_grad;
      target = channel_stats(f_t);
    }
    const ChannelStats own = channel_stats(f_s);
    MixDraw draw;
    if (replay_.empty()) {
      draw = draw_mix(own, target, streams_, settings_);
    } else {
      if (replay_pos_ >= replay_.size()) throw std::logic_error("style mixer replay exhausted");
      draw = replay_[replay_pos_++];
    }
    history_.push_back(draw);
    last_ = mix_params(own, target, std::move(draw));
    for (double g : last_.gamma.data()) negative_gamma_ += g < 0.0 ? 1 : 0;
    ++calls_;
    return stylize(f_s, last_.gamma, last_.beta);
  }

  // No learned state.
  std::vector<Tensor> parameters() const { return {}; }

  const MixSettings& settings() const { return settings_; }
  const MixParams& last_params() const { return last_; }
  std::size_t negative_gamma_channels() const { return negative_gamma_; }
  std::size_t calls() const { return calls_; }

  // Every draw used so far, in call order.
  const std::vector<MixDraw>& history() const { return history_; }

  // A mixer that reuses recorded draws instead of sampling; lets a caller
  // re-evaluate a forward pass with the randomness held fixed.
  static StyleMixer replaying(std::vector<MixDraw> draws, MixSettings settings = {}) {
    StyleMixer m(settings, MixStreams::from_seed(0));
    m.replay_ = std::move(draws);
    return m;
  }

 private:
  MixSettings settings_;
  MixStreams streams_;
  MixParams last_;
  std::vector<MixDraw> history_;
  std::vector<MixDraw> replay_;
  std::size_t replay_pos_ = 0;
  std::size_t negative_gamma_ = 0;
  std::size_t calls_ = 0;
};

}  // namespace osuda
