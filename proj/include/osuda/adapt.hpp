#pragma once

// Source-only pretraining and the one-shot adaptation loop.
//
// Each adaptation iteration:
//   1. target pass in eval mode (no gradient)   -> p_T, f3_T, f4_T
//   2. prototypes from non-overlapping patches of f4_T
//   3. source pass with style mixing against (x_T, f3_T)
//   4. entropy of p_S, max-cosine confidence of f4_S, rectified weight
//   5. L = alpha * CE + weighted CE, SGD step at the poly learning rate
// The final iterate is returned; there is no model selection.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "osuda/benchdata.hpp"
#include "osuda/loss.hpp"
#include "osuda/ppm.hpp"
#include "osuda/rng.hpp"
#include "osuda/segmentor.hpp"
#include "osuda/stylemix.hpp"
#include "osuda/tensor.hpp"

namespace osuda {

class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::size_t iteration)
      : std::runtime_error(what + " at iteration " + std::to_string(iteration)), iteration_(iteration) {}
  std::size_t iteration() const { return iteration_; }

 private:
  std::size_t iteration_;
};

// Which per-pixel weight the weighted CE term receives.
enum class Weighting {
  Full,            // Conf * (1 - E)
  WithoutConf,     // 1 - E
  WithoutEntropy,  // Conf
  Constant,        // 1 everywhere
};

struct AdaptConfig {
  double base_lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double alpha = kDefaultAlpha;
  std::size_t patch_size = 4;
  std::size_t max_iters = 500;
  double poly_power = 0.9;
  std::uint64_t seed = 0;
  MixPositions mixing{true, true};
  MixSettings mix;
  bool clamp_conf_nonneg = false;
  Weighting weighting = Weighting::Full;
  std::size_t source_subset = 0;  // 0 = whole source set
  std::size_t pretrain_iters = 3000;
  double pretrain_lr = 1e-2;
};

inline void validate(const AdaptConfig& cfg) {
  if (cfg.max_iters < 1) throw ConfigError("max_iters must be at least 1");
  if (cfg.patch_size < 1) throw ConfigError("patch_size must be at least 1");
  if (!(cfg.base_lr >= 0.0) || !(cfg.pretrain_lr >= 0.0)) throw ConfigError("learning rates must be non-negative");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
  if (!(cfg.weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(cfg.poly_power >= 0.0)) throw ConfigError("poly_power must be non-negative");
  if (!(cfg.mix.perturbation_divisor > 0.0)) throw ConfigError("perturbation divisor must be positive");
  if (!std::isfinite(cfg.alpha)) throw ConfigError("alpha must be finite");
}

inline double poly_lr(std::size_t iter, double base_lr, std::size_t max_iters, double power) {
  if (iter > max_iters) throw std::out_of_range("poly_lr iteration beyond the schedule");
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iters), power);
}

inline double poly_lr(std::size_t iter, const AdaptConfig& cfg) {
  return poly_lr(iter, cfg.base_lr, cfg.max_iters, cfg.poly_power);
}

struct TrainState {
  Segmentor model;
  std::vector<std::vector<double>> velocity;
  std::size_t iter = 0;

  explicit TrainState(Segmentor m) : model(std::move(m)) {
    for (const auto& p : model.named_parameters()) velocity.emplace_back(p.value.numel(), 0.0);
  }

  // Everything the optimizer updates.
  std::size_t optimizer_parameter_count() const {
    std::size_t n = 0;
    for (const auto& v : velocity) n += v.size();
    return n;
  }
};

// v <- m v + (g + wd θ);  θ <- θ - lr v. Consumes and clears the gradients.
inline void sgd_step(TrainState& state, double lr, double momentum, double weight_decay) {
  auto& params = state.model.named_parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].value;
    if (!p.has_grad()) throw NumericalError("missing gradient for " + params[k].name, state.iter);
    const auto g = p.grad();
    for (double v : g) {
      if (!std::isfinite(v)) throw NumericalError("non-finite gradient in " + params[k].name, state.iter);
    }
    auto theta = p.mutable_data();
    auto& vel = state.velocity[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      vel[i] = momentum * vel[i] + (g[i] + weight_decay * theta[i]);
      theta[i] -= lr * vel[i];
    }
    p.zero_grad();
  }
  ++state.iter;
}

// Seeded shuffle without replacement, reshuffled every epoch.
class SourceStream {
 public:
  SourceStream(const Dataset& ds, Rng rng, std::size_t subset = 0) : ds_(&ds), rng_(std::move(rng)) {
    if (ds.samples.empty()) throw std::invalid_argument("source dataset is empty");
    pool_.resize(ds.size());
    std::iota(pool_.begin(), pool_.end(), std::size_t{0});
    if (subset > 0 && subset < pool_.size()) {
      std::shuffle(pool_.begin(), pool_.end(), rng_);
      pool_.resize(subset);
      std::sort(pool_.begin(), pool_.end());
    }
    cursor_ = pool_.size();
  }

  const SceneSample& next() {
    if (cursor_ == pool_.size()) {
      order_ = pool_;
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    last_ = order_[cursor_++];
    return ds_->samples[last_];
  }

  std::size_t last_index() const { return last_; }

 private:
  const Dataset* ds_;
  Rng rng_;
  std::vector<std::size_t> pool_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t last_ = 0;
};

struct IterationLog {
  std::size_t iter = 0;
  double lr = 0.0;
  LossTerms loss;
  std::size_t negative_conf_pixels = 0;
};

using IterationSink = std::function<void(const IterationLog&)>;

inline void check_finite_loss(double value, std::size_t iter) {
  if (!std::isfinite(value)) throw NumericalError("non-finite loss", iter);
}

inline Segmentor pretrain_source(const AdaptConfig& cfg, const SegmentorConfig& arch, const Dataset& source,
                                 const IterationSink& sink = {}) {
  validate(cfg);
  if (source.samples.empty()) throw std::invalid_argument("pretraining needs a non-empty source dataset");
  Rng init = make_stream(cfg.seed, "init");
  TrainState state(Segmentor::initialize(arch, init));
  SourceStream stream(source, make_stream(cfg.seed, "pretrain-shuffle"));
  const std::size_t iters = cfg.pretrain_iters;
  for (std::size_t it = 0; it < iters; ++it) {
    const SceneSample& s = stream.next();
    const FeatureBundle out = state.model.forward(s.image, nullptr, Mode::Train);
    const LabelMap y = downsample_nearest(s.label, out.p.dim(2), out.p.dim(3));
    const Tensor loss = cross_entropy(out.p, y);
    check_finite_loss(loss.item(), it);
    loss.backward();
    const double lr = poly_lr(it, cfg.pretrain_lr, iters, cfg.poly_power);
    sgd_step(state, lr, cfg.momentum, cfg.weight_decay);
    if (sink) sink({it, lr, {loss.item(), 0.0, loss.item(), 1.0}, 0});
  }
  return std::move(state.model);
}

// Builds the per-pixel loss weight from the confidence pipeline.
inline ConfidenceMap loss_weights(Weighting w, const ConfidenceMap& fused, const ConfidenceMap& entropy,
                                  bool clamp_nonneg) {
  switch (w) {
    case Weighting::Full:
      return rectify(fused, entropy, clamp_nonneg);
    case Weighting::WithoutConf:
      return rectify(ConfidenceMap::constant(fused.height, fused.width, 1.0, ConfidenceKind::Fused), entropy, clamp_nonneg);
    case Weighting::WithoutEntropy:
      return rectify(fused, ConfidenceMap::constant(fused.height, fused.width, 0.0, ConfidenceKind::Entropy), clamp_nonneg);
    case Weighting::Constant:
      return ConfidenceMap::constant(fused.height, fused.width, 1.0, ConfidenceKind::Rectified);
  }
  throw std::logic_error("unknown weighting");
}

struct AdaptResult {
  Segmentor model;
  std::vector<IterationLog> log;
  std::size_t distinct_targets = 0;
  std::size_t optimizer_parameter_count = 0;
  std::size_t negative_gamma_channels = 0;
  std::size_t negative_conf_pixels = 0;
  std::size_t mixer_calls = 0;
};

namespace detail {

// Records every read of the one-shot target so a run can prove it touched a
// single image.
class TargetAccess {
 public:
  explicit TargetAccess(const Tensor& image) : image_(image) {}

  const Tensor& get() {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (double v : image_.data()) h = splitmix64(h ^ std::bit_cast<std::uint64_t>(v));
    seen_.insert(h);
    return image_;
  }

  std::size_t distinct() const { return seen_.size(); }

 private:
  const Tensor& image_;
  std::set<std::uint64_t> seen_;
};

}  // namespace detail

inline AdaptResult adapt_one_shot(const Segmentor& pretrained, const Dataset& source, const Tensor& target_image,
                                  const AdaptConfig& cfg, const IterationSink& sink = {}) {
  validate(cfg);
  const Tensor target = as_batched(target_image);
  if (target.dim(0) != 1) throw ShapeError("one-shot adaptation takes exactly one target image");
  if (source.samples.empty()) throw std::invalid_argument("adaptation needs a non-empty source dataset");
  const auto& src0 = source.samples.front().image;
  if (src0.dim(0) != target.dim(1)) throw ShapeError("source and target images have different channel counts");
  {
    const auto& arch = pretrained.config();
    check_patch_size(arch.output_extent(target.dim(2)), arch.output_extent(target.dim(3)), cfg.patch_size);
    check_patch_size(arch.output_extent(src0.dim(1)), arch.output_extent(src0.dim(2)), cfg.patch_size);
  }

  TrainState state(pretrained.clone());
  SourceStream stream(source, make_stream(cfg.seed, "shuffle"), cfg.source_subset);
  StyleMixer mixer(cfg.mix, MixStreams::from_seed(cfg.seed));
  detail::TargetAccess access(target);
  AdaptResult result;
  result.optimizer_parameter_count = state.optimizer_parameter_count();

  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    FeatureBundle tgt;
    PrototypeSet protos;
    {
      NoGradGuard no_grad;
      tgt = state.model.forward(access.get(), nullptr, Mode::Eval);
      protos = prototypes(patchify(tgt.f4, cfg.patch_size));
    }

    const SceneSample& s = stream.next();
    const StyleRef style{access.get(), tgt.f3};
    const bool mixing = cfg.mixing.any();
    const FeatureBundle src =
        state.model.forward(s.image, mixing ? &style : nullptr, Mode::Train, mixing ? &mixer : nullptr, cfg.mixing);

    const ConfidenceMap entropy = entropy_map(src.p);
    const ConfidenceMap fused = confidence(src.f4, protos);
    const ConfidenceMap weights = loss_weights(cfg.weighting, fused, entropy, cfg.clamp_conf_nonneg);
    std::size_t negative = 0;
    for (double v : weights.values) negative += v < 0.0 ? 1 : 0;

    const LabelMap y = downsample_nearest(s.label, src.p.dim(2), src.p.dim(3));
    const Tensor l_ce = cross_entropy(src.p, y);
    const Tensor l_pce = weighted_cross_entropy(src.p, y, weights);
    check_finite_loss(l_ce.item(), it);
    check_finite_loss(l_pce.item(), it);
    const Tensor total = total_loss(l_ce, l_pce, cfg.alpha);
    check_finite_loss(total.item(), it);
    total.backward();

    const double lr = poly_lr(it, cfg);
    sgd_step(state, lr, cfg.momentum, cfg.weight_decay);

    IterationLog entry{it, lr, {l_ce.item(), l_pce.item(), total.item(), cfg.alpha}, negative};
    result.negative_conf_pixels += negative;
    result.log.push_back(entry);
    if (sink) sink(entry);
  }

  result.model = std::move(state.model);
  result.distinct_targets = access.distinct();
  result.negative_gamma_channels = mixer.negative_gamma_channels();
  result.mixer_calls = mixer.calls();
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation protocol: every (one-shot pick, repeat) pair is one run.

struct RunRecord {
  std::size_t run_id = 0;
  std::string image_id;
  std::size_t repeat = 0;
  std::uint64_t seed = 0;
  MetricsReport metrics;
};

inline std::uint64_t run_seed(std::uint64_t root, std::size_t pick, std::size_t repeat) {
  return derive_seed(root, "run/" + std::to_string(pick) + "/" + std::to_string(repeat));
}

struct ProtocolSpec {
  std::uint64_t root_seed = 0;
  std::size_t picks = 5;
  std::size_t repeats = 5;
  std::size_t max_runs = 0;  // 0 = picks * repeats
};

using RunSink = std::function<void(const RunRecord&, const AdaptResult&)>;

inline std::vector<RunRecord> run_protocol(const Segmentor& pretrained, const Dataset& source, const Dataset& targets,
                                           const Dataset& eval, const AdaptConfig& base, const ProtocolSpec& spec,
                                           const RunSink& sink = {}) {
  if (targets.size() < spec.picks) {
    throw std::invalid_argument("need " + std::to_string(spec.picks) + " one-shot candidates, have " +
                                std::to_string(targets.size()));
  }
  std::vector<RunRecord> runs;
  const std::size_t limit = spec.max_runs > 0 ? spec.max_runs : spec.picks * spec.repeats;
  for (std::size_t pick = 0; pick < spec.picks && runs.size() < limit; ++pick) {
    for (std::size_t rep = 0; rep < spec.repeats && runs.size() < limit; ++rep) {
      AdaptConfig cfg = base;
      cfg.seed = run_seed(spec.root_seed, pick, rep);
      AdaptResult res = adapt_one_shot(pretrained, source, targets.samples[pick].image, cfg);
      RunRecord rec{runs.size(), targets.ids[pick], rep, cfg.seed, evaluate(res.model, eval)};
      if (sink) sink(rec, res);
      runs.push_back(std::move(rec));
    }
  }
  return runs;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationCell {
  std::string table;  // loss | mixing | patch
  std::string name;
  AdaptConfig config;
};

struct AblationSummary {
  std::string table;
  std::string name;
  std::vector<double> mious;  // one per run, protocol order
  double mean = 0.0;
  double stddev = 0.0;
};

inline AdaptConfig adain_config(AdaptConfig cfg) {
  cfg.mixing = {true, true};
  cfg.mix.forced_lambda = 0.0;
  cfg.mix.zero_perturbation = true;
  return cfg;
}

// Loss variants, mixing positions and patch sizes around a base config.
inline std::vector<AblationCell> default_ablation_grid(const AdaptConfig& base, const std::vector<std::size_t>& patches) {
  std::vector<AblationCell> cells;
  auto with = [&](const std::string& table, const std::string& name, auto edit) {
    AdaptConfig c = base;
    edit(c);
    cells.push_back({table, name, c});
  };
  with("loss", "full", [](AdaptConfig&) {});
  with("loss", "wo_conf", [](AdaptConfig& c) { c.weighting = Weighting::WithoutConf; });
  with("loss", "wo_entropy", [](AdaptConfig& c) { c.weighting = Weighting::WithoutEntropy; });
  with("mixing", "none", [](AdaptConfig& c) { c.mixing = {false, false}; });
  with("mixing", "input", [](AdaptConfig& c) { c.mixing = {true, false}; });
  with("mixing", "layer3", [](AdaptConfig& c) { c.mixing = {false, true}; });
  with("mixing", "both", [](AdaptConfig& c) { c.mixing = {true, true}; });
  with("mixing", "adain", [](AdaptConfig& c) { c = adain_config(c); });
  for (std::size_t p : patches) {
    with("patch", std::to_string(p), [p](AdaptConfig& c) { c.patch_size = p; });
  }
  return cells;
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double stddev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline std::vector<AblationSummary> ablation_suite(const std::vector<AblationCell>& cells, const Segmentor& pretrained,
                                                   const Dataset& source, const Dataset& targets, const Dataset& eval,
                                                   const ProtocolSpec& spec,
                                                   const std::function<void(const AblationCell&, const RunRecord&)>& on_run = {}) {
  std::vector<AblationSummary> out;
  for (const auto& cell : cells) {
    AblationSummary summary{cell.table, cell.name, {}, 0.0, 0.0};
    const auto runs = run_protocol(pretrained, source, targets, eval, cell.config, spec,
                                   [&](const RunRecord& r, const AdaptResult&) {
                                     if (on_run) on_run(cell, r);
                                   });
    for (const auto& r : runs) summary.mious.push_back(r.metrics.miou);
    summary.mean = mean_of(summary.mious);
    summary.stddev = stddev_of(summary.mious);
    out.push_back(std::move(summary));
  }
  return out;
}

}  // namespace osuda
