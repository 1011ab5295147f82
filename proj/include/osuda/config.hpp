#pragma once

// RunConfig: everything a CLI invocation needs, read from one JSON file.
// Missing keys take defaults; unknown keys are rejected.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "osuda/adapt.hpp"
#include "osuda/benchdata.hpp"
#include "osuda/ppm.hpp"
#include "osuda/segmentor.hpp"

namespace osuda {

inline constexpr int kConfigSchemaVersion = 1;

struct DataConfig {
  std::size_t classes = 5;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t source_count = 200;
  std::size_t eval_count = 40;
  std::size_t adapt_count = 5;
  DomainSpec source_domain;
  DomainSpec target_domain{{0.55, 0.8, 1.1}, {0.3, 0.05, -0.15}, 1.4, 0.02};
};

struct AblationConfig {
  std::vector<std::size_t> patch_sizes{2, 4, 8, 0};  // 0 = the whole stage-4 grid
  std::size_t picks = 5;
  std::size_t repeats = 1;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::filesystem::path out = "runs/default";
  std::filesystem::path data_dir;    // empty = <out>/data
  std::filesystem::path checkpoint;  // empty = <out>/pretrained.ckpt
  DataConfig data;
  SegmentorConfig model;
  AdaptConfig adapt;
  ProtocolSpec protocol;
  AblationConfig ablation;

  std::filesystem::path data_root() const { return data_dir.empty() ? out / "data" : data_dir; }
  std::filesystem::path source_dir() const { return data_root() / "source"; }
  std::filesystem::path eval_dir() const { return data_root() / "eval_target"; }
  std::filesystem::path adapt_dir() const { return data_root() / "adapt_target"; }
  std::filesystem::path checkpoint_path() const { return checkpoint.empty() ? out / "pretrained.ckpt" : checkpoint; }

  // Independent seeds for each stage, all derived from the root.
  std::uint64_t data_seed() const { return derive_seed(seed, "data"); }
  std::uint64_t pretrain_seed() const { return derive_seed(seed, "pretrain"); }
  std::uint64_t protocol_seed() const { return derive_seed(seed, "protocol"); }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& obj, const std::string& where,
                           std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& item : obj.items()) {
    const bool known =
        std::any_of(allowed.begin(), allowed.end(), [&](const char* k) { return item.key() == k; });
    if (!known) throw ConfigError("unknown key '" + item.key() + "' in " + where);
  }
}

template <typename T>
struct is_vector : std::false_type {};
template <typename T>
struct is_vector<std::vector<T>> : std::true_type {};
template <typename T, std::size_t N>
struct is_vector<std::array<T, N>> : std::true_type {};

// nlohmann converts -1 or 2.5 into an unsigned silently.
template <typename T>
void require_unsigned(const nlohmann::json& v, const std::string& what) {
  if constexpr (is_vector<T>::value) {
    if (!v.is_array()) throw ConfigError(what + ": expected an array");
    for (const auto& e : v) require_unsigned<typename T::value_type>(e, what);
  } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
    if (!v.is_number_integer() || v < 0) throw ConfigError(what + ": expected a non-negative integer, got " + v.dump());
  }
}

template <typename T>
void read_key(const nlohmann::json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  require_unsigned<T>(obj.at(key), where + "." + key);
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline void read_domain(const nlohmann::json& j, DomainSpec& d, const std::string& where) {
  reject_unknown(j, where, {"scale", "shift", "gamma", "noise_std"});
  read_key(j, "scale", d.scale, where);
  read_key(j, "shift", d.shift, where);
  read_key(j, "gamma", d.gamma, where);
  read_key(j, "noise_std", d.noise_std, where);
}

inline nlohmann::json domain_json(const DomainSpec& d) {
  return {{"scale", d.scale}, {"shift", d.shift}, {"gamma", d.gamma}, {"noise_std", d.noise_std}};
}

inline Weighting parse_weighting(const std::string& s) {
  if (s == "full") return Weighting::Full;
  if (s == "wo_conf") return Weighting::WithoutConf;
  if (s == "wo_entropy") return Weighting::WithoutEntropy;
  if (s == "constant") return Weighting::Constant;
  throw ConfigError("unknown weighting '" + s + "' (full, wo_conf, wo_entropy, constant)");
}

inline std::string weighting_name(Weighting w) {
  switch (w) {
    case Weighting::Full:
      return "full";
    case Weighting::WithoutConf:
      return "wo_conf";
    case Weighting::WithoutEntropy:
      return "wo_entropy";
    case Weighting::Constant:
      return "constant";
  }
  return "full";
}

inline MixPositions parse_mixing(const std::vector<std::string>& names) {
  MixPositions m{false, false};
  for (const auto& n : names) {
    if (n == "input") {
      m.input = true;
    } else if (n == "layer3") {
      m.layer3 = true;
    } else {
      throw ConfigError("unknown mixing position '" + n + "' (input, layer3)");
    }
  }
  return m;
}

inline std::vector<std::string> mixing_names(MixPositions m) {
  std::vector<std::string> out;
  if (m.input) out.emplace_back("input");
  if (m.layer3) out.emplace_back("layer3");
  return out;
}

}  // namespace detail

inline void validate(const RunConfig& rc) {
  const auto& d = rc.data;
  if (d.classes < 2) throw ConfigError("data.classes must be at least 2 (entropy is normalized by log C)");
  if (d.classes >= kIgnoreLabel) throw ConfigError("data.classes must be below the ignore label 255");
  if (d.height == 0 || d.width == 0) throw ConfigError("data.height and data.width must be positive");
  if (d.source_count == 0 || d.eval_count == 0 || d.adapt_count == 0) {
    throw ConfigError("dataset sizes must be positive");
  }
  for (const DomainSpec* s : {&d.source_domain, &d.target_domain}) {
    if (!(s->gamma > 0.0)) throw ConfigError("domain gamma must be positive");
    if (!(s->noise_std >= 0.0)) throw ConfigError("domain noise_std must be non-negative");
  }
  try {
    Segmentor::validate(rc.model);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  if (rc.model.in_channels != kImageChannels) throw ConfigError("model input channels must be 3");
  if (rc.model.classes != d.classes) throw ConfigError("model class count must equal data.classes");
  validate(rc.adapt);
  const std::size_t h4 = rc.model.output_extent(d.height), w4 = rc.model.output_extent(d.width);
  if (h4 * rc.model.downsample() != d.height || w4 * rc.model.downsample() != d.width) {
    throw ConfigError("image size must be a multiple of the network's total stride " +
                      std::to_string(rc.model.downsample()));
  }
  check_patch_size(h4, w4, rc.adapt.patch_size);
  for (std::size_t p : rc.ablation.patch_sizes) {
    if (p != 0) check_patch_size(h4, w4, p);
  }
  if (h4 != w4 && std::count(rc.ablation.patch_sizes.begin(), rc.ablation.patch_sizes.end(), 0u) > 0) {
    throw ConfigError("a whole-grid patch needs a square stage-4 grid");
  }
  if (rc.protocol.picks == 0 || rc.protocol.repeats == 0) throw ConfigError("protocol picks and repeats must be positive");
  if (rc.protocol.picks > d.adapt_count || rc.ablation.picks > d.adapt_count) {
    throw ConfigError("protocol needs more one-shot picks than data.adapt_count provides");
  }
  if (rc.ablation.picks == 0 || rc.ablation.repeats == 0) throw ConfigError("ablation picks and repeats must be positive");
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using detail::read_key;
  using detail::reject_unknown;
  reject_unknown(j, "config",
                 {"schema_version", "seed", "out", "data_dir", "checkpoint", "data", "model", "pretrain", "adapt",
                  "protocol", "ablation"});
  if (!j.contains("schema_version")) throw ConfigError("config is missing schema_version");
  int version = 0;
  read_key(j, "schema_version", version, "config");
  if (version != kConfigSchemaVersion) {
    throw ConfigError("unsupported config schema_version " + std::to_string(version));
  }
  RunConfig rc;
  read_key(j, "seed", rc.seed, "config");
  std::string path;
  if (j.contains("out")) {
    read_key(j, "out", path, "config");
    rc.out = path;
  }
  if (j.contains("data_dir")) {
    read_key(j, "data_dir", path, "config");
    rc.data_dir = path;
  }
  if (j.contains("checkpoint")) {
    read_key(j, "checkpoint", path, "config");
    rc.checkpoint = path;
  }

  if (j.contains("data")) {
    const auto& d = j.at("data");
    reject_unknown(d, "data",
                   {"classes", "height", "width", "source_count", "eval_count", "adapt_count", "source_domain",
                    "target_domain"});
    read_key(d, "classes", rc.data.classes, "data");
    read_key(d, "height", rc.data.height, "data");
    read_key(d, "width", rc.data.width, "data");
    read_key(d, "source_count", rc.data.source_count, "data");
    read_key(d, "eval_count", rc.data.eval_count, "data");
    read_key(d, "adapt_count", rc.data.adapt_count, "data");
    if (d.contains("source_domain")) detail::read_domain(d.at("source_domain"), rc.data.source_domain, "data.source_domain");
    if (d.contains("target_domain")) detail::read_domain(d.at("target_domain"), rc.data.target_domain, "data.target_domain");
  }
  rc.model.classes = rc.data.classes;

  if (j.contains("model")) {
    const auto& m = j.at("model");
    reject_unknown(m, "model", {"widths", "strides"});
    read_key(m, "widths", rc.model.widths, "model");
    read_key(m, "strides", rc.model.strides, "model");
  }

  auto& a = rc.adapt;
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    reject_unknown(p, "pretrain", {"iters", "lr"});
    read_key(p, "iters", a.pretrain_iters, "pretrain");
    read_key(p, "lr", a.pretrain_lr, "pretrain");
  }

  if (j.contains("adapt")) {
    const auto& s = j.at("adapt");
    reject_unknown(s, "adapt",
                   {"base_lr", "momentum", "weight_decay", "alpha", "patch_size", "max_iters", "poly_power", "mixing",
                    "perturbation_divisor", "clamp_conf_nonneg", "weighting", "source_subset"});
    read_key(s, "base_lr", a.base_lr, "adapt");
    read_key(s, "momentum", a.momentum, "adapt");
    read_key(s, "weight_decay", a.weight_decay, "adapt");
    read_key(s, "alpha", a.alpha, "adapt");
    read_key(s, "patch_size", a.patch_size, "adapt");
    read_key(s, "max_iters", a.max_iters, "adapt");
    read_key(s, "poly_power", a.poly_power, "adapt");
    read_key(s, "perturbation_divisor", a.mix.perturbation_divisor, "adapt");
    read_key(s, "clamp_conf_nonneg", a.clamp_conf_nonneg, "adapt");
    read_key(s, "source_subset", a.source_subset, "adapt");
    if (s.contains("mixing")) {
      std::vector<std::string> names;
      read_key(s, "mixing", names, "adapt");
      a.mixing = detail::parse_mixing(names);
    }
    if (s.contains("weighting")) {
      std::string w;
      read_key(s, "weighting", w, "adapt");
      a.weighting = detail::parse_weighting(w);
    }
  }

  if (j.contains("protocol")) {
    const auto& p = j.at("protocol");
    reject_unknown(p, "protocol", {"picks", "repeats", "max_runs"});
    read_key(p, "picks", rc.protocol.picks, "protocol");
    read_key(p, "repeats", rc.protocol.repeats, "protocol");
    read_key(p, "max_runs", rc.protocol.max_runs, "protocol");
  }

  if (j.contains("ablation")) {
    const auto& b = j.at("ablation");
    reject_unknown(b, "ablation", {"patch_sizes", "picks", "repeats"});
    read_key(b, "patch_sizes", rc.ablation.patch_sizes, "ablation");
    read_key(b, "picks", rc.ablation.picks, "ablation");
    read_key(b, "repeats", rc.ablation.repeats, "ablation");
  }
  validate(rc);
  return rc;
}

inline nlohmann::json to_json(const RunConfig& rc) {
  const auto& a = rc.adapt;
  nlohmann::json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["seed"] = rc.seed;
  j["out"] = rc.out.string();
  if (!rc.data_dir.empty()) j["data_dir"] = rc.data_dir.string();
  if (!rc.checkpoint.empty()) j["checkpoint"] = rc.checkpoint.string();
  j["data"] = {{"classes", rc.data.classes},
               {"height", rc.data.height},
               {"width", rc.data.width},
               {"source_count", rc.data.source_count},
               {"eval_count", rc.data.eval_count},
               {"adapt_count", rc.data.adapt_count},
               {"source_domain", detail::domain_json(rc.data.source_domain)},
               {"target_domain", detail::domain_json(rc.data.target_domain)}};
  j["model"] = {{"widths", rc.model.widths}, {"strides", rc.model.strides}};
  j["pretrain"] = {{"iters", a.pretrain_iters}, {"lr", a.pretrain_lr}};
  j["adapt"] = {{"base_lr", a.base_lr},
                {"momentum", a.momentum},
                {"weight_decay", a.weight_decay},
                {"alpha", a.alpha},
                {"patch_size", a.patch_size},
                {"max_iters", a.max_iters},
                {"poly_power", a.poly_power},
                {"mixing", detail::mixing_names(a.mixing)},
                {"perturbation_divisor", a.mix.perturbation_divisor},
                {"clamp_conf_nonneg", a.clamp_conf_nonneg},
                {"weighting", detail::weighting_name(a.weighting)},
                {"source_subset", a.source_subset}};
  j["protocol"] = {{"picks", rc.protocol.picks}, {"repeats", rc.protocol.repeats}, {"max_runs", rc.protocol.max_runs}};
  j["ablation"] = {{"patch_sizes", rc.ablation.patch_sizes},
                   {"picks", rc.ablation.picks},
                   {"repeats", rc.ablation.repeats}};
  return j;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace osuda
