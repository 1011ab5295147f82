#pragma once

// Toy four-stage convolutional segmentor.
//
// Each stage is conv3x3(stride s) -> ReLU -> conv3x3 -> ReLU; a 1x1 head maps
// the stage-4 feature to class logits and a channel softmax gives p. The
// forward pass exposes the stage-3 and stage-4 features and can style-mix the
// input image and the stage-3 output against a target reference.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "osuda/io.hpp"
#include "osuda/rng.hpp"
#include "osuda/stylemix.hpp"
#include "osuda/tensor.hpp"

namespace osuda {

inline constexpr int kCheckpointSchemaVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SegmentorConfig {
  std::array<std::size_t, 4> widths{8, 16, 16, 16};
  std::array<std::size_t, 4> strides{2, 1, 2, 1};
  std::size_t classes = 5;
  std::size_t in_channels = 3;

  std::size_t downsample() const { return strides[0] * strides[1] * strides[2] * strides[3]; }

  // Spatial extent after all stages for an input extent.
  std::size_t output_extent(std::size_t in) const {
    for (std::size_t s : strides) in = (in - 1) / s + 1;  // 3x3, pad 1
    return in;
  }

  bool operator==(const SegmentorConfig&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct FeatureBundle {
  Tensor p;   // [1,C,H4,W4], softmax over C
  Tensor f3;  // [1,C3,H3,W3], as consumed by stage 4
  Tensor f4;  // [1,C4,H4,W4]
};

struct StyleRef {
  Tensor image_style;    // target image
  Tensor feature_style;  // target stage-3 feature
};

enum class Mode { Train, Eval };

struct MixPositions {
  bool input = true;
  bool layer3 = true;

  bool any() const { return input || layer3; }
};

class Segmentor {
 public:
  Segmentor() = default;

  static Segmentor initialize(const SegmentorConfig& config, Rng& rng) {
    validate(config);
    Segmentor m;
    m.config_ = config;
    std::size_t in = config.in_channels;
    for (std::size_t stage = 0; stage < 4; ++stage) {
      const std::size_t out = config.widths[stage];
      const std::string prefix = "layer" + std::to_string(stage + 1);
      m.add_conv(prefix + ".conv1", out, in, 3, rng);
      m.add_conv(prefix + ".conv2", out, out, 3, rng);
      in = out;
    }
    m.add_conv("head", config.classes, in, 1, rng, false);
    return m;
  }

  static void validate(const SegmentorConfig& config) {
    for (std::size_t i = 0; i < 4; ++i) {
      if (config.widths[i] == 0) throw std::invalid_argument("stage widths must be positive");
      if (config.strides[i] == 0) throw std::invalid_argument("stage strides must be positive");
    }
    if (config.classes < 2) throw std::invalid_argument("segmentor needs at least 2 classes");
    if (config.in_channels == 0) throw std::invalid_argument("input channel count must be positive");
  }

  const SegmentorConfig& config() const { return config_; }
  const std::vector<NamedTensor>& named_parameters() const { return params_; }
  std::vector<NamedTensor>& named_parameters() { return params_; }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.value);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  // Deep copy with fresh leaf tensors.
  Segmentor clone() const {
    Segmentor m;
    m.config_ = config_;
    for (const auto& p : params_) {
      m.params_.push_back({p.name, Tensor(p.value.shape(), {p.value.data().begin(), p.value.data().end()}, true)});
    }
    return m;
  }

  // style != nullptr requires Mode::Train and a mixer. Positions with no
  // reference (or all positions off) run the plain network.
  FeatureBundle forward(const Tensor& image, const StyleRef* style, Mode mode, StyleMixer* mixer = nullptr,
                        MixPositions positions = {}) const {
    if (params_.empty()) throw std::logic_error("forward on an uninitialized segmentor");
    if (style && mode == Mode::Eval) throw std::invalid_argument("style mixing is not allowed in eval mode");
    if (style && !mixer) throw std::invalid_argument("style reference given without a mixer");
    Tensor x = as_batched(image);
    if (x.dim(1) != config_.in_channels) {
      throw ShapeError("segmentor expects " + std::to_string(config_.in_channels) + " input channels, got " +
                       to_string(x.shape()));
    }
    if (style && style->feature_style.defined() && as_batched(style->feature_style).dim(1) != config_.widths[2]) {
      throw ShapeError("feature style has " + std::to_string(as_batched(style->feature_style).dim(1)) +
                       " channels, stage 3 has " + std::to_string(config_.widths[2]));
    }

    std::optional<NoGradGuard> no_grad;
    if (mode == Mode::Eval) no_grad.emplace();

    if (style && positions.input) x = (*mixer)(x, style->image_style);
    x = stage(x, 0);
    x = stage(x, 1);
    x = stage(x, 2);
    if (style && positions.layer3) x = (*mixer)(x, style->feature_style);
    FeatureBundle out;
    out.f3 = x;
    out.f4 = stage(x, 3);
    const auto& w = params_[16].value;
    const auto& b = params_[17].value;
    out.p = softmax_channels(conv2d(out.f4, w, b, 1, 0));
    return out;
  }

  void save(std::ostream& os) const {
    nlohmann::json header;
    header["schema_version"] = kCheckpointSchemaVersion;
    header["widths"] = config_.widths;
    header["strides"] = config_.strides;
    header["classes"] = config_.classes;
    header["in_channels"] = config_.in_channels;
    auto& list = header["params"] = nlohmann::json::array();
    for (const auto& p : params_) list.push_back({{"name", p.name}, {"shape", p.value.shape()}});
    os << header.dump() << '\n';
    for (const auto& p : params_) io::write_f64_le(os, p.value.data());
    if (!os) throw CheckpointError("failed writing checkpoint");
  }

  static Segmentor load(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw CheckpointError("checkpoint is empty");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
    }
    if (header.value("schema_version", -1) != kCheckpointSchemaVersion) {
      throw CheckpointError("unsupported checkpoint schema_version");
    }
    SegmentorConfig config;
    try {
      for (const char* k : {"widths", "strides"}) {
        for (const auto& v : header.at(k)) {
          if (!v.is_number_integer() || v < 0) {
            throw CheckpointError(std::string("checkpoint header ") + k + " must hold non-negative integers");
          }
        }
      }
      for (const char* k : {"classes", "in_channels"}) {
        if (!header.at(k).is_number_integer() || header.at(k) < 0) {
          throw CheckpointError(std::string("checkpoint header ") + k + " must be a non-negative integer");
        }
      }
      config.widths = header.at("widths").get<std::array<std::size_t, 4>>();
      config.strides = header.at("strides").get<std::array<std::size_t, 4>>();
      config.classes = header.at("classes").get<std::size_t>();
      config.in_channels = header.at("in_channels").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("checkpoint header: ") + e.what());
    }
    Rng unused(0);
    Segmentor m = initialize(config, unused);
    const auto& list = header.at("params");
    if (list.size() != m.params_.size()) throw CheckpointError("checkpoint parameter count mismatch");
    for (std::size_t i = 0; i < list.size(); ++i) {
      auto& p = m.params_[i];
      if (list[i].at("name").get<std::string>() != p.name || list[i].at("shape").get<Shape>() != p.value.shape()) {
        throw CheckpointError("checkpoint parameter " + std::to_string(i) + " does not match architecture");
      }
      if (!io::read_f64_le(is, p.value.mutable_data())) throw CheckpointError("checkpoint truncated");
    }
    if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after checkpoint payload");
    return m;
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open " + path + " for writing");
    save(os);
  }

  static Segmentor load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + path);
    return load(is);
  }

 private:
  // Stage convs use a ReLU-gain bound sqrt(6 / fan_in) so the signal survives
  // eight rectified layers; the head keeps 1 / sqrt(fan_in) so initial
  // predictions are close to uniform. Biases start at zero.
  void add_conv(const std::string& name, std::size_t out, std::size_t in, std::size_t k, Rng& rng,
                bool relu_gain = true) {
    const double fan_in = static_cast<double>(in * k * k);
    const double bound = relu_gain ? std::sqrt(6.0 / fan_in) : 1.0 / std::sqrt(fan_in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> w(out * in * k * k), b(out, 0.0);
    for (double& v : w) v = dist(rng);
    params_.push_back({name + ".weight", Tensor(Shape{out, in, k, k}, std::move(w), true)});
    params_.push_back({name + ".bias", Tensor(Shape{out}, std::move(b), true)});
  }

  Tensor stage(const Tensor& x, std::size_t index) const {
    const auto& p = params_;
    const std::size_t base = index * 4;
    Tensor y = relu(conv2d(x, p[base].value, p[base + 1].value, config_.strides[index], 1));
    return relu(conv2d(y, p[base + 2].value, p[base + 3].value, 1, 1));
  }

  SegmentorConfig config_;
  std::vector<NamedTensor> params_;
};

}  // namespace osuda
