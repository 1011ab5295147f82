#pragma once

// Procedural segmentation scenes, photometric domains, dataset files and
// IoU metrics.
//
// A scene is a textured background (class 0) with a handful of rectangles,
// ellipses and bars painted on top, one class each. Every class has its own
// base colour and stripe texture. A domain is a per-channel gamma/affine
// colour map plus noise, so two domains rendered from the same geometry share
// label maps bit for bit.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "osuda/io.hpp"
#include "osuda/loss.hpp"
#include "osuda/rng.hpp"
#include "osuda/segmentor.hpp"
#include "osuda/tensor.hpp"

namespace osuda {

inline constexpr int kDatasetSchemaVersion = 1;
inline constexpr std::size_t kImageChannels = 3;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SceneSample {
  Tensor image;  // [3,H,W], values in [0,1]
  LabelMap label;
};

struct DomainSpec {
  std::array<double, 3> scale{1.0, 1.0, 1.0};
  std::array<double, 3> shift{0.0, 0.0, 0.0};
  double gamma = 1.0;
  double noise_std = 0.0;

  bool operator==(const DomainSpec&) const = default;
};

// Base colour of a class: grey background, evenly spaced hues otherwise.
inline std::array<double, 3> class_color(std::size_t cls, std::size_t classes) {
  if (cls == 0) return {0.5, 0.5, 0.5};
  const double hue = static_cast<double>(cls - 1) / static_cast<double>(classes - 1);
  const double s = 0.65, v = 0.8;
  const double h6 = hue * 6.0;
  const int sector = static_cast<int>(h6) % 6;
  const double f = h6 - std::floor(h6);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

namespace detail {

enum class ShapeKind { Rectangle, Ellipse, Bar };

inline double stripe(std::size_t cls, std::size_t classes, double y, double x, double phase) {
  const double angle = std::numbers::pi * static_cast<double>(cls) / static_cast<double>(classes);
  const double period = 4.0 + 2.0 * static_cast<double>(cls % 3);
  return std::sin(2.0 * std::numbers::pi * (x * std::cos(angle) + y * std::sin(angle)) / period + phase);
}

}  // namespace detail

inline SceneSample gen_scene(Rng& rng, std::size_t classes, std::size_t height, std::size_t width) {
  if (classes < 2) throw std::invalid_argument("scene generator needs at least 2 classes");
  if (classes > 255) throw std::invalid_argument("at most 255 classes fit the label format");
  if (height < 8 || width < 8) throw std::invalid_argument("scene must be at least 8x8");
  const std::size_t hw = height * width;
  std::vector<std::uint8_t> label(hw, 0);
  std::vector<double> brightness(hw, 1.0);
  std::vector<double> phase_map(hw, 0.0);

  auto uni = [&rng](double lo, double hi) { return lo + (hi - lo) * uniform01(rng); };
  auto pick = [&rng](std::size_t n) { return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n; };

  const double bg_brightness = uni(0.9, 1.1);
  const double bg_phase = uni(0.0, 2.0 * std::numbers::pi);
  std::fill(brightness.begin(), brightness.end(), bg_brightness);
  std::fill(phase_map.begin(), phase_map.end(), bg_phase);

  const auto fh = static_cast<double>(height), fw = static_cast<double>(width);
  const std::size_t shapes = 3 + pick(4);
  for (std::size_t s = 0; s < shapes; ++s) {
    const auto cls = static_cast<std::uint8_t>(1 + pick(classes - 1));
    const auto kind = static_cast<detail::ShapeKind>(pick(3));
    const double cy = uni(0.1, 0.9) * fh, cx = uni(0.1, 0.9) * fw;
    double ry = uni(0.1, 0.22) * fh, rx = uni(0.1, 0.22) * fw;
    if (kind == detail::ShapeKind::Bar) {
      if (uniform01(rng) < 0.5) {
        ry = uni(0.04, 0.07) * fh;
        rx = uni(0.3, 0.45) * fw;
      } else {
        ry = uni(0.3, 0.45) * fh;
        rx = uni(0.04, 0.07) * fw;
      }
    }
    const double b = uni(0.9, 1.1);
    const double phase = uni(0.0, 2.0 * std::numbers::pi);
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
        const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
        const bool inside = kind == detail::ShapeKind::Ellipse ? dy * dy + dx * dx <= 1.0
                                                               : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
        if (!inside) continue;
        label[y * width + x] = cls;
        brightness[y * width + x] = b;
        phase_map[y * width + x] = phase;
      }
    }
  }

  std::vector<double> img(kImageChannels * hw);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t i = y * width + x;
      const std::size_t cls = label[i];
      const auto color = class_color(cls, classes);
      const double tex = 0.08 * detail::stripe(cls, classes, static_cast<double>(y), static_cast<double>(x), phase_map[i]);
      for (std::size_t c = 0; c < kImageChannels; ++c) {
        const double grain = 0.03 * (2.0 * uniform01(rng) - 1.0);
        img[c * hw + i] = std::clamp(color[c] * brightness[i] + tex + grain, 0.0, 1.0);
      }
    }
  }
  return {Tensor(Shape{kImageChannels, height, width}, std::move(img)), LabelMap{height, width, std::move(label)}};
}

inline Tensor apply_domain(const Tensor& image, const DomainSpec& spec, Rng& rng) {
  if (image.rank() != 3 || image.dim(0) != kImageChannels) {
    throw ShapeError("apply_domain expects a 3×H×W image, got " + to_string(image.shape()));
  }
  const std::size_t hw = image.dim(1) * image.dim(2);
  const auto in = image.data();
  std::vector<double> out(in.size());
  for (std::size_t c = 0; c < kImageChannels; ++c) {
    for (std::size_t i = 0; i < hw; ++i) {
      const double v = std::clamp(in[c * hw + i], 0.0, 1.0);
      double r = spec.scale[c] * std::pow(v, spec.gamma) + spec.shift[c];
      if (spec.noise_std > 0.0) r += spec.noise_std * standard_normal(rng);
      out[c * hw + i] = std::clamp(r, 0.0, 1.0);
    }
  }
  return Tensor(image.shape(), std::move(out));
}

struct Dataset {
  std::size_t classes = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::string> ids;
  std::vector<SceneSample> samples;

  std::size_t size() const { return samples.size(); }
};

// Sample i draws its geometry from stream "<name>/geometry/i" and its domain
// noise from "<name>/noise/i", so datasets rendered under different domains
// from the same (seed, name) share label maps.
inline Dataset generate_dataset(std::uint64_t seed, const std::string& name, std::size_t count, std::size_t classes,
                                std::size_t height, std::size_t width, const DomainSpec& domain) {
  Dataset ds{classes, height, width, {}, {}};
  for (std::size_t i = 0; i < count; ++i) {
    Rng geometry = make_stream(seed, name + "/geometry/" + std::to_string(i));
    Rng noise = make_stream(seed, name + "/noise/" + std::to_string(i));
    SceneSample s = gen_scene(geometry, classes, height, width);
    s.image = apply_domain(s.image, domain, noise);
    std::ostringstream id;
    id << std::setw(6) << std::setfill('0') << i;
    ds.ids.push_back(id.str());
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DatasetError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json index;
  index["schema_version"] = kDatasetSchemaVersion;
  index["C"] = ds.classes;
  index["H"] = ds.height;
  index["W"] = ds.width;
  index["channels"] = kImageChannels;
  index["samples"] = ds.ids;
  {
    std::ofstream os(dir / "index.json", std::ios::binary);
    if (!os) throw DatasetError("cannot write " + (dir / "index.json").string());
    os << index.dump(2) << '\n';
  }
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::ofstream img(dir / ("img_" + ds.ids[i] + ".bin"), std::ios::binary);
    std::ofstream lbl(dir / ("lbl_" + ds.ids[i] + ".bin"), std::ios::binary);
    if (!img || !lbl) throw DatasetError("cannot write sample " + ds.ids[i] + " under " + dir.string());
    io::write_f64_le(img, ds.samples[i].image.data());
    const auto& labels = ds.samples[i].label.labels;
    lbl.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
    if (!img || !lbl) throw DatasetError("short write for sample " + ds.ids[i]);
  }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "index.json");
  if (!is) throw DatasetError("missing dataset index " + (dir / "index.json").string());
  nlohmann::json index;
  Dataset ds;
  try {
    index = nlohmann::json::parse(is);
    if (index.at("schema_version").get<int>() != kDatasetSchemaVersion) {
      throw DatasetError("unsupported dataset schema_version in " + dir.string());
    }
    for (const char* k : {"C", "H", "W"}) {
      if (!index.at(k).is_number_integer() || index.at(k) < 0) {
        throw DatasetError(std::string("dataset index field ") + k + " must be a non-negative integer");
      }
    }
    ds.classes = index.at("C").get<std::size_t>();
    ds.height = index.at("H").get<std::size_t>();
    ds.width = index.at("W").get<std::size_t>();
    ds.ids = index.at("samples").get<std::vector<std::string>>();
    if (index.value("channels", kImageChannels) != kImageChannels) throw DatasetError("dataset images must have 3 channels");
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError("malformed dataset index in " + dir.string() + ": " + e.what());
  }
  const std::size_t hw = ds.height * ds.width;
  for (const auto& id : ds.ids) {
    std::ifstream img(dir / ("img_" + id + ".bin"), std::ios::binary);
    std::ifstream lbl(dir / ("lbl_" + id + ".bin"), std::ios::binary);
    if (!img || !lbl) throw DatasetError("missing files for sample " + id + " in " + dir.string());
    std::vector<double> pixels(kImageChannels * hw);
    if (!io::read_f64_le(img, pixels)) throw DatasetError("truncated image for sample " + id);
    std::vector<std::uint8_t> labels(hw);
    if (!lbl.read(reinterpret_cast<char*>(labels.data()), static_cast<std::streamsize>(hw))) {
      throw DatasetError("truncated labels for sample " + id);
    }
    for (std::uint8_t l : labels) {
      if (l != kIgnoreLabel && l >= ds.classes) throw DatasetError("label out of range in sample " + id);
    }
    ds.samples.push_back({Tensor(Shape{kImageChannels, ds.height, ds.width}, std::move(pixels)),
                          LabelMap{ds.height, ds.width, std::move(labels)}});
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsReport {
  std::size_t classes = 0;
  std::vector<std::uint64_t> confusion;  // row = ground truth, column = prediction
  std::vector<double> iou;               // 0 for classes absent from ground truth
  std::vector<bool> present;             // class occurs in ground truth
  std::vector<std::uint64_t> pixel_counts;
  double miou = 0.0;
};

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}

  void add(std::span<const std::uint8_t> truth, std::span<const std::uint8_t> pred) {
    if (truth.size() != pred.size()) throw ShapeError("prediction and label sizes differ");
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (truth[i] == kIgnoreLabel) continue;
      if (truth[i] >= classes_ || pred[i] >= classes_) throw std::invalid_argument("class index out of range");
      ++counts_[truth[i] * classes_ + pred[i]];
    }
  }

  MetricsReport report() const {
    MetricsReport r;
    r.classes = classes_;
    r.confusion = counts_;
    r.iou.assign(classes_, 0.0);
    r.present.assign(classes_, false);
    r.pixel_counts.assign(classes_, 0);
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < classes_; ++c) {
      std::uint64_t gt = 0, pr = 0;
      for (std::size_t k = 0; k < classes_; ++k) {
        gt += counts_[c * classes_ + k];
        pr += counts_[k * classes_ + c];
      }
      const std::uint64_t tp = counts_[c * classes_ + c];
      r.pixel_counts[c] = gt;
      r.present[c] = gt > 0;
      const std::uint64_t uni = gt + pr - tp;
      r.iou[c] = uni > 0 ? static_cast<double>(tp) / static_cast<double>(uni) : 0.0;
      if (r.present[c]) {
        total += r.iou[c];
        ++n;
      }
    }
    r.miou = n > 0 ? total / static_cast<double>(n) : 0.0;
    return r;
  }

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

// Arg-max class per pixel of a 1×C×H×W probability tensor.
inline std::vector<std::uint8_t> argmax_labels(const Tensor& p) {
  if (p.rank() != 4 || p.dim(0) != 1) throw ShapeError("argmax expects 1×C×H×W, got " + to_string(p.shape()));
  const std::size_t c = p.dim(1), hw = p.dim(2) * p.dim(3);
  const auto v = p.data();
  std::vector<std::uint8_t> out(hw, 0);
  for (std::size_t i = 0; i < hw; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (v[k * hw + i] > v[best * hw + i]) best = k;
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

inline std::vector<std::uint8_t> predict_labels(const Segmentor& model, const Tensor& image) {
  const FeatureBundle out = model.forward(image, nullptr, Mode::Eval);
  const std::size_t factor = image.dim(image.rank() - 2) / out.p.dim(2);
  if (factor * out.p.dim(2) != image.dim(image.rank() - 2) || factor * out.p.dim(3) != image.dim(image.rank() - 1)) {
    throw ShapeError("image size is not an integer multiple of the prediction grid");
  }
  return argmax_labels(upsample_nearest(out.p, factor));
}

inline MetricsReport evaluate(const Segmentor& model, const Dataset& ds) {
  if (ds.samples.empty()) throw std::invalid_argument("evaluate on an empty dataset");
  if (ds.classes != model.config().classes) {
    throw std::invalid_argument("dataset has " + std::to_string(ds.classes) + " classes, model predicts " +
                                std::to_string(model.config().classes));
  }
  ConfusionMatrix cm(ds.classes);
  for (const auto& s : ds.samples) cm.add(s.label.labels, predict_labels(model, s.image));
  return cm.report();
}

}  // namespace osuda
