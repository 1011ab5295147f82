#pragma once

// Subcommand bodies shared by the osuda CLI and the acceptance suite. Each
// command reads its inputs from the locations a RunConfig names and
// overwrites its outputs, so reruns with identical inputs are byte-identical.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "osuda/adapt.hpp"
#include "osuda/benchdata.hpp"
#include "osuda/config.hpp"
#include "osuda/segmentor.hpp"

namespace osuda {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum ExitCode : int { kExitOk = 0, kExitInput = 2, kExitNumerical = 3 };

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> runs;
  std::optional<std::filesystem::path> out;
};

inline void apply(RunConfig& rc, const Overrides& o) {
  if (o.seed) rc.seed = *o.seed;
  if (o.runs) {
    if (*o.runs == 0) throw ConfigError("--runs must be positive");
    rc.protocol.max_runs = *o.runs;
  }
  if (o.out) rc.out = *o.out;
}

namespace detail {

inline std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("short write to " + path.string());
}

inline std::string iteration_header() { return "iter,lr,l_ce,l_pce,total,negative_conf_pixels\n"; }

inline std::string iteration_row(const IterationLog& l) {
  std::ostringstream os;
  os << l.iter << ',' << fixed(l.lr, 10) << ',' << fixed(l.loss.l_ce, 8) << ',' << fixed(l.loss.l_pce, 8) << ','
     << fixed(l.loss.total, 8) << ',' << l.negative_conf_pixels << '\n';
  return os.str();
}

inline std::string iou_header(std::size_t classes) {
  std::string s;
  for (std::size_t c = 0; c < classes; ++c) s += ",iou_" + std::to_string(c);
  return s + ",miou";
}

inline std::string iou_cells(const MetricsReport& m) {
  std::string s;
  for (std::size_t c = 0; c < m.classes; ++c) s += "," + (m.present[c] ? fixed(m.iou[c]) : std::string());
  return s + "," + fixed(m.miou);
}

inline Dataset load_input(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir)) throw DatasetError("missing dataset " + dir.string() + " (run gen-data first)");
  return load_dataset(dir);
}

inline Segmentor load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError("missing checkpoint " + path.string() + " (run pretrain first)");
  return Segmentor::load(path.string());
}

inline void check_compatible(const Segmentor& model, const Dataset& ds, const std::filesystem::path& where) {
  if (model.config().classes != ds.classes) {
    throw DatasetError("dataset " + where.string() + " has " + std::to_string(ds.classes) +
                       " classes, checkpoint predicts " + std::to_string(model.config().classes));
  }
}

}  // namespace detail

// --- gen-data ---------------------------------------------------------------

struct GenDataResult {
  std::size_t source = 0;
  std::size_t eval_target = 0;
  std::size_t adapt_target = 0;
  nlohmann::json manifest;
};

inline GenDataResult cmd_gen_data(const RunConfig& rc) {
  validate(rc);
  const auto& d = rc.data;
  const std::uint64_t seed = rc.data_seed();
  // Distinct stream names keep the eval and one-shot pools disjoint.
  const Dataset source = generate_dataset(seed, "source", d.source_count, d.classes, d.height, d.width, d.source_domain);
  const Dataset eval = generate_dataset(seed, "eval_target", d.eval_count, d.classes, d.height, d.width, d.target_domain);
  const Dataset adapt = generate_dataset(seed, "adapt_target", d.adapt_count, d.classes, d.height, d.width, d.target_domain);
  detail::ensure_dir(rc.data_root());
  save_dataset(source, rc.source_dir());
  save_dataset(eval, rc.eval_dir());
  save_dataset(adapt, rc.adapt_dir());

  GenDataResult r{source.size(), eval.size(), adapt.size(), {}};
  r.manifest = {{"schema_version", kDatasetSchemaVersion},
                {"seed", rc.seed},
                {"classes", d.classes},
                {"height", d.height},
                {"width", d.width},
                {"datasets",
                 {{"source", {{"path", rc.source_dir().string()}, {"samples", r.source}}},
                  {"eval_target", {{"path", rc.eval_dir().string()}, {"samples", r.eval_target}}},
                  {"adapt_target", {{"path", rc.adapt_dir().string()}, {"samples", r.adapt_target}}}}}};
  detail::write_text(rc.data_root() / "manifest.json", r.manifest.dump(2) + "\n");
  return r;
}

// --- pretrain ---------------------------------------------------------------

inline Segmentor cmd_pretrain(const RunConfig& rc) {
  validate(rc);
  const Dataset source = detail::load_input(rc.source_dir());
  if (source.classes != rc.data.classes) throw DatasetError("source dataset class count differs from the config");
  AdaptConfig cfg = rc.adapt;
  cfg.seed = rc.pretrain_seed();
  std::string log = detail::iteration_header();
  Segmentor model = pretrain_source(cfg, rc.model, source, [&](const IterationLog& l) { log += detail::iteration_row(l); });
  detail::ensure_dir(rc.checkpoint_path().has_parent_path() ? rc.checkpoint_path().parent_path() : ".");
  model.save(rc.checkpoint_path().string());
  detail::write_text(rc.out / "pretrain_log.csv", log);
  return model;
}

// --- eval -------------------------------------------------------------------

inline MetricsReport cmd_eval(const RunConfig& rc, const std::filesystem::path& checkpoint,
                              const std::filesystem::path& dataset, const std::filesystem::path& csv) {
  const Segmentor model = detail::load_checkpoint(checkpoint);
  const Dataset ds = detail::load_input(dataset);
  detail::check_compatible(model, ds, dataset);
  const MetricsReport m = evaluate(model, ds);
  std::string text = "checkpoint,dataset" + detail::iou_header(m.classes) + "\n";
  text += checkpoint.string() + "," + dataset.string() + detail::iou_cells(m) + "\n";
  detail::write_text(csv.empty() ? rc.out / "eval.csv" : csv, text);
  return m;
}

inline MetricsReport cmd_eval(const RunConfig& rc) {
  return cmd_eval(rc, rc.checkpoint_path(), rc.eval_dir(), rc.out / "eval.csv");
}

// --- adapt ------------------------------------------------------------------

struct AdaptSummary {
  MetricsReport source_only;
  std::vector<RunRecord> runs;
  double mean_miou = 0.0;
  std::filesystem::path aggregate_csv;
};

inline std::string aggregate_csv(const std::vector<RunRecord>& runs, std::size_t classes) {
  std::string text = "run_id,image_id,seed" + detail::iou_header(classes) + "\n";
  std::vector<double> sum(classes, 0.0);
  std::vector<std::size_t> count(classes, 0);
  double miou = 0.0;
  for (const auto& r : runs) {
    text += std::to_string(r.run_id) + "," + r.image_id + "," + std::to_string(r.seed) + detail::iou_cells(r.metrics) + "\n";
    for (std::size_t c = 0; c < classes; ++c) {
      if (!r.metrics.present[c]) continue;
      sum[c] += r.metrics.iou[c];
      ++count[c];
    }
    miou += r.metrics.miou;
  }
  text += "mean,,";
  for (std::size_t c = 0; c < classes; ++c) {
    text += "," + (count[c] > 0 ? detail::fixed(sum[c] / static_cast<double>(count[c])) : std::string());
  }
  text += "," + detail::fixed(runs.empty() ? 0.0 : miou / static_cast<double>(runs.size())) + "\n";
  return text;
}

using ProgressSink = std::function<void(const std::string&)>;

inline AdaptSummary cmd_adapt(const RunConfig& rc, const ProgressSink& progress = {}) {
  validate(rc);
  const Segmentor pretrained = detail::load_checkpoint(rc.checkpoint_path());
  const Dataset source = detail::load_input(rc.source_dir());
  const Dataset targets = detail::load_input(rc.adapt_dir());
  const Dataset eval = detail::load_input(rc.eval_dir());
  for (const auto& [ds, dir] : {std::pair{&source, rc.source_dir()}, {&targets, rc.adapt_dir()}, {&eval, rc.eval_dir()}}) {
    detail::check_compatible(pretrained, *ds, dir);
  }
  const std::filesystem::path dir = rc.out / "adapt";
  detail::ensure_dir(dir);

  AdaptSummary summary;
  summary.source_only = evaluate(pretrained, eval);
  detail::write_text(dir / "source_only.csv", "checkpoint" + detail::iou_header(eval.classes) + "\n" +
                                                  rc.checkpoint_path().string() + detail::iou_cells(summary.source_only) +
                                                  "\n");
  ProtocolSpec spec = rc.protocol;
  spec.root_seed = rc.protocol_seed();
  summary.runs = run_protocol(pretrained, source, targets, eval, rc.adapt, spec, [&](const RunRecord& r, const AdaptResult& res) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "run_%03zu", r.run_id);
    std::string log = detail::iteration_header();
    for (const auto& l : res.log) log += detail::iteration_row(l);
    detail::write_text(dir / (std::string(stem) + "_iters.csv"), log);
    detail::write_text(dir / (std::string(stem) + ".csv"), aggregate_csv({r}, eval.classes));
    res.model.save((dir / (std::string(stem) + ".ckpt")).string());
    if (progress) {
      progress("run " + std::to_string(r.run_id) + " image " + r.image_id + " seed " + std::to_string(r.seed) + " miou " +
               detail::fixed(r.metrics.miou, 4));
    }
  });
  double total = 0.0;
  for (const auto& r : summary.runs) total += r.metrics.miou;
  summary.mean_miou = total / static_cast<double>(summary.runs.size());
  summary.aggregate_csv = dir / "aggregate.csv";
  detail::write_text(summary.aggregate_csv, aggregate_csv(summary.runs, eval.classes));
  return summary;
}

// --- ablate -----------------------------------------------------------------

inline std::vector<AblationCell> ablation_grid(const RunConfig& rc) {
  const std::size_t full = rc.model.output_extent(rc.data.height);
  std::vector<std::size_t> patches;
  for (std::size_t p : rc.ablation.patch_sizes) patches.push_back(p == 0 ? full : p);
  auto cells = default_ablation_grid(rc.adapt, patches);
  for (std::size_t i = 0, k = 0; i < cells.size(); ++i) {
    if (cells[i].table != "patch") continue;
    if (rc.ablation.patch_sizes[k++] == 0) cells[i].name = "full";
  }
  return cells;
}

inline std::vector<AblationSummary> cmd_ablate(const RunConfig& rc, const ProgressSink& progress = {}) {
  validate(rc);
  const Segmentor pretrained = detail::load_checkpoint(rc.checkpoint_path());
  const Dataset source = detail::load_input(rc.source_dir());
  const Dataset targets = detail::load_input(rc.adapt_dir());
  const Dataset eval = detail::load_input(rc.eval_dir());
  detail::check_compatible(pretrained, eval, rc.eval_dir());
  ProtocolSpec spec{rc.protocol_seed(), rc.ablation.picks, rc.ablation.repeats, 0};

  std::string runs_csv = "table,cell,run_id,image_id,seed" + detail::iou_header(eval.classes) + "\n";
  const auto summaries =
      ablation_suite(ablation_grid(rc), pretrained, source, targets, eval, spec, [&](const AblationCell& c, const RunRecord& r) {
        runs_csv += c.table + "," + c.name + "," + std::to_string(r.run_id) + "," + r.image_id + "," + std::to_string(r.seed) +
                    detail::iou_cells(r.metrics) + "\n";
        if (progress) progress(c.table + "/" + c.name + " run " + std::to_string(r.run_id) + " miou " + detail::fixed(r.metrics.miou, 4));
      });
  const std::filesystem::path dir = rc.out / "ablation";
  detail::ensure_dir(dir);
  detail::write_text(dir / "runs.csv", runs_csv);
  for (const char* table : {"loss", "mixing", "patch"}) {
    std::string text = "cell,runs,mean_miou,std_miou\n";
    for (const auto& s : summaries) {
      if (s.table != table) continue;
      text += s.name + "," + std::to_string(s.mious.size()) + "," + detail::fixed(s.mean) + "," + detail::fixed(s.stddev) + "\n";
    }
    detail::write_text(dir / (std::string(table) + ".csv"), text);
  }
  return summaries;
}

// Maps failures to the CLI exit-code contract and prints the reason.
inline int run_guarded(const std::function<void()>& body, std::ostream& err) {
  try {
    body();
    return kExitOk;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::domain_error& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  }
}

}  // namespace osuda
