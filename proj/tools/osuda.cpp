// osuda: command-line driver for data generation, pretraining, one-shot
// adaptation, evaluation and ablations.

#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "osuda/commands.hpp"

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t runs = 0;
  std::string checkpoint;
  std::string dataset;
  std::string csv;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "RunConfig JSON file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "output directory (overrides the config)");
  cmd->add_option("--seed", f.seed, "root seed (overrides the config)");
  cmd->add_option("--runs", f.runs, "cap on protocol runs");
}

osuda::RunConfig load(const Flags& f, const CLI::App* cmd) {
  osuda::RunConfig rc = osuda::load_run_config(f.config);
  osuda::Overrides o;
  if (cmd->count("--seed") > 0) o.seed = f.seed;
  if (cmd->count("--runs") > 0) o.runs = f.runs;
  if (!f.out.empty()) o.out = f.out;
  osuda::apply(rc, o);
  osuda::validate(rc);
  return rc;
}

void print_report(const osuda::MetricsReport& m) {
  for (std::size_t c = 0; c < m.classes; ++c) {
    std::cout << "  class " << c << "  iou " << (m.present[c] ? osuda::detail::fixed(m.iou[c], 4) : "-") << '\n';
  }
  std::cout << "  miou " << osuda::detail::fixed(m.miou, 4) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"One-shot unsupervised domain adaptation on a synthetic segmentation benchmark"};
  app.require_subcommand(1);
  Flags f;

  auto* gen = app.add_subcommand("gen-data", "write source, eval-target and one-shot target datasets");
  auto* pre = app.add_subcommand("pretrain", "train the source-only checkpoint");
  auto* ada = app.add_subcommand("adapt", "run the one-shot adaptation protocol");
  auto* evl = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  auto* abl = app.add_subcommand("ablate", "run the loss, mixing and patch-size ablations");
  for (auto* cmd : {gen, pre, ada, evl, abl}) add_common(cmd, f);
  evl->add_option("--checkpoint", f.checkpoint, "checkpoint to evaluate (default: pretrained)");
  evl->add_option("--dataset", f.dataset, "dataset directory (default: eval target)");
  evl->add_option("--csv", f.csv, "metrics CSV path (default: <out>/eval.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : osuda::kExitInput;
  }

  auto log = [](const std::string& line) { std::cout << line << std::endl; };
  return osuda::run_guarded(
      [&] {
        if (gen->parsed()) {
          const auto rc = load(f, gen);
          const auto r = osuda::cmd_gen_data(rc);
          std::cout << r.manifest.dump(2) << '\n';
        } else if (pre->parsed()) {
          const auto rc = load(f, pre);
          osuda::cmd_pretrain(rc);
          std::cout << "wrote " << rc.checkpoint_path().string() << '\n';
        } else if (ada->parsed()) {
          const auto rc = load(f, ada);
          const auto s = osuda::cmd_adapt(rc, log);
          std::cout << "source-only miou " << osuda::detail::fixed(s.source_only.miou, 4) << ", adapted mean miou "
                    << osuda::detail::fixed(s.mean_miou, 4) << " over " << s.runs.size() << " runs\n"
                    << "wrote " << s.aggregate_csv.string() << '\n';
        } else if (evl->parsed()) {
          const auto rc = load(f, evl);
          const std::filesystem::path ckpt = f.checkpoint.empty() ? rc.checkpoint_path() : std::filesystem::path(f.checkpoint);
          const std::filesystem::path ds = f.dataset.empty() ? rc.eval_dir() : std::filesystem::path(f.dataset);
          print_report(osuda::cmd_eval(rc, ckpt, ds, f.csv));
        } else if (abl->parsed()) {
          const auto rc = load(f, abl);
          for (const auto& s : osuda::cmd_ablate(rc, log)) {
            std::cout << s.table << '/' << s.name << "  mean " << osuda::detail::fixed(s.mean, 4) << "  std "
                      << osuda::detail::fixed(s.stddev, 4) << '\n';
          }
        }
      },
      std::cerr);
}
