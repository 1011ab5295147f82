#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "osuda/commands.hpp"

using namespace osuda;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

nlohmann::json tiny_json(const fs::path& out) {
  return {{"schema_version", kConfigSchemaVersion},
          {"seed", 11},
          {"out", out.string()},
          {"data", {{"height", 32}, {"width", 32}, {"source_count", 16}, {"eval_count", 4}, {"adapt_count", 2}}},
          {"model", {{"widths", {4, 8, 8, 8}}}},
          {"pretrain", {{"iters", 200}}},
          {"adapt", {{"max_iters", 3}, {"patch_size", 2}}},
          {"protocol", {{"picks", 2}, {"repeats", 1}}},
          {"ablation", {{"patch_sizes", {2, 0}}, {"picks", 1}, {"repeats", 1}}}};
}

class Commands : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("osuda_commands_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    rc_ = run_config_from_json(tiny_json(root_ / "run"));
    cmd_gen_data(rc_);
    cmd_pretrain(rc_);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static fs::path root_;
  static RunConfig rc_;
};

fs::path Commands::root_;
RunConfig Commands::rc_;

int shell(const std::string& cmd) {
  const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_F(Commands, GenDataWritesEveryPool) {
  for (const auto& dir : {rc_.source_dir(), rc_.eval_dir(), rc_.adapt_dir()}) {
    EXPECT_TRUE(fs::exists(dir / "index.json")) << dir;
  }
  EXPECT_EQ(load_dataset(rc_.source_dir()).size(), 16u);
  EXPECT_EQ(load_dataset(rc_.eval_dir()).size(), 4u);
  EXPECT_EQ(load_dataset(rc_.adapt_dir()).size(), 2u);
  const auto manifest = nlohmann::json::parse(slurp(rc_.data_root() / "manifest.json"));
  EXPECT_EQ(manifest["datasets"]["adapt_target"]["samples"], 2);
}

TEST_F(Commands, GenDataRerunIsByteIdentical) {
  RunConfig again = rc_;
  again.out = root_ / "again";
  cmd_gen_data(again);
  for (const auto& entry : fs::directory_iterator(rc_.eval_dir())) {
    EXPECT_EQ(slurp(entry.path()), slurp(again.eval_dir() / entry.path().filename())) << entry.path();
  }
  RunConfig other = again;
  other.seed = 12;
  cmd_gen_data(other);
  const std::string first = "img_" + load_dataset(rc_.eval_dir()).ids[0] + ".bin";
  EXPECT_NE(slurp(rc_.eval_dir() / first), slurp(other.eval_dir() / first));
}

TEST_F(Commands, PretrainedBeatsRandomInitOnSource) {
  const MetricsReport trained = cmd_eval(rc_, rc_.checkpoint_path(), rc_.source_dir(), root_ / "trained.csv");
  Rng rng(1);
  Segmentor::initialize(rc_.model, rng).save((root_ / "random.ckpt").string());
  const MetricsReport random = cmd_eval(rc_, root_ / "random.ckpt", rc_.source_dir(), root_ / "random.csv");
  EXPECT_GT(trained.miou, random.miou);
  EXPECT_EQ(line_count(root_ / "trained.csv"), 2u);
  EXPECT_EQ(line_count(rc_.out / "pretrain_log.csv"), 201u);
}

TEST_F(Commands, AdaptWritesRunsAndAggregate) {
  RunConfig rc = rc_;
  rc.out = root_ / "adapt_run";
  rc.checkpoint = rc_.checkpoint_path();
  rc.data_dir = rc_.data_root();
  const AdaptSummary s = cmd_adapt(rc);
  ASSERT_EQ(s.runs.size(), 2u);
  EXPECT_EQ(line_count(s.aggregate_csv), 1u + 2u + 1u);
  for (const char* f : {"source_only.csv", "run_000.csv", "run_000_iters.csv", "run_000.ckpt", "run_001.ckpt"}) {
    EXPECT_TRUE(fs::exists(rc.out / "adapt" / f)) << f;
  }
  EXPECT_EQ(line_count(rc.out / "adapt" / "run_001_iters.csv"), 1u + 3u);
  const std::string first = slurp(s.aggregate_csv);
  cmd_adapt(rc);
  EXPECT_EQ(slurp(s.aggregate_csv), first);
}

TEST_F(Commands, AblateWritesEveryTable) {
  RunConfig rc = rc_;
  rc.out = root_ / "ablate_run";
  rc.checkpoint = rc_.checkpoint_path();
  rc.data_dir = rc_.data_root();
  rc.adapt.max_iters = 1;
  const auto summaries = cmd_ablate(rc);
  EXPECT_EQ(summaries.size(), 3u + 5u + 2u);
  EXPECT_EQ(line_count(rc.out / "ablation" / "loss.csv"), 4u);
  EXPECT_EQ(line_count(rc.out / "ablation" / "mixing.csv"), 6u);
  EXPECT_EQ(line_count(rc.out / "ablation" / "runs.csv"), 1u + summaries.size());
  EXPECT_NE(slurp(rc.out / "ablation" / "patch.csv").find("\nfull,1,"), std::string::npos);
}

TEST(AggregateCsv, BlankCellsForAbsentClassesAndMeanRow) {
  RunRecord a{0, "img_a", 0, 5, {}};
  a.metrics.classes = 2;
  a.metrics.iou = {0.5, 0.0};
  a.metrics.present = {true, false};
  a.metrics.miou = 0.5;
  RunRecord b = a;
  b.run_id = 1;
  b.metrics.iou = {0.25, 1.0};
  b.metrics.present = {true, true};
  b.metrics.miou = 0.625;
  EXPECT_EQ(aggregate_csv({a, b}, 2),
            "run_id,image_id,seed,iou_0,iou_1,miou\n"
            "0,img_a,5,0.500000,,0.500000\n"
            "1,img_a,5,0.250000,1.000000,0.625000\n"
            "mean,,,0.375000,1.000000,0.562500\n");
}

TEST(RunGuarded, MapsFailuresToExitCodes) {
  std::ostringstream err;
  EXPECT_EQ(run_guarded([] {}, err), kExitOk);
  EXPECT_EQ(run_guarded([] { throw NumericalError("loss is nan", 4); }, err), kExitNumerical);
  EXPECT_EQ(run_guarded([] { throw ConfigError("bad"); }, err), kExitInput);
  EXPECT_EQ(run_guarded([] { throw DatasetError("bad"); }, err), kExitInput);
  EXPECT_NE(err.str().find("loss is nan"), std::string::npos);
}

TEST(RunGuarded, MissingInputsAreInputErrors) {
  RunConfig rc = run_config_from_json(tiny_json(fs::temp_directory_path() / "osuda_missing_inputs"));
  std::ostringstream err;
  EXPECT_EQ(run_guarded([&] { cmd_pretrain(rc); }, err), kExitInput);
  EXPECT_EQ(run_guarded([&] { cmd_adapt(rc); }, err), kExitInput);
  EXPECT_EQ(run_guarded([&] { cmd_eval(rc); }, err), kExitInput);
}

TEST(RunGuarded, DivergentPretrainingIsNumerical) {
  const fs::path out = fs::temp_directory_path() / ("osuda_diverge_" + std::to_string(::getpid()));
  auto j = tiny_json(out);
  j["pretrain"] = {{"iters", 50}, {"lr", 1e12}};
  const RunConfig rc = run_config_from_json(j);
  cmd_gen_data(rc);
  std::ostringstream err;
  EXPECT_EQ(run_guarded([&] { cmd_pretrain(rc); }, err), kExitNumerical) << err.str();
  fs::remove_all(out);
}

TEST(Cli, ExitCodes) {
  const std::string cli = OSUDA_CLI_PATH;
  const fs::path dir = fs::temp_directory_path() / ("osuda_cli_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const fs::path cfg = dir / "config.json";
  std::ofstream(cfg) << tiny_json(dir / "run").dump();
  EXPECT_EQ(shell(cli + " --help"), 0);
  EXPECT_EQ(shell(cli), kExitInput);
  EXPECT_EQ(shell(cli + " eval --config " + (dir / "absent.json").string()), kExitInput);
  EXPECT_EQ(shell(cli + " eval --config " + cfg.string()), kExitInput);
  EXPECT_EQ(shell(cli + " gen-data --config " + cfg.string()), kExitOk);
  EXPECT_TRUE(fs::exists(dir / "run" / "data" / "manifest.json"));
  const fs::path bad = dir / "bad.json";
  std::ofstream(bad) << R"({"schema_version": 1, "data": {"classes": 1}})";
  EXPECT_EQ(shell(cli + " gen-data --config " + bad.string()), kExitInput);
  fs::remove_all(dir);
}
