#include "cli.hpp"
#include "saeprobe/dataset.hpp"
#include "saeprobe/experiment.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using namespace saeprobe;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& rel) const { return (path / rel).string(); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

Run gen_small(const TempDir& dir, const std::string& seed = "1") {
  return run({"gen-synth", "--dim", "8", "--atoms", "16", "--active", "2", "--n-train-sae", "200", "--n-train-probe", "100",
              "--n-validation", "0", "--n-test", "100", "--seed", seed, "--quiet", "--out", dir / "data"});
}

}  // namespace

TEST(Cli, DeriveK) {
  const auto r = run({"derive-k", "--s", "0.05", "--dim", "128"});
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "7\n");
  EXPECT_EQ(run({"derive-k", "--s", "1.5", "--dim", "128"}).code, 1);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({"derive-k", "--s", "0.5", "--dim", "8", "--bogus"}).code, 1);
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"no-such-command"}).code, 1);
  EXPECT_EQ(run({"train-sae", "--data", "x"}).code, 1);
}

TEST(Cli, HelpListsFormats) {
  const auto r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  const auto text = r.out + r.err;
  for (const char* word : {"SPRB", "SPRF", "labels", "manifest", "sweep", "Exit codes"})
    EXPECT_NE(text.find(word), std::string::npos) << word;
}

TEST(Cli, GenSynthDeterministicUnderSeed) {
  TempDir a("saeprobe_cli_gen_a"), b("saeprobe_cli_gen_b");
  ASSERT_EQ(gen_small(a).code, 0);
  ASSERT_EQ(gen_small(b).code, 0);
  EXPECT_EQ(slurp(a / "data/embeddings.sprb"), slurp(b / "data/embeddings.sprb"));
  EXPECT_EQ(slurp(a / "data/labels.csv"), slurp(b / "data/labels.csv"));
  EXPECT_TRUE(fs::exists(a / "data/truth.json"));
  ASSERT_EQ(gen_small(b, "2").code, 0);
  EXPECT_NE(slurp(a / "data/embeddings.sprb"), slurp(b / "data/embeddings.sprb"));
  const auto ds = data::read_dataset(a / "data/embeddings.sprb", a / "data/labels.csv");
  EXPECT_EQ(ds.size(), 400u);
  EXPECT_EQ(ds.dim(), 8u);
}

TEST(Cli, PipelineTrainEncodeProbeEval) {
  TempDir dir("saeprobe_cli_chain");
  ASSERT_EQ(gen_small(dir).code, 0);
  const auto data = dir / "data/embeddings.sprb", labels = dir / "data/labels.csv";
  auto r = run({"train-sae", "--data", data, "--labels", labels, "--q", "4", "--s", "0.25", "--epochs", "5", "--batch-size",
                "64", "--lr", "1e-3", "--quiet", "--out", dir / "sae"});
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_TRUE(fs::exists(dir / "sae/sae.ckpt"));
  const auto log = nlohmann::json::parse(slurp(dir / "sae/train_log.json"));
  EXPECT_FALSE(log.empty());

  r = run({"encode", "--checkpoint", dir / "sae/sae.ckpt", "--data", data, "--kind", "magnitude", "--out", dir / "mag.sprb"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("event=wrote"), std::string::npos);
  const auto feats = data::read_vectors(dir / "mag.sprb");
  EXPECT_EQ(feats.rows(), 400);
  EXPECT_EQ(feats.cols(), 2);

  r = run({"train-probe", "--features", dir / "mag.sprb", "--labels", labels, "--out", dir / "probe.json"});
  ASSERT_EQ(r.code, 0) << r.err;
  r = run({"eval", "--probe", dir / "probe.json", "--features", dir / "mag.sprb", "--labels", labels, "--out",
           dir / "eval.json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const double printed = std::stod(r.out.substr(r.out.find_first_of("0123456789")));
  EXPECT_GT(printed, 0.0);
  const auto eval = nlohmann::json::parse(slurp(dir / "eval.json"));
  EXPECT_GE(eval["macro_f1"].get<double>(), 0.0);
  EXPECT_LE(eval["macro_f1"].get<double>(), 1.0);

  r = run({"density", "--checkpoint", dir / "sae/sae.ckpt", "--data", data, "--labels", labels, "--groups", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("group,density\n0,", 0), 0u);
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 5);
}

TEST(Cli, BothOrNeitherLatentSizeIsUsageError) {
  TempDir dir("saeprobe_cli_dz");
  ASSERT_EQ(gen_small(dir).code, 0);
  const auto data = dir / "data/embeddings.sprb", labels = dir / "data/labels.csv";
  EXPECT_EQ(run({"train-sae", "--data", data, "--labels", labels, "--q", "4", "--dz", "32", "--k", "2", "--quiet", "--out",
                 dir / "sae"}).code,
            1);
  EXPECT_EQ(run({"train-sae", "--data", data, "--labels", labels, "--k", "2", "--quiet", "--out", dir / "sae"}).code, 1);
}

TEST(Cli, DivergentTrainingIsNumericError) {
  TempDir dir("saeprobe_cli_nan");
  ASSERT_EQ(gen_small(dir).code, 0);
  EXPECT_EQ(run({"train-sae", "--data", dir / "data/embeddings.sprb", "--labels", dir / "data/labels.csv", "--q", "2", "--k",
                 "2", "--epochs", "3", "--lr", "1e30", "--quiet", "--out", dir / "sae"}).code,
            3);
}

TEST(Cli, BadMagicIsFormatError) {
  TempDir dir("saeprobe_cli_magic");
  spit(dir.path / "bad.sprb", "NOPE0000000000000000");
  spit(dir.path / "labels.csv", "index,label,split\n0,0,test\n");
  const auto r = run({"sweep", "--data", dir / "bad.sprb", "--labels", dir / "labels.csv", "--out", dir / "out"});
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(r.err.empty());
  EXPECT_EQ(run({"pool", "--frames", dir / "bad.sprb"}).code, 2);
  EXPECT_EQ(run({"report", "--in", dir / "missing.json", "--format", "summary"}).code, 2);
}

TEST(Cli, PoolFramesAndManifest) {
  TempDir dir("saeprobe_cli_pool");
  data::FrameMatrix a{RowMatrixF(2, 3)}, b{RowMatrixF(1, 3)};
  a.frames << 1, 2, 3, 3, 4, 5;
  b.frames << -1, 0, 0.5f;
  data::write_frames(a, dir.path / "a.sprf");
  data::write_frames(b, dir.path / "b.sprf");

  auto r = run({"pool", "--frames", dir / "a.sprf"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "2\n3\n4\n");

  spit(dir.path / "m.csv", "file,label,split\na.sprf,0,test\nb.sprf,1,test\nb.sprf,0,train_probe\na.sprf,1,train_probe\n");
  r = run({"pool", "--manifest", dir / "m.csv", "--source-id", "clips", "--out", dir / "pooled"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ds = data::read_dataset(dir / "pooled/embeddings.sprb", dir / "pooled/labels.csv");
  ASSERT_EQ(ds.size(), 4u);
  EXPECT_EQ(ds.vectors(0, 1), 3.0f);
  EXPECT_EQ(ds.vectors(1, 2), 0.5f);
  EXPECT_EQ(ds.vectors(2, 0), -1.0f);
  EXPECT_EQ(ds.labels, (std::vector<std::uint8_t>{0, 1, 0, 1}));
  EXPECT_EQ(ds.splits[1], data::Split::test);
  EXPECT_EQ(ds.splits[2], data::Split::train_probe);
  EXPECT_EQ(ds.source_id, "clips");

  EXPECT_EQ(run({"pool", "--manifest", dir / "m.csv"}).code, 1);
  EXPECT_EQ(run({"pool"}).code, 1);
}

TEST(Cli, SweepWritesReportAndReportSubcommandReemits) {
  TempDir dir("saeprobe_cli_sweep");
  ASSERT_EQ(gen_small(dir).code, 0);
  spit(dir.path / "cfg.json",
       R"({"latent_ratios":[2],"sparsities":[0.5,0.25],"feature_kinds":["position","magnitude"],
           "train":{"epochs":3,"batch_size":64,"learning_rate":0.001},"slow_epochs":null,"density_groups":4})");
  const auto r = run({"sweep", "--config", dir / "cfg.json", "--data", dir / "data/embeddings.sprb", "--labels",
                      dir / "data/labels.csv", "--seed", "4", "--quiet", "--out", dir / "out"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"report.json", "cells.csv", "density.csv", "summary.md", "sweep_config.json"})
    EXPECT_TRUE(fs::exists(dir.path / "out" / f)) << f;
  const auto cells = experiment::parse_cells_csv(slurp(dir.path / "out/cells.csv"));
  EXPECT_EQ(cells.size(), 4u);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir.path / "out/sweep_config.json"))["seed"].get<std::uint64_t>(), 4u);

  auto rep = run({"report", "--in", dir / "out/report.json", "--format", "csv", "--out", dir / "again"});
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_EQ(slurp(dir.path / "again/cells.csv"), slurp(dir.path / "out/cells.csv"));
  EXPECT_EQ(slurp(dir.path / "again/density.csv"), slurp(dir.path / "out/density.csv"));
  rep = run({"report", "--in", dir / "out/report.json", "--format", "summary"});
  ASSERT_EQ(rep.code, 0);
  EXPECT_EQ(rep.out, slurp(dir.path / "out/summary.md"));
  EXPECT_EQ(run({"report", "--in", dir / "out/report.json", "--format", "xml", "--out", dir / "x"}).code, 1);
}
