// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "locomt/harness.hpp"

using namespace locomt;
namespace fs = std::filesystem;

namespace {

class ScratchDir {
 public:
  ScratchDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("locomt_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  fs::path write(const std::string& name, const std::string& text) const {
    std::ofstream(path_ / name) << text;
    return path_ / name;
  }

 private:
  fs::path path_;
};

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(LOCOMT_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const std::string kSmallModel =
    "model.lengths = 3,2\n"
    "model.feature_dims = 2,3\n"
    "model.d = 4\n"
    "model.heads = 2\n"
    "model.layers = 2\n"
    "model.fusion_layers = 1\n"
    "model.frequency = 1,1\n"
    "check.samples = 1\n"
    "data.train_samples = 8\n"
    "data.test_samples = 4\n"
    "train.epochs = 2\n"
    "train.batch = 4\n"
    "seed = 3\n";

}  // namespace

TEST(Config, RoundTrip) {
  RunConfig c = parse_run_config(
      "model.lengths = 5, 6, 7\nmodel.feature_dims = 2,2,2\nmodel.heads = 4\n"
      "model.fusion_layers = 2\nmodel.frequency = 1,1,1,1\nmodel.frequency.2 = 0,2,1,1\n"
      "train.lr = 0.1\ntrain.clip_norm = 0\ndata.noise = 0.3333333333333333\n"
      "seed = 99  # trailing comment\n");
  EXPECT_EQ(c.clip_norm, 0.0);
  EXPECT_EQ(c.ffn_dim, 64u);
  EXPECT_EQ(c.fusion_plan()[1].frequency(3), (ViewFrequency{{0, 2, 1, 1}}));
  EXPECT_EQ(parse_run_config(serialize_run_config(c)), c);
  const RunConfig s = parse_run_config("model.strategy = bottleneck\nmodel.heads = 4\n"
                                       "model.fusion_layers = 2\nmodel.layers = 3\n");
  EXPECT_EQ(parse_run_config(serialize_run_config(s)), s);
  EXPECT_EQ(parse_run_config(serialize_run_config(RunConfig{})), RunConfig{});
}

TEST(Config, Rejections) {
  EXPECT_THROW(parse_run_config("model.colour = red\n"), ConfigError);
  EXPECT_THROW(parse_run_config("model.d = 16\nmodel.d = 8\n"), ConfigError);
  EXPECT_THROW(parse_run_config("model.frequency = 2,1\n"), ConfigError);   // 3 heads vs 2
  EXPECT_THROW(parse_run_config("model.d = x\n"), ConfigError);
  EXPECT_THROW(parse_run_config("train.clip_norm = -1\n"), ConfigError);
  EXPECT_THROW(parse_run_config("model.lengths = 3,4,5\nmodel.feature_dims = 2,2,2\n"
                                "model.strategy = spread\n"),
               ConfigError);
  EXPECT_THROW(parse_run_config("model.frequency = 1,1\nmodel.strategy = spread\n"), ConfigError);
  EXPECT_THROW(parse_run_config("model.frequency = 1,1\nmodel.fusion_layers = 3\n"), ConfigError);
  EXPECT_THROW(parse_run_config("model.fusion_layers = 1\n"), ConfigError);  // no views given
}

TEST(Cost, ExampleTableAndVerdict) {
  const auto r = harness::cmd_cost(
      parse_run_config("model.lengths = 4,4\nmodel.d = 2\nmodel.frequency = 1,1\n"
                       "model.bottleneck_tokens = 1\n"));
  EXPECT_EQ(r.exit_code, harness::kOk);
  EXPECT_NE(r.output.find("self,64\ncross,64\nmulti,128\nbottleneck,100\nlocomt,64\n"),
            std::string::npos)
      << r.output;
  EXPECT_NE(r.output.find("locomt<=self: yes (equal)"), std::string::npos);

  const auto s = harness::cmd_cost(parse_run_config(
      "model.lengths = 2,6\nmodel.d = 1\nmodel.heads = 1\nmodel.frequency = 0,1\n"));
  EXPECT_NE(s.output.find("self,40\n"), std::string::npos);
  EXPECT_EQ(s.exit_code, harness::kOk);
  EXPECT_NE(s.output.find("small_bottleneck_regime: no"), std::string::npos);

  const auto t = harness::cmd_cost(parse_run_config(
      "model.lengths = 2,6\nmodel.d = 1\nmodel.heads = 2\nmodel.frequency = 1,1\n"));
  EXPECT_NE(t.output.find("locomt,32\n"), std::string::npos);
}

TEST(Cost, ExitStatusAgreesWithOrderingOnFuzzedConfigs) {
  Rng rng(123);
  int violated = 0;
  for (int trial = 0; trial < 100; ++trial) {
    RunConfig c;
    const auto m = static_cast<std::size_t>(rng.uniform_int(2, 3));
    c.lengths.clear();
    for (std::size_t k = 0; k < m; ++k)
      c.lengths.push_back(static_cast<std::size_t>(rng.uniform_int(1, 12)));
    c.feature_dims.assign(m, 2);
    c.d = static_cast<std::size_t>(rng.uniform_int(1, 16));
    c.bottleneck_tokens = static_cast<std::size_t>(rng.uniform_int(1, 6));
    ViewFrequency f{std::vector<std::size_t>(pair_count(m) + 1)};
    for (auto& v : f.counts) v = static_cast<std::size_t>(rng.uniform_int(0, 3));
    f.counts[0] += 1;
    c.frequency = f;
    c.heads = f.heads();
    const auto r = harness::cmd_cost(c);
    const bool holds = verify_ordering(harness::cost_query(c)).chain_holds();
    EXPECT_EQ(r.exit_code, holds ? harness::kOk : harness::kViolated);
    violated += holds ? 0 : 1;
  }
  EXPECT_GT(violated, 0);  // the fuzz range reaches the large-B regime
  EXPECT_LT(violated, 100);
}

TEST(Mask, TextGrids) {
  const RunConfig self = parse_run_config("model.lengths = 2,2\nmodel.pattern = self\n");
  const auto r = harness::cmd_mask(self);
  EXPECT_EQ(r.output,
            "layer=2 head=1 view=self\n##..\n##..\n..##\n..##\n"
            "layer=2 head=2 view=self\n##..\n##..\n..##\n..##\n");

  const auto grids = harness::fusion_grids(parse_run_config("model.lengths = 2,2\n"
                                                            "model.frequency = 1,1\n"));
  ASSERT_EQ(grids.size(), 2u);
  EXPECT_NE(grids[0].text(), grids[1].text());
  EXPECT_EQ(grids[1].text(), "..##\n..##\n##..\n##..\n");

  const auto b = harness::fusion_grids(
      parse_run_config("model.lengths = 2,1\nmodel.pattern = bottleneck\n"));
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0].text(), "##.B\n##.B\n..#B\nBBBB\n");
  EXPECT_EQ(b[0].pgm().substr(0, 11), "P5\n4 4\n255\n");
  EXPECT_EQ(static_cast<unsigned char>(b[0].pgm()[11 + 3]), 128u);
}

TEST(Strategy, CsvMatchesExamples) {
  EXPECT_EQ(harness::cmd_strategy(Strategy::spread, 12, 4, 0).output,
            "layer,p_self,p_cross_12\n1,9,3\n2,6,6\n3,3,9\n4,0,12\n");
  EXPECT_EQ(harness::cmd_strategy(Strategy::bottleneck, 12, 4, 0).output,
            "layer,p_self,p_cross_12\n1,9,3\n2,6,6\n3,6,6\n4,9,3\n");
  EXPECT_EQ(harness::cmd_strategy(Strategy::alternating, 12, 4, 0).output,
            "layer,p_self,p_cross_12\n1,12,0\n2,0,12\n3,12,0\n4,0,12\n");
}

TEST(Dataset, DeterministicBytesAndRoundTrip) {
  const DatasetSpec spec{{3, 2}, {4, 1}, 50, 1.0, 0.5};
  const Dataset a = generate_parity_dataset(spec, 5);
  const std::string bytes = encode_dataset(a);
  EXPECT_EQ(bytes, encode_dataset(generate_parity_dataset(spec, 5)));
  EXPECT_NE(bytes, encode_dataset(generate_parity_dataset(spec, 6)));
  const Dataset b = decode_dataset(bytes);
  EXPECT_EQ(encode_dataset(b), bytes);
  EXPECT_THROW(decode_dataset(bytes.substr(0, bytes.size() - 1)), io::FormatError);
  EXPECT_THROW(decode_dataset("LCMTDATX"), io::FormatError);
}

TEST(Dataset, LabelHistogramIsBalanced) {
  const Dataset ds = generate_parity_dataset({{4, 4}, {4, 4}, 10000, 1.0, 1.0}, 77);
  std::size_t ones = 0;
  for (const auto& s : ds.samples) ones += s.label;
  EXPECT_LE(std::abs(static_cast<double>(ones) / 10000.0 - 0.5), 0.02);
}

TEST(Dataset, SingleModalityProbeIsNearChance) {
  // Logistic regression on mean-pooled features of one modality.
  const DatasetSpec spec{{8, 8}, {8, 8}, 6000, 1.0, 1.0};
  const Dataset ds = generate_parity_dataset(spec, 31);
  for (std::size_t k = 0; k < 2; ++k) {
    auto features = [&](const Sample& s) {
      std::vector<double> f(9, 0.0);
      for (std::size_t t = 0; t < 8; ++t)
        for (std::size_t j = 0; j < 8; ++j) f[j] += s.inputs[k](t, j) / 8.0;
      f[8] = 1.0;
      return f;
    };
    std::vector<double> w(9, 0.0);
    for (int epoch = 0; epoch < 50; ++epoch) {
      std::vector<double> g(9, 0.0);
      for (std::size_t i = 0; i < 4000; ++i) {
        const auto f = features(ds.samples[i]);
        double z = 0.0;
        for (std::size_t j = 0; j < 9; ++j) z += w[j] * f[j];
        const double err = 1.0 / (1.0 + std::exp(-z)) - static_cast<double>(ds.samples[i].label);
        for (std::size_t j = 0; j < 9; ++j) g[j] += err * f[j] / 4000.0;
      }
      for (std::size_t j = 0; j < 9; ++j) w[j] -= 0.5 * g[j];
    }
    std::size_t correct = 0;
    for (std::size_t i = 4000; i < 6000; ++i) {
      const auto f = features(ds.samples[i]);
      double z = 0.0;
      for (std::size_t j = 0; j < 9; ++j) z += w[j] * f[j];
      correct += (z > 0.0) == (ds.samples[i].label == 1) ? 1 : 0;
    }
    EXPECT_LE(static_cast<double>(correct) / 2000.0, 0.55) << "modality " << k;
  }
}

TEST(Cli, CostExitCodes) {
  ScratchDir dir;
  const fs::path log = dir.path() / "log.txt";
  EXPECT_EQ(run_cli("cost --config " + std::string(LOCOMT_SOURCE_DIR) +
                        "/configs/cost_4x4.cfg --out " + dir.path().string(),
                    log),
            0);
  EXPECT_EQ(io::read_file(dir.path() / "cost.csv"),
            "pattern,cost\nself,64\ncross,64\nmulti,128\nbottleneck,100\nlocomt,64\n"
            "gap_self_locomt,0\n");
  const auto big_b = dir.write("b.cfg", "model.lengths = 2,2\nmodel.frequency = 1,1\n"
                                        "model.bottleneck_tokens = 5\n");
  EXPECT_EQ(run_cli("cost --config " + big_b.string(), log), 1);
  EXPECT_NE(io::read_file(log).find("outside the B << L_i regime"), std::string::npos);
  const auto bad = dir.write("bad.cfg", "model.lengths = 4,4\nmodel.frequency = 2,1\n");
  EXPECT_EQ(run_cli("cost --config " + bad.string(), log), 2);
  EXPECT_NE(io::read_file(log).find("model.frequency"), std::string::npos);
  EXPECT_EQ(run_cli("cost --config " + (dir.path() / "missing.cfg").string(), log), 2);
  EXPECT_EQ(run_cli("frobnicate", log), 2);
  EXPECT_EQ(run_cli("cost", log), 2);
}

TEST(Cli, MaskAndStrategyOutputsAreStable) {
  ScratchDir a, b;
  const auto cfg = a.write("m.cfg", "model.lengths = 3,2\nmodel.frequency = 1,1\n");
  ASSERT_EQ(run_cli("mask --config " + cfg.string() + " --out " + a.path().string(),
                    a.path() / "log"), 0);
  ASSERT_EQ(run_cli("mask --config " + cfg.string() + " --out " + b.path().string(),
                    b.path() / "log"), 0);
  for (const char* f : {"masks.txt", "mask_1.pgm", "mask_2.pgm"})
    EXPECT_EQ(io::read_file(a.path() / f), io::read_file(b.path() / f)) << f;
  EXPECT_EQ(run_cli("strategy --kind spread --heads 12 --fusion-layers 4", a.path() / "s"), 0);
  EXPECT_EQ(io::read_file(a.path() / "s"), "layer,p_self,p_cross_12\n1,9,3\n2,6,6\n3,3,9\n4,0,12\n");
  EXPECT_EQ(run_cli("strategy --kind sideways", a.path() / "s"), 2);
}

TEST(Cli, GenDataIsByteIdenticalAcrossRuns) {
  ScratchDir a, b;
  const auto cfg = a.write("d.cfg", kSmallModel);
  ASSERT_EQ(run_cli("gen-data --config " + cfg.string() + " --out " + a.path().string(),
                    a.path() / "log"), 0);
  ASSERT_EQ(run_cli("gen-data --config " + cfg.string() + " --out " + b.path().string(),
                    b.path() / "log"), 0);
  EXPECT_EQ(io::read_file(a.path() / "dataset.lmds"), io::read_file(b.path() / "dataset.lmds"));
  ASSERT_EQ(run_cli("gen-data --config " + cfg.string() + " --seed 4 --out " + b.path().string(),
                    b.path() / "log"), 0);
  EXPECT_NE(io::read_file(a.path() / "dataset.lmds"), io::read_file(b.path() / "dataset.lmds"));

  // Training from the written file matches training on the generated data.
  const auto from_file = a.write("f.cfg", kSmallModel + "data.file = " +
                                              (a.path() / "dataset.lmds").string() + "\n");
  ASSERT_EQ(run_cli("train --config " + from_file.string() + " --out " + a.path().string(),
                    a.path() / "log"), 0);
  ASSERT_EQ(run_cli("train --config " + cfg.string() + " --out " + b.path().string(),
                    b.path() / "log"), 0);
  EXPECT_EQ(io::read_file(a.path() / "metrics.csv"), io::read_file(b.path() / "metrics.csv"));
  EXPECT_EQ(io::read_file(a.path() / "checkpoint.bin"), io::read_file(b.path() / "checkpoint.bin"));
}

TEST(Cli, GradcheckPassesAndCorruptionFails) {
  ScratchDir dir;
  const auto cfg = dir.write("g.cfg", kSmallModel);
  EXPECT_EQ(run_cli("gradcheck --config " + cfg.string(), dir.path() / "log"), 0);
  EXPECT_NE(io::read_file(dir.path() / "log").find("result=pass"), std::string::npos);
  EXPECT_EQ(run_cli("gradcheck --corrupt --config " + cfg.string(), dir.path() / "log"), 1);
  EXPECT_NE(io::read_file(dir.path() / "log").find("result=fail"), std::string::npos);
}

TEST(Cli, GradcheckMatrixCoversPatternsAndStrategies) {
  const RunConfig c = parse_run_config(kSmallModel);
  const auto m = harness::gradcheck_matrix(c);
  ASSERT_EQ(m.size(), 9u);
  const auto r = harness::cmd_gradcheck(c, false, true);
  EXPECT_EQ(r.exit_code, harness::kOk) << r.output;
}
