// Integration tests that drive the command-line binary end to end.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>

#include "urbanmsr/flow.hpp"
#include "urbanmsr/train.hpp"

using namespace umsr;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
};

RunResult run_cli(const std::string& args) {
  std::string cmd = std::string(UMSR_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  EXPECT_NE(pipe, nullptr);
  RunResult r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof(buf), pipe)) r.out.append(buf, n);
  int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = (fs::temp_directory_path() / "umsr_cli_test").string();
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    // Small, fast configuration shared by most tests.
    std::ofstream cfg(dir_ + "/tiny.json");
    cfg << R"({
      "data": { "coarse_h": 4, "coarse_w": 4, "frames": 48, "slots_per_day": 8 },
      "pretrain": { "epochs": 2, "anchors": 32 },
      "train": { "epochs": 1, "batch": 8 }
    })";
    cfg.close();
    auto gen = run_cli("--config " + cfg_path() + " --seed 5 gen-data --out-coarse " + dir_ +
                       "/c.uflw --out-fine " + dir_ + "/f.uflw");
    ASSERT_EQ(gen.code, 0) << gen.out;
  }

  static std::string cfg_path() { return dir_ + "/tiny.json"; }
  static std::string path(const std::string& name) { return dir_ + "/" + name; }

  static std::string dir_;
};

std::string CliTest::dir_;

}  // namespace

TEST_F(CliTest, GenDataWritesPairAndZeroResidual) {
  auto r = run_cli("--config " + cfg_path() + " --seed 9 gen-data --out-coarse " +
                   path("g1c.uflw") + " --out-fine " + path("g1f.uflw"));
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("constraint residual: 0"), std::string::npos) << r.out;
  auto coarse = load_grid<float>(path("g1c.uflw"));
  auto fine = load_grid<float>(path("g1f.uflw"));
  EXPECT_EQ(coarse.granularity, Granularity::Coarse);
  EXPECT_EQ(fine.granularity, Granularity::Fine);
  EXPECT_EQ(fine.height, 2 * coarse.height);
}

TEST_F(CliTest, GenDataSameSeedByteIdentical) {
  auto a = run_cli("--config " + cfg_path() + " --seed 7 gen-data --out-coarse " +
                   path("a_c.uflw") + " --out-fine " + path("a_f.uflw"));
  auto b = run_cli("--config " + cfg_path() + " --seed 7 gen-data --out-coarse " +
                   path("b_c.uflw") + " --out-fine " + path("b_f.uflw"));
  EXPECT_EQ(a.code, 0);
  EXPECT_EQ(b.code, 0);
  EXPECT_EQ(slurp(path("a_c.uflw")), slurp(path("b_c.uflw")));
  EXPECT_EQ(slurp(path("a_f.uflw")), slurp(path("b_f.uflw")));
}

TEST_F(CliTest, UnknownConfigKeyExitsTwoNamingKey) {
  std::ofstream bad(path("bad.json"));
  bad << R"({ "data": { "coarse_hh": 4 } })";
  bad.close();
  auto r = run_cli("--config " + path("bad.json") + " gen-data --out-coarse " +
                   path("x.uflw") + " --out-fine " + path("y.uflw"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("data.coarse_hh"), std::string::npos) << r.out;
}

TEST_F(CliTest, PretrainBadStageExitsTwo) {
  auto r = run_cli("pretrain --stage x --coarse " + path("c.uflw") + " --out-ckpt " +
                   path("e.umsr"));
  EXPECT_EQ(r.code, 2) << r.out;
}

TEST_F(CliTest, PretrainWritesTaggedCheckpointAndTrace) {
  auto r = run_cli("--config " + cfg_path() + " --seed 5 --out " + dir_ +
                   " pretrain --stage b --coarse " + path("c.uflw") + " --out-ckpt " +
                   path("enc_b.umsr"));
  ASSERT_EQ(r.code, 0) << r.out;
  auto ckpt = load_checkpoint(path("enc_b.umsr"));
  EXPECT_EQ(ckpt.stage, StageTag::NeighborhoodPretrain);
  // Loss CSV: header + one row per epoch.
  std::ifstream csv(path("pretrain_b_loss.csv"));
  std::string line;
  int rows = 0;
  while (std::getline(csv, line))
    if (!line.empty()) ++rows;
  EXPECT_EQ(rows, 1 + 2);
}

TEST_F(CliTest, PretrainMissingDataExitsOne) {
  auto r = run_cli("pretrain --stage b --coarse " + path("nope.uflw") + " --out-ckpt " +
                   path("e.umsr"));
  EXPECT_EQ(r.code, 1) << r.out;
}

TEST_F(CliTest, TrainFlagExclusivity) {
  auto r = run_cli("--config " + cfg_path() + " train --coarse " + path("c.uflw") +
                   " --fine " + path("f.uflw") + " --end-to-end --from-pretrained " +
                   path("enc_b.umsr") + " --out-ckpt " + path("m.umsr"));
  EXPECT_EQ(r.code, 2) << r.out;

  auto missing = run_cli("--config " + cfg_path() + " train --coarse " + path("c.uflw") +
                         " --fine " + path("f.uflw") + " --out-ckpt " + path("m.umsr"));
  EXPECT_EQ(missing.code, 2) << missing.out;
}

TEST_F(CliTest, TrainStageTagMismatchRejected) {
  // A city checkpoint passed where the neighborhood one belongs.
  ASSERT_EQ(run_cli("--config " + cfg_path() + " --seed 5 --out " + dir_ +
                    " pretrain --stage c --coarse " + path("c.uflw") + " --out-ckpt " +
                    path("enc_c.umsr"))
                .code,
            0);
  auto r = run_cli("--config " + cfg_path() + " --seed 5 train --coarse " + path("c.uflw") +
                   " --fine " + path("f.uflw") + " --from-pretrained " + path("enc_c.umsr") +
                   " --from-pretrained-city " + path("enc_c.umsr") + " --out-ckpt " +
                   path("m.umsr"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("stage"), std::string::npos) << r.out;
}

TEST_F(CliTest, TrainEvalInferPipeline) {
  std::string coarse_before = slurp(path("c.uflw"));
  std::string fine_before = slurp(path("f.uflw"));
  auto train = run_cli("--config " + cfg_path() + " --seed 5 --out " + dir_ +
                       " train --coarse " + path("c.uflw") + " --fine " + path("f.uflw") +
                       " --end-to-end --out-ckpt " + path("model.umsr"));
  ASSERT_EQ(train.code, 0) << train.out;
  EXPECT_NE(train.out.find("final val RMSE:"), std::string::npos);
  EXPECT_EQ(load_checkpoint(path("model.umsr")).stage, StageTag::Finetuned);

  auto eval = run_cli("--config " + cfg_path() + " --seed 5 --out " + dir_ + " eval --ckpt " +
                      path("model.umsr") + " --coarse " + path("c.uflw") + " --fine " +
                      path("f.uflw"));
  ASSERT_EQ(eval.code, 0) << eval.out;
  for (const char* row : {"MEAN", "HA", "model"})
    EXPECT_NE(eval.out.find(row), std::string::npos) << eval.out;

  // The metrics CSV parses back to the three rows with finite values.
  std::ifstream csv(path("eval_metrics.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "method,rmse,mae,mape,constraint_residual,n_frames");
  int rows = 0;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    ++rows;
    double rmse = 0, mae = 0, mape = 0, residual = 0;
    char name[32];
    ASSERT_EQ(std::sscanf(line.c_str(), "%31[^,],%lf,%lf,%lf,%lf", name, &rmse, &mae, &mape,
                          &residual),
              5)
        << line;
    EXPECT_TRUE(std::isfinite(rmse));
    if (std::string(name) == "model") EXPECT_LT(residual, 1e-4);
  }
  EXPECT_EQ(rows, 3);

  auto infer = run_cli("--config " + cfg_path() + " --seed 5 infer --ckpt " +
                       path("model.umsr") + " --coarse " + path("c.uflw") + " --out-fine " +
                       path("inferred.uflw"));
  ASSERT_EQ(infer.code, 0) << infer.out;
  auto out = load_grid<float>(path("inferred.uflw"));
  auto coarse = load_grid<float>(path("c.uflw"));
  EXPECT_EQ(out.granularity, Granularity::Fine);
  EXPECT_EQ(out.height, 2 * coarse.height);
  EXPECT_EQ(out.width, 2 * coarse.width);
  EXPECT_LT(validate_constraint(coarse, out, 2), 1e-4);

  // CSV output format round-trips through the importer.
  auto infer_csv = run_cli("--config " + cfg_path() + " --seed 5 infer --ckpt " +
                           path("model.umsr") + " --coarse " + path("c.uflw") +
                           " --out-fine " + path("inferred.csv") + " --format csv");
  ASSERT_EQ(infer_csv.code, 0) << infer_csv.out;
  auto imported = import_csv<float>(path("inferred.csv"), Granularity::Fine, 2, 8);
  EXPECT_EQ(imported.height, out.height);
  EXPECT_EQ(imported.width, out.width);

  // Commands never mutate their input files.
  EXPECT_EQ(slurp(path("c.uflw")), coarse_before);
  EXPECT_EQ(slurp(path("f.uflw")), fine_before);
}

TEST_F(CliTest, TrainDeterministicMetrics) {
  auto run_once = [&](const std::string& tag) {
    auto r = run_cli("--config " + cfg_path() + " --seed 6 --out " + dir_ +
                     " train --coarse " + path("c.uflw") + " --fine " + path("f.uflw") +
                     " --end-to-end --out-ckpt " + path(tag + ".umsr"));
    EXPECT_EQ(r.code, 0) << r.out;
    return slurp(path("train_end_to_end.csv"));
  };
  auto a = run_once("det1");
  auto b = run_once("det2");
  EXPECT_EQ(a, b);
  EXPECT_EQ(slurp(path("det1.umsr")), slurp(path("det2.umsr")));
}

TEST_F(CliTest, InferZeroCoarseGivesZeroFine) {
  FlowGrid<float> zero = FlowGrid<float>::make(3, 4, 4, Granularity::Coarse, 2, 8);
  save_grid(zero, path("zero.uflw"));
  auto r = run_cli("--config " + cfg_path() + " --seed 5 infer --ckpt " + path("model.umsr") +
                   " --coarse " + path("zero.uflw") + " --out-fine " + path("zf.uflw"));
  ASSERT_EQ(r.code, 0) << r.out;
  auto out = load_grid<float>(path("zf.uflw"));
  for (float v : out.data) EXPECT_EQ(v, 0.0f);
}

TEST_F(CliTest, InferRejectsFineInput) {
  auto r = run_cli("--config " + cfg_path() + " --seed 5 infer --ckpt " + path("model.umsr") +
                   " --coarse " + path("f.uflw") + " --out-fine " + path("bad_out.uflw"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("coarse"), std::string::npos) << r.out;
}

TEST_F(CliTest, CorruptedInputsRejectedWithoutCrash) {
  std::ofstream bad(path("garbage.uflw"), std::ios::binary);
  bad << "not a grid at all";
  bad.close();
  auto r = run_cli("--config " + cfg_path() + " pretrain --stage b --coarse " +
                   path("garbage.uflw") + " --out-ckpt " + path("e.umsr"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("bad magic"), std::string::npos) << r.out;

  std::ofstream badck(path("garbage.umsr"), std::ios::binary);
  badck << "UMSRxxxxxxxx";
  badck.close();
  auto e = run_cli("--config " + cfg_path() + " eval --ckpt " + path("garbage.umsr") +
                   " --coarse " + path("c.uflw") + " --fine " + path("f.uflw"));
  EXPECT_EQ(e.code, 1) << e.out;
}

TEST_F(CliTest, EffectiveConfigEchoed) {
  auto r = run_cli("--config " + cfg_path() + " --seed 11 gen-data --out-coarse " +
                   path("echo_c.uflw") + " --out-fine " + path("echo_f.uflw"));
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("effective config:"), std::string::npos);
  EXPECT_NE(r.out.find("\"seed\":11"), std::string::npos) << r.out;
}
