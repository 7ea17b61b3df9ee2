/*
 * Copyright 2026 The mriseq Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "mriseq/cli.hpp"
#include "oracles.hpp"

using namespace mriseq;
using mriseq::testing::TempDir;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli_dispatch(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

json read(const std::filesystem::path& p) { return json::parse(mriseq::detail::slurp(p)); }

std::vector<std::string> lines(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::vector<std::string> v;
  for (std::string s; std::getline(is, s);) v.push_back(s);
  return v;
}

}  // namespace

// One small dataset and a two-fold toy run shared by the workflow tests.
class Workflow : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    const auto d = path("data"), r = path("run");
    ASSERT_EQ(run({"synth", "--out", d, "--patients", "4", "--dims", "16", "16", "4", "--seed", "2"}).code, 0);
    ASSERT_EQ(run({"train", "--manifest", d + "/manifest.csv", "--toy", "--epochs", "1", "--folds", "2", "--out", r,
                   "--cache", path("cache"), "--seed", "2"})
                  .code,
              0);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string path(const std::string& s) { return (*dir_ / s).string(); }
  static std::string manifest() { return path("data") + "/manifest.csv"; }

  static TempDir* dir_;
};
TempDir* Workflow::dir_ = nullptr;

TEST_F(Workflow, SynthWritesManifestAndEcho) {
  EXPECT_EQ(load_manifest(manifest()).records.size(), 32u);
  const auto echo = read(path("data") + "/config.json");
  EXPECT_EQ(echo.at("patients"), "4");
  EXPECT_EQ(read(path("data") + "/phantom_config.json").at("seed"), 2);
}

TEST_F(Workflow, TrainWritesEveryFold) {
  for (const char* f : {"fold0/best.ckpt", "fold1/best.ckpt", "fold0/history.csv", "config.json"})
    EXPECT_TRUE(std::filesystem::exists(path("run") + "/" + f)) << f;
  EXPECT_EQ(read(path("run") + "/config.json").at("command"), "train");
}

TEST_F(Workflow, PredictThenEvalFromFile) {
  const auto csv = path("pred/predictions.csv");
  const auto p = run({"predict", "--run", path("run"), "--manifest", manifest(), "--out", csv});
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_EQ(lines(csv).size(), 33u);
  const auto e = run({"eval", "--predictions", csv, "--manifest", manifest(), "--resamples", "50"});
  ASSERT_EQ(e.code, 0) << e.err;
  const auto m = read(path("pred/metrics.json"));
  EXPECT_EQ(m.at("n"), 32);
  EXPECT_GE(m.at("accuracy").at("value").get<double>(), 0.0);
  EXPECT_EQ(lines(path("pred/confusion.csv")).size(), 9u);
}

TEST_F(Workflow, PerfectPredictionsScoreOne) {
  const auto m = load_manifest(manifest());
  std::vector<PredictionRow> rows;
  for (const auto& r : m.records) {
    Prediction p;
    p.label = r.label;
    p.probabilities[label_index(r.label)] = 1.0;
    rows.push_back({r.volume_path, p, ""});
  }
  std::filesystem::create_directories(path("perfect"));
  write_predictions_csv(rows, path("perfect/predictions.csv"));
  const auto e = run({"eval", "--predictions", path("perfect/predictions.csv"), "--manifest", manifest()});
  ASSERT_EQ(e.code, 0) << e.err;
  const auto j = read(path("perfect/metrics.json"));
  for (const char* k : {"accuracy", "precision", "sensitivity", "specificity", "f1", "auc"})
    EXPECT_DOUBLE_EQ(j.at(k).at("value").get<double>(), 1.0) << k;

  const auto self = run({"mcnemar", path("perfect"), path("perfect"), "--out", path("mc.json")});
  ASSERT_EQ(self.code, 0) << self.err;
  const auto mc = read(path("mc.json"));
  EXPECT_EQ(mc.at("b"), 0);
  EXPECT_EQ(mc.at("c"), 0);
  EXPECT_DOUBLE_EQ(mc.at("p_value").get<double>(), 1.0);
}

TEST_F(Workflow, EvalFromRunAndReport) {
  const auto e = run({"eval", "--run", path("run"), "--manifest", manifest(), "--resamples", "50"});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_EQ(read(path("run/metrics.json")).at("run").at("mode"), "scratch");
  const auto r = run({"report", path("run"), path("run"), "--out", path("report")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto s = read(path("report/summary.json"));
  EXPECT_EQ(s.at("runs"), 2);
  EXPECT_DOUBLE_EQ(s.at("accuracy_spread").get<double>(), 0.0);
  const auto csv = lines(path("report/summary.csv"));
  ASSERT_EQ(csv.size(), 3u);
  EXPECT_EQ(csv[0].substr(0, 32), "run,fraction,seed,accuracy,accur");
  EXPECT_EQ(lines(path("report/fraction_curve.csv")).size(), 3u);
}

TEST_F(Workflow, GradcamWithRun) {
  const auto v = path("data") + "/" + load_manifest(manifest()).records[0].volume_path;
  const auto g = run({"gradcam", "--run", path("run"), "--volume", v, "--out", path("gc")});
  ASSERT_EQ(g.code, 0) << g.err;
  for (const char* f : {"saliency.vh", "input.vh", "overlay.ppm"})
    EXPECT_TRUE(std::filesystem::exists(path("gc") + "/" + f)) << f;
}

TEST_F(Workflow, PreprocessFillsCache) {
  const auto p = run({"preprocess", "--manifest", manifest(), "--out", path("pcache"), "--toy"});
  ASSERT_EQ(p.code, 0) << p.err;
  const auto echo = read(path("pcache/preprocess_config.json"));
  EXPECT_EQ(echo.at("resolved").get<PreprocessConfig>(), PreprocessConfig::toy());
  EXPECT_TRUE(std::filesystem::is_directory(path("pcache") + "/" + config_digest(PreprocessConfig::toy())));
}

TEST_F(Workflow, ConfigFileMergesAndFlagsWin) {
  std::ofstream(path("cfg.json")) << R"({"val_ratio": 0.25, "folds": 1, "epochs": 3, "toy": true, "seed": 9})";
  const auto t = run({"train", "--config", path("cfg.json"), "--manifest", manifest(), "--epochs", "0", "--out",
                      path("cfgrun"), "--cache", path("cache")});
  ASSERT_EQ(t.code, 0) << t.err;
  const auto c = read(path("cfgrun/config.json"));
  EXPECT_EQ(c.at("epochs"), 0);
  EXPECT_EQ(c.at("folds"), 1);
  EXPECT_DOUBLE_EQ(c.at("val_ratio").get<double>(), 0.25);
  EXPECT_EQ(c.at("seed"), 9);
}

TEST_F(Workflow, DivergentTrainingIsNumericFailure) {
  const auto t = run({"train", "--manifest", manifest(), "--toy", "--epochs", "1", "--folds", "1", "--lr", "1e30",
                      "--out", path("diverge"), "--cache", path("cache")});
  EXPECT_EQ(t.code, 4) << t.err;
  EXPECT_NE(t.err.find("numeric failure"), std::string::npos);
}

TEST(MergeConfig, UnderscoresBecomeDashesAndFlagsTakePrecedence) {
  TempDir dir("merge");
  std::ofstream(dir / "c.json") << R"({"batch_size": 4, "lr": 0.001, "toy": true, "mix": null, "dims": [8, 8, 2]})";
  const auto args = cli::detail::merge_config_file({"train", "--config", (dir / "c.json").string(), "--lr", "0.5"});
  const std::vector<std::string> want{"train", "--lr", "0.5", "--batch-size", "4", "--dims", "8", "8", "2", "--toy"};
  EXPECT_EQ(args, want);
  EXPECT_THROW(cli::detail::merge_config_file({"train", "--config"}), UsageError);
}

TEST(ExitCodes, UsageAndData) {
  TempDir dir("codes");
  EXPECT_EQ(run({"--help"}).code, 0);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"synth"}).code, 2);
  EXPECT_EQ(run({"synth", "--out", (dir / "x").string(), "--bogus"}).code, 2);
  EXPECT_EQ(run({"train", "--manifest", "m.csv", "--out", "o", "--arch", "vgg"}).code, 2);
  EXPECT_EQ(run({"report", "--out", (dir / "r").string()}).code, 2);
  EXPECT_EQ(run({"eval", "--manifest", "m.csv"}).code, 2);
  std::ofstream(dir / "bad.json") << "{not json";
  EXPECT_EQ(run({"train", "--config", (dir / "bad.json").string()}).code, 2);

  const auto missing = run({"train", "--manifest", (dir / "none.csv").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(missing.code, 3);
  EXPECT_NE(missing.err.find("data error"), std::string::npos);
  EXPECT_EQ(run({"report", (dir / "norun").string(), "--out", (dir / "r").string()}).code, 3);
}

TEST(ExitCodes, UnexpectedFailure) {
  TempDir dir("fail");
  std::ofstream(dir / "file") << "x";
  // output directory path runs through a regular file
  const auto r = run({"synth", "--out", (dir / "file" / "sub").string(), "--patients", "1", "--dims", "4", "4", "1"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
}

TEST(Seed, EnvironmentDefault) {
  TempDir dir("env");
  ::setenv("MRISEQ_SEED", "77", 1);
  const auto r = run({"synth", "--out", (dir / "d").string(), "--patients", "1", "--dims", "4", "4", "1"});
  ::setenv("MRISEQ_SEED", "x", 1);
  const auto bad = run({"synth", "--out", (dir / "e").string(), "--patients", "1"});
  ::unsetenv("MRISEQ_SEED");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read(dir / "d" / "phantom_config.json").at("seed"), 77);
  EXPECT_EQ(bad.code, 2);
}
