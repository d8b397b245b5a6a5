/*
 * Copyright 2026 The AGP-MIL Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <agp/cli.hpp>

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "oracles.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kMnistDir = AGP_TEST_MNIST_DIR;

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "agp");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.code = agp::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

/// Small MNIST-format directory: 200 training and 50 test images.
fs::path mnist_fixture(const oracle::TempDir& dir) {
  const fs::path d = dir.path() / "mnist";
  fs::create_directories(d);
  std::vector<std::uint8_t> train, test;
  for (int i = 0; i < 200; ++i) train.push_back(static_cast<std::uint8_t>((i * 7) % 10));
  for (int i = 0; i < 50; ++i) test.push_back(static_cast<std::uint8_t>((i * 3) % 10));
  oracle::write_idx_pair(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte", train);
  oracle::write_idx_pair(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte", test);
  return d;
}

std::vector<std::string> small_model() {
  return {"--feature-dim", "8", "--inducing-count", "4", "--gp-input-dim", "3", "--mc-samples", "3"};
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST(Config, ParsesFlatText) {
  std::vector<std::string> problems;
  const auto s = agp::cli::parse_config_text("# header\nlr = 0.01  # inline\n\n  epochs=3\nbogus line\n", "cfg",
                                             problems);
  EXPECT_EQ(s.at("lr"), "0.01");
  EXPECT_EQ(s.at("epochs"), "3");
  ASSERT_EQ(problems.size(), 1u);
  EXPECT_EQ(problems[0], "cfg:5: expected key = value");
}

TEST(Config, DefaultsAndLayering) {
  const auto c = agp::cli::resolve_config({{"lr", "0.01"}, {"epochs", "3"}}, {{"epochs", "7"}});
  EXPECT_EQ(c.train.lr, 0.01);
  EXPECT_EQ(c.train.epochs, 7u);
  EXPECT_EQ(c.model.mc_samples, 20u);
  EXPECT_EQ(c.model.inducing_count, 64u);
  EXPECT_EQ(c.data_dir, fs::path("data/mnist"));
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1}));
  EXPECT_EQ(agp::cli::to_json(c)["epochs"], "7");

  const auto cifar = agp::cli::resolve_config({}, {{"task", "cifar"}, {"seeds", "3,4"}});
  EXPECT_EQ(cifar.model.num_classes, 3u);
  EXPECT_EQ(cifar.model.backbone, agp::BackboneKind::kCifarCnn);
  EXPECT_EQ(cifar.seeds, (std::vector<std::uint64_t>{3, 4}));
}

TEST(Config, ReportsEveryProblem) {
  try {
    agp::cli::resolve_config({{"learning_rate", "1"}}, {{"lr", "-1"}, {"attention", "max"}, {"epochs", "two"}});
    FAIL();
  } catch (const agp::ConfigError& e) {
    const auto& p = e.problems();
    auto has = [&](const std::string& needle) {
      return std::any_of(p.begin(), p.end(), [&](const std::string& s) { return s.find(needle) != std::string::npos; });
    };
    EXPECT_TRUE(has("unknown key 'learning_rate'"));
    EXPECT_TRUE(has("lr must be > 0"));
    EXPECT_TRUE(has("attention:"));
    EXPECT_TRUE(has("epochs:"));
  }
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run({}).code, agp::cli::kExitConfig);
  EXPECT_EQ(run({"train", "--no-such-flag", "1"}).code, agp::cli::kExitConfig);
  const auto bad = run({"train", "--lr", "abc"});
  EXPECT_EQ(bad.code, agp::cli::kExitConfig);
  EXPECT_NE(bad.err.find("lr: expected a finite number"), std::string::npos) << bad.err;
  oracle::TempDir dir("cli-missing");
  const auto missing = run({"synthesize", "--data-dir", (dir.path() / "nothing").string(), "--out-dir",
                            (dir.path() / "out").string()});
  EXPECT_EQ(missing.code, agp::cli::kExitRuntime);
  EXPECT_NE(missing.err.find("nothing"), std::string::npos) << missing.err;
  EXPECT_EQ(run({"--help"}).code, agp::cli::kExitOk);
}

TEST(Cli, ConfigFileAndMissingFile) {
  oracle::TempDir dir("cli-cfg");
  std::ofstream(dir.path() / "run.cfg") << "lr = 0\nwhatever = 1\n";
  const auto r = run({"train", "--config", (dir.path() / "run.cfg").string()});
  EXPECT_EQ(r.code, agp::cli::kExitConfig);
  EXPECT_NE(r.err.find("unknown key 'whatever'"), std::string::npos);
  EXPECT_NE(r.err.find("lr must be > 0"), std::string::npos);
  EXPECT_EQ(run({"train", "--config", (dir.path() / "absent.cfg").string()}).code, agp::cli::kExitConfig);
}

TEST(Cli, BinaryExitStatus) {
  const std::string cli = AGP_CLI_PATH;
  int status = std::system((cli + " train --lr nope > /dev/null 2>&1").c_str());
  EXPECT_EQ(WEXITSTATUS(status), 1);
  status = std::system((cli + " synthesize --data-dir /nonexistent/agp --out-dir /tmp/agp-cli-bin > /dev/null 2>&1").c_str());
  EXPECT_EQ(WEXITSTATUS(status), 2);
}

TEST(Cli, SynthesizeFixture) {
  oracle::TempDir dir("cli-synth");
  const auto data = mnist_fixture(dir);
  const auto out = dir.path() / "out";
  const auto r = run({"synthesize", "--data-dir", data.string(), "--out-dir", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("train bags: 23, test bags: 6\n"), std::string::npos) << r.out;
  const std::string digest = agp::sha256_hex(slurp(out / "manifest.json"));
  EXPECT_NE(r.out.find(digest), std::string::npos);
  // Same seed reproduces the manifest byte for byte; the digest pin holds.
  const auto again = run({"synthesize", "--data-dir", data.string(), "--out-dir", (dir.path() / "o2").string(),
                          "--expect-manifest-sha256", digest});
  EXPECT_EQ(again.code, 0) << again.err;
  const auto wrong = run({"synthesize", "--data-dir", data.string(), "--out-dir", (dir.path() / "o3").string(),
                          "--expect-manifest-sha256", std::string(64, 'a')});
  EXPECT_EQ(wrong.code, agp::cli::kExitRuntime);
}

TEST(Cli, SynthesizeRealMnist) {
  if (!fs::exists(kMnistDir / "train-images-idx3-ubyte") && !fs::exists(kMnistDir / "train-images-idx3-ubyte.gz"))
    GTEST_SKIP() << "MNIST files not found";
  oracle::TempDir dir("cli-mnist");
  const auto r = run({"synthesize", "--data-dir", kMnistDir.string(), "--out-dir", dir.path().string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("train bags: 6667, test bags: 1112\n"), std::string::npos) << r.out;
}

TEST(Cli, SynthesizeCifarFixture) {
  oracle::TempDir dir("cli-cifar");
  oracle::write_cifar_dir(dir.path() / "cifar", 40);
  const auto r = run({"synthesize", "--task", "cifar", "--data-dir", (dir.path() / "cifar").string(), "--out-dir",
                      (dir.path() / "out").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("train bags: 4443, val bags: 1110, test bags: 1110\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("train: negative 1481, airplane 1481, car 1481 (1481 bags per class)"), std::string::npos)
      << r.out;
}

TEST(Cli, TrainThenEval) {
  oracle::TempDir dir("cli-train");
  const auto data = mnist_fixture(dir);
  const auto out = dir.path() / "out";
  const auto common = concat({"--data-dir", data.string(), "--out-dir", out.string(), "--eval-bags-limit", "4"},
                             small_model());
  const auto t = run(concat({"train", "--epochs", "2", "--lr", "0.001", "--train-bags-limit", "10"}, common));
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_NE(t.out.find("final val accuracy (test): "), std::string::npos) << t.out;
  for (const char* f : {"manifest.json", "train.jsonl", "checkpoint.json", "checkpoint.bin"})
    EXPECT_TRUE(fs::exists(out / f)) << f;

  std::ifstream jl(out / "train.jsonl");
  std::vector<nlohmann::json> records;
  for (std::string line; std::getline(jl, line);) records.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(records.size(), 3u);
  EXPECT_EQ(records[0]["record"], "header");
  EXPECT_EQ(records[0]["val_split"], "test");
  EXPECT_EQ(records[0]["train_bags"], 10);
  EXPECT_EQ(records[0]["manifest_sha256"], agp::sha256_hex(slurp(out / "manifest.json")));
  EXPECT_EQ(records[2]["epoch"], 2);

  const auto e1 = run(concat({"eval"}, common));
  ASSERT_EQ(e1.code, 0) << e1.err;
  const std::string j1 = slurp(out / "eval.json"), a1 = slurp(out / "attention.csv"),
                    h1 = slurp(out / "uncertainty_hist.csv");
  const auto e2 = run(concat({"eval"}, common));
  ASSERT_EQ(e2.code, 0) << e2.err;
  EXPECT_EQ(slurp(out / "eval.json"), j1);
  EXPECT_EQ(slurp(out / "attention.csv"), a1);
  EXPECT_EQ(slurp(out / "uncertainty_hist.csv"), h1);

  const auto report = nlohmann::json::parse(j1);
  EXPECT_EQ(report["report"]["bag_count"], 4);
  EXPECT_EQ(report["mc_samples"], 3);
  EXPECT_EQ(a1.substr(0, 2), "# ");
  EXPECT_NE(a1.find("\nbag_id,instance_index,weight_mean,weight_std\n"), std::string::npos);
}

TEST(Cli, ZeroEpochsCheckpointIsInitialization) {
  oracle::TempDir dir("cli-zero");
  const auto data = mnist_fixture(dir);
  const auto out = dir.path() / "out";
  const auto r = run(concat({"train", "--epochs", "0", "--data-dir", data.string(), "--out-dir", out.string()},
                            small_model()));
  ASSERT_EQ(r.code, 0) << r.err;
  const agp::MilModel loaded = agp::load_checkpoint(out);
  const agp::MilModel fresh(loaded.config());
  for (std::size_t i = 0; i < fresh.parameters().size(); ++i)
    EXPECT_EQ(loaded.parameters()[i].data(), fresh.parameters()[i].data()) << fresh.parameters()[i].name();
}

TEST(Cli, EvalWithoutCheckpointFails) {
  oracle::TempDir dir("cli-nockpt");
  const auto data = mnist_fixture(dir);
  const auto r = run({"eval", "--data-dir", data.string(), "--out-dir", (dir.path() / "out").string()});
  EXPECT_EQ(r.code, agp::cli::kExitRuntime);
  EXPECT_NE(r.err.find("checkpoint.json"), std::string::npos) << r.err;
}

TEST(Cli, AblationTable) {
  oracle::TempDir dir("cli-ablate");
  const auto data = mnist_fixture(dir);
  const auto out = dir.path() / "out";
  const auto r = run(concat({"ablate", "--axis", "activation", "--seeds", "1,2", "--epochs", "0", "--data-dir",
                             data.string(), "--out-dir", out.string(), "--eval-bags-limit", "3"},
                            small_model()));
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream f(out / "ablation.csv");
  std::vector<std::string> lines;
  for (std::string line; std::getline(f, line);) lines.push_back(line);
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[1], "axis,value,seeds,mean_accuracy,std_error,std_error_present");
  EXPECT_EQ(lines[2].substr(0, 16), "activation,relu,");
  EXPECT_NE(lines[2].find(",2,"), std::string::npos);
  EXPECT_EQ(lines[4].substr(lines[4].size() - 5), ",true");

  const auto cifar = run({"ablate", "--task", "cifar"});
  EXPECT_EQ(cifar.code, agp::cli::kExitConfig);
}

TEST(Cli, AblationSummary) {
  const auto row = agp::cli::summarize_ablation("x", {0.9, 0.95, 1.0});
  EXPECT_NEAR(row.mean, 0.95, 1e-15);
  ASSERT_TRUE(row.std_error);
  EXPECT_NEAR(*row.std_error, 0.028867513459481287, 1e-15);
  EXPECT_FALSE(agp::cli::summarize_ablation("x", {0.9}).std_error.has_value());
}
