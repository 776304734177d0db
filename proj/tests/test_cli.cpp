#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "ilmcam_cli_test";

int run(const std::string& args) {
  const std::string cmd = std::string(ILMCAM_CLI) + " " + args + " > " + (kWork / "last.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    ASSERT_EQ(run("--data-root " + kWork.string() + " synth --count 240 --val 48 --test 48 --size 16 --seed 8 --out d"),
              0);
    std::ofstream(kWork / "plan.json")
        << R"({"al": {"input_size": 16, "width_multiplier": 0.5, "pretrain_epochs": 2, "finetune_epochs": 1, "seed": 3},
              "il": {"epochs": 4, "seed": 3}})";
    // Undertrained on purpose so the IL loop has errors to work on.
    std::ofstream(kWork / "weak.json")
        << R"({"al": {"input_size": 16, "width_multiplier": 0.5, "pretrain_epochs": 1, "finetune_epochs": 0, "seed": 3,
                      "lr": 5e-4},
              "il": {"epochs": 4, "seed": 2}})";
  }
};

}  // namespace

TEST_F(Cli, SynthWritesManifest) {
  EXPECT_TRUE(fs::exists(kWork / "d" / "manifest.jsonl"));
  std::ifstream f(kWork / "d" / "manifest.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) ++n;
  EXPECT_EQ(n, 240u);
}

TEST_F(Cli, TrainEvalTwiceIsByteIdentical) {
  ASSERT_EQ(run("--data-root " + kWork.string() + " --jobs 2 train --data d --plan plan.json --out m"), 0);
  EXPECT_TRUE(fs::exists(kWork / "m" / "ensemble.json"));
  ASSERT_EQ(run("--data-root " + kWork.string() + " eval --checkpoint m --data d --split test --out r1.txt"), 0);
  ASSERT_EQ(run("--data-root " + kWork.string() + " eval --checkpoint m --data d --split test --out r2.txt"), 0);
  const std::string a = slurp(kWork / "r1.txt");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(kWork / "r2.txt"));
  EXPECT_NE(a.find("[fused]"), std::string::npos);

  ASSERT_EQ(run("--data-root " + kWork.string() + " fuse --checkpoints m --val d --step 0.5"), 0);
  const auto grid = nlohmann::json::parse(slurp(kWork / "last.log"));
  EXPECT_EQ(grid.at("grid").size(), 6u);
}

TEST_F(Cli, OracleIlRunWritesAuditWithinCap) {
  ASSERT_EQ(run("--data-root " + kWork.string() +
                " il-run --annotator oracle --data d --plan weak.json --max-iters 3 --policy no-new-errors --out il"),
            0)
      << slurp(kWork / "last.log");
  std::ifstream audit(kWork / "il" / "audit.jsonl");
  std::string line;
  std::size_t records = 0;
  nlohmann::json last;
  while (std::getline(audit, line)) {
    last = nlohmann::json::parse(line);
    EXPECT_EQ(last.at("iteration").get<std::size_t>(), records);
    ++records;
  }
  ASSERT_GE(records, 2u) << "fixture should start with validation errors";
  EXPECT_LE(records, 4u);
  EXPECT_NE(last.at("stop_reason").get<std::string>(), "none");
  EXPECT_LE(last.at("val_errors_after").get<std::size_t>(), 48u);
  EXPECT_TRUE(fs::exists(kWork / "il" / "model" / "ensemble.json"));
  EXPECT_TRUE(fs::exists(kWork / "il" / "leak_audit.json"));
}

TEST_F(Cli, GradcheckExitCodeFollowsTolerance) {
  EXPECT_EQ(run("gradcheck --seed 5"), 0);
  EXPECT_NE(slurp(kWork / "last.log").find("all passed"), std::string::npos);
  EXPECT_EQ(run("gradcheck --seed 5 --instances 2 --tol 1e-15"), 3);
  EXPECT_NE(slurp(kWork / "last.log").find("FAIL"), std::string::npos);
}

TEST_F(Cli, ValidationFailuresExitTwo) {
  EXPECT_EQ(run("synth --classes 3 --out x"), 2);
  EXPECT_EQ(run("--jobs 4 synth --out x"), 2);
  EXPECT_EQ(run("eval --checkpoint " + (kWork / "missing").string() + " --data " + (kWork / "d").string()), 2);
  EXPECT_EQ(run("--data-root " + kWork.string() + " train --data d --plan plan.json --channels sic,foo --out bad"), 2);
  EXPECT_EQ(run("il-run --annotator human --data d --out x"), 2);
  EXPECT_EQ(run(""), 2);
}
