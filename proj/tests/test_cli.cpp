#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>

#include "test_util.hpp"

using namespace haed_test;

namespace {

struct Result {
  int exit_code = -1;
  std::string out;
  std::string err;
};

Result run(const std::string& args) {
  const fs::path err_file = fs::temp_directory_path() / "haed_cli_stderr.txt";
  const std::string cmd = std::string(HAED_CLI_PATH) + " " + args + " 2>" + err_file.string();
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe) != nullptr) r.out += buf.data();
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err_file);
  return r;
}

/// Writes a tiny corpus and a config pointing at it.
fs::path setup(const std::string& name, const std::string& extra_run = "") {
  const fs::path dir = scratch(name);
  EXPECT_EQ(run("make-synth --kind text --bytes 12000 --seed 3 --out " + (dir / "corpus.txt").string()).exit_code, 0);
  std::ofstream(dir / "c.json") << R"({
    "dataset": {"path": ")" << (dir / "corpus.txt").string() << R"(", "hierarchy": {"k": 4},
                "batch": {"count": 24, "window": 8}},
    "model": {"encoder": {"mlp_hidden": [16], "embed_dim": 4},
              "main": {"layers": 1, "model_dim": 16, "ff_dim": 32, "heads": 2, "head_dim": 8, "max_positions": 8},
              "decoder": {"units": 16}},
    "schedule": {"warmup_steps": 2},
    "run": {"steps": 6, "log_wallclock": false)" << extra_run << R"(, "out_dir": ")" << (dir / "run").string() << R"("}
  })";
  return dir;
}

bool one_error_line(const std::string& err, const std::string& code) {
  return err.find("error code=" + code + " message=\"") == 0 && err.find('\n') == err.size() - 1;
}

}  // namespace

TEST(Cli, UnknownCommand) {
  const auto r = run("frobnicate");
  EXPECT_NE(r.exit_code, 0);
  EXPECT_TRUE(one_error_line(r.err, "UnknownCommand")) << r.err;
}

TEST(Cli, MissingRequiredFlag) {
  const auto r = run("eval --data x");
  EXPECT_NE(r.exit_code, 0);
  EXPECT_TRUE(one_error_line(r.err, "MissingFlag")) << r.err;
}

TEST(Cli, MakeSynthIsDeterministic) {
  const fs::path dir = scratch("cli_synth");
  ASSERT_EQ(run("make-synth --kind text --bytes 5000 --seed 9 --out " + (dir / "a.txt").string()).exit_code, 0);
  ASSERT_EQ(run("make-synth --kind text --bytes 5000 --seed 9 --out " + (dir / "b.txt").string()).exit_code, 0);
  EXPECT_EQ(slurp(dir / "a.txt"), slurp(dir / "b.txt"));
  EXPECT_EQ(slurp(dir / "a.txt").size(), 5000u);
  ASSERT_EQ(run("make-synth --kind image --count 3 --height 4 --width 4 --out " + (dir / "i.haim").string()).exit_code, 0);
  EXPECT_EQ(slurp(dir / "i.haim").substr(0, 4), "HAIM");
  EXPECT_TRUE(one_error_line(run("make-synth --kind audio --out " + (dir / "x").string()).err, "InvalidValue"));
}

TEST(Cli, TrainThenEval) {
  const fs::path dir = setup("cli_train");
  const auto r = run("train --config " + (dir / "c.json").string());
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_NE(r.out.find("steps=6 "), std::string::npos);
  std::set<std::string> files;
  for (const auto& e : fs::directory_iterator(dir / "run")) files.insert(e.path().filename().string());
  EXPECT_EQ(files, (std::set<std::string>{"checkpoint.bin", "checkpoint.json", "metrics.csv", "resolved_config.json"}));

  const auto e = run("eval --checkpoint " + (dir / "run" / "checkpoint.bin").string() + " --data " +
                     (dir / "corpus.txt").string());
  ASSERT_EQ(e.exit_code, 0) << e.err;
  EXPECT_EQ(e.out.rfind("bpt=", 0), 0u);
  const double bpt = std::stod(e.out.substr(4));
  EXPECT_GT(bpt, 0.0);
  EXPECT_LT(bpt, 9.0);
}

TEST(Cli, FlagsOverrideConfig) {
  const fs::path dir = setup("cli_override");
  const auto r = run("train --config " + (dir / "c.json").string() + " --steps 4 --seed 11 --out " +
                     (dir / "other").string());
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const Json resolved = Json::parse(slurp(dir / "other" / "resolved_config.json"));
  EXPECT_EQ(resolved["run"]["steps"], 4);
  EXPECT_EQ(resolved["run"]["seed"], 11);
  EXPECT_FALSE(fs::exists(dir / "run"));
}

TEST(Cli, BadConfigIsOneLine) {
  const fs::path dir = scratch("cli_badcfg");
  std::ofstream(dir / "c.json") << R"({"typo_key": 1})";
  const auto r = run("train --config " + (dir / "c.json").string());
  EXPECT_NE(r.exit_code, 0);
  EXPECT_TRUE(one_error_line(r.err, "UnknownKey")) << r.err;
}

TEST(Cli, PretrainThenFinetune) {
  const fs::path dir = setup("cli_ft");
  ASSERT_EQ(run("pretrain --config " + (dir / "c.json").string() + " --out " + (dir / "pre").string()).exit_code, 0);
  const auto r = run("finetune --config " + (dir / "c.json").string() + " --checkpoint " +
                     (dir / "pre" / "checkpoint.bin").string() + " --out " + (dir / "ft").string());
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_NE(r.out.find("final_bpt="), std::string::npos);
  EXPECT_EQ(Json::parse(slurp(dir / "ft" / "checkpoint.json"))["phase"], "finetune");
}

TEST(Cli, TimingWritesCsv) {
  const fs::path dir = setup("cli_timing");
  const auto r = run("timing --config " + (dir / "c.json").string() + " --decoder-units 8,32 --trials 20");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_EQ(lines(dir / "run" / "timing.csv").size(), 3u);
  EXPECT_TRUE(fs::exists(dir / "run" / "resolved_config.json"));
}

TEST(Cli, SweepWritesCsv) {
  const fs::path dir = setup("cli_sweep");
  const auto r = run("sweep --config " + (dir / "c.json").string() + " --axis decoder_units --values 8,16");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_EQ(lines(dir / "run" / "sweep.csv").size(), 3u);
}

TEST(Cli, GradcheckPasses) {
  const auto r = run("gradcheck");
  EXPECT_EQ(r.exit_code, 0) << r.out << r.err;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
  EXPECT_NE(r.out.find("PASS iem_loss"), std::string::npos);
}
