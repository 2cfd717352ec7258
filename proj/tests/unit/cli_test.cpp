#include <gtest/gtest.h>

#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string err;
};

const fs::path& scratch() {
  static const fs::path p = [] {
    fs::path d = fs::temp_directory_path() / "incomes_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

Run cli(const std::string& args) {
  const fs::path err = scratch() / "stderr.txt";
  const std::string cmd = std::string(INCOMES_CLI_PATH) + " " + args + " > " + (scratch() / "stdout.txt").string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream is(err);
  std::stringstream ss;
  ss << is.rdbuf();
  r.err = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path tiny_config() {
  const fs::path p = scratch() / "tiny.json";
  std::ofstream(p) << R"({
  "world": {"vocab_size": 160, "n_relations": 6, "density": 0.5, "n_chains": 10, "n_singles": 60},
  "model": {"n_layers": 2, "d_model": 16, "n_heads": 2, "max_seq_len": 128},
  "pretrain": {"max_steps": 30, "eval_every": 15, "eval_cases": 20, "episodes_per_step": 4,
               "base_questions_per_step": 8, "copy_sequences_per_step": 4, "warmup_steps": 5},
  "train": {"schedule": {"warmup_steps": 10}, "train": {"examples_per_step": 4, "checkpoint_every": 100, "log_every": 20}}
})";
  return p;
}

}  // namespace

TEST(Cli, UnknownFlagOrSubcommandExitsTwo) {
  EXPECT_EQ(cli("gen-data --no-such-flag").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("train --cross-layers some").code, 2);
}

TEST(Cli, GenDataIsDeterministic) {
  const auto a = scratch() / "gd_a", b = scratch() / "gd_b";
  const std::string cfg = " --config " + tiny_config().string();
  ASSERT_EQ(cli("gen-data --seed 7 --n-cases 20 --pool-size 4,8 --out " + a.string() + cfg).code, 0);
  ASSERT_EQ(cli("gen-data --seed 7 --n-cases 20 --pool-size 4,8 --out " + b.string() + cfg).code, 0);
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename())) << e.path();
    ++n;
  }
  EXPECT_EQ(n, 2u + 2 * 6);  // world.json, config.json, 6 labels at 2 pool sizes
  EXPECT_TRUE(fs::exists(a / "cases_multi_hop_3_p4.jsonl"));
  // a used run directory is never overwritten
  EXPECT_EQ(cli("gen-data --seed 7 --out " + a.string() + cfg).code, 1);
}

TEST(Cli, MissingCheckpointNamesTheField) {
  auto r = cli("eval --data x.jsonl --out " + (scratch() / "ev_missing").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("student"), std::string::npos) << r.err;
  r = cli("eval --methods icl --data x.jsonl --out " + (scratch() / "ev_missing2").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("teacher"), std::string::npos) << r.err;
}

TEST(Cli, InvalidConfigNamesTheField) {
  const fs::path p = scratch() / "bad.json";
  std::ofstream(p) << R"({"model": {"n_heads": 3}})";
  auto r = cli("bench --config " + p.string() + " --out " + (scratch() / "bad_run").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("n_heads"), std::string::npos) << r.err;
  std::ofstream(p) << R"({"pretrain": {"max_lr": "fast"}})";
  r = cli("pretrain --config " + p.string() + " --out " + (scratch() / "bad_run2").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("pretrain.max_lr"), std::string::npos) << r.err;
}

TEST(Cli, EndToEndSmokeAtTinyScale) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto d = scratch() / "e2e";
  const std::string cfg = " --config " + tiny_config().string() + " --seed 3";
  ASSERT_EQ(cli("gen-data --n-cases 20 --pool-size 4 --kinds recall,locality --out " + (d / "data").string() + cfg).code, 0);
  ASSERT_EQ(cli("pretrain --world " + (d / "data/world.json").string() + " --out " + (d / "pt").string() + cfg).code, 0);
  ASSERT_TRUE(fs::exists(d / "pt/teacher.ckpt"));
  ASSERT_TRUE(fs::exists(d / "pt/config.json"));
  auto r = cli("train --teacher " + (d / "pt/teacher.ckpt").string() + " --world " + (d / "data/world.json").string() +
               " --steps 200 --golden-loss --out " + (d / "tr").string() + cfg);
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_TRUE(fs::exists(d / "tr/student.ckpt"));
  EXPECT_TRUE(fs::exists(d / "tr/checkpoints/step_200.ckpt"));
  EXPECT_NE(slurp(d / "tr/config.json").find("\"golden_loss\": true"), std::string::npos);
  const std::string data = " --data " + (d / "data/cases_recall_p4.jsonl").string() + " " + (d / "data/cases_locality_p4.jsonl").string();
  r = cli("compress --student " + (d / "tr/student.ckpt").string() + data + " --out " + (d / "cp").string() + cfg);
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_TRUE(fs::exists(d / "cp/pool.bin"));
  r = cli("eval --student " + (d / "tr/student.ckpt").string() + " --teacher " + (d / "pt/teacher.ckpt").string() + " --pool " +
          (d / "cp/pool.bin").string() + data + " --out " + (d / "ev").string() + cfg);
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string report = slurp(d / "ev/report.tsv");
  EXPECT_NE(report.find("incomes\trecall\t4\t20"), std::string::npos) << report;
  EXPECT_NE(report.find("icl\tlocality\t4\t20"), std::string::npos) << report;
  // the inputs of eval are untouched and its outputs reload
  EXPECT_TRUE(fs::exists(d / "ev/config.json"));
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60;
  EXPECT_LT(minutes, 10.0);
  r = cli("probe --student " + (d / "tr/student.ckpt").string() + " --world " + (d / "data/world.json").string() +
          " --pool-size 8 --n-probes 5 --out " + (d / "pr").string() + cfg);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(d / "pr/probe.tsv").substr(0, 8), "position");
  r = cli("calibrate --student " + (d / "tr/student.ckpt").string() + " --world " + (d / "data/world.json").string() +
          " --pool-size 1,4,8 --n-probes 5 --out " + (d / "ca").string() + cfg);
  ASSERT_EQ(r.code, 0) << r.err;
  r = cli("bench --student " + (d / "tr/student.ckpt").string() + " --n-edits 20 --repeats 2 --out " + (d / "bn").string() + cfg);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(slurp(d / "bn/efficiency.json").find("memory_ratio"), std::string::npos);
}
