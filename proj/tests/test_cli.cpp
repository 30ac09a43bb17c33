#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "emgait/emgait.hpp"

namespace {

using namespace emgait;

struct Result {
  int code;
  std::string out;
};

Result run(const std::string& args, const std::string& env = "") {
  const fs::path log = fs::temp_directory_path() / "emgait_cli_test.log";
  const std::string cmd = env + (env.empty() ? "" : " ") + "'" EMGAIT_CLI "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(log)};
}

std::size_t line_count(const fs::path& p) {
  std::ifstream is(p);
  std::size_t n = 0;
  for (std::string line; std::getline(is, line);) n += !line.empty();
  return n;
}

// One dataset and one 20-iteration run shared by every test in the suite.
class Cli : public ::testing::Test {
 protected:
  static fs::path root() { return fs::temp_directory_path() / "emgait_cli"; }
  static fs::path config() { return root() / "tiny.json"; }
  static fs::path data() { return root() / "data"; }
  static fs::path manifest() { return data() / "manifest.jsonl"; }
  static fs::path run_dir() { return root() / "run"; }

  static void SetUpTestSuite() {
    fs::remove_all(root());
    fs::create_directories(root());
    const json cfg = {
        {"synth",
         {{"identities", 4}, {"views", {0, 2}}, {"distances", {1}}, {"frames_per_seq", 4}, {"render", {{"image_size", 16}, {"base_points", 48}}}}},
        {"data", {{"image_size", 16}, {"num_points", 24}}},
        {"model",
         {{"image", {{"channels", {4, 8, 8, 8}}}},
          {"points", {{"k", 4}, {"channels", {8, 8}}}},
          {"semi", {{"d_visual", 8}, {"d_text", 8}, {"visual_grid", 4}}},
          {"fusion", {{"heads", 2}, {"scaf_layers", 1}}},
          {"hpp_bins", {1, 2}}}},
        {"train",
         {{"lr", 3e-3}, {"total_iters", 20}, {"milestones", {15}}, {"frames_per_seq", 2}, {"P", 2}, {"K", 2}, {"checkpoint_every", 10}}},
        {"eval", {{"frames", 4}, {"split", "all"}}}};
    std::ofstream(config()) << cfg.dump(2);
    synth_out_ = run("synth -c '" + config().string() + "' -o '" + data().string() + "' --threads 2");
    train_out_ = run("train -c '" + config().string() + "' -d '" + manifest().string() + "' -o '" + run_dir().string() + "'");
  }

  static void TearDownTestSuite() { fs::remove_all(root()); }

  static inline Result synth_out_, train_out_;
};

TEST_F(Cli, SynthWritesTheManifest) {
  ASSERT_EQ(synth_out_.code, 0) << synth_out_.out;
  EXPECT_NE(synth_out_.out.find("wrote 8 sequences"), std::string::npos) << synth_out_.out;
  EXPECT_EQ(line_count(manifest()), 9u);  // header + 8 sequences
  EXPECT_TRUE(fs::exists(data() / "resolved_config.json"));

  // Same config, one thread: the manifest hash line is unchanged.
  const fs::path again = root() / "data_again";
  const Result r = run("synth -c '" + config().string() + "' -o '" + again.string() + "' --threads 1");
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(r.out.substr(r.out.find("(manifest")), synth_out_.out.substr(synth_out_.out.find("(manifest")));
  fs::remove_all(again);
}

TEST_F(Cli, TrainLogsEveryIterationAndCheckpoints) {
  ASSERT_EQ(train_out_.code, 0) << train_out_.out;
  EXPECT_EQ(line_count(run_dir() / "train_log.jsonl"), 20u);
  EXPECT_TRUE(fs::exists(run_dir() / "ckpt_0000010.bin"));
  EXPECT_TRUE(fs::exists(run_dir() / "final.bin"));
  std::ifstream is(run_dir() / "train_log.jsonl");
  std::string first;
  std::getline(is, first);
  const json rec = json::parse(first);
  for (const char* k : {"iter", "lr", "loss", "l_tri", "l_ce", "active_triplets", "config_hash"}) EXPECT_TRUE(rec.contains(k)) << k;
}

TEST_F(Cli, ResumeReproducesTheFinalCheckpoint) {
  ASSERT_EQ(train_out_.code, 0);
  const fs::path dir = root() / "resumed";
  const Result r = run("train -c '" + config().string() + "' -d '" + manifest().string() + "' -o '" + dir.string() + "' --resume '" +
                       (run_dir() / "ckpt_0000010.bin").string() + "'");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(line_count(dir / "train_log.jsonl"), 10u);
  EXPECT_EQ(read_file(dir / "final.bin"), read_file(run_dir() / "final.bin"));
}

TEST_F(Cli, DivergenceExitsWithDiagnostic) {
  const fs::path dir = root() / "nan";
  const Result r = run("train -c '" + config().string() + "' -d '" + manifest().string() + "' -o '" + dir.string() + "'",
                       "EMGAIT_INJECT_NAN_AT=3");
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_NE(r.out.find("divergence"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "diverged.bin"));
}

TEST_F(Cli, EmbedOneRecordPerSequenceDeterministically) {
  ASSERT_EQ(train_out_.code, 0);
  const std::string ck = (run_dir() / "final.bin").string();
  const fs::path a = root() / "a.jsonl", b = root() / "b.jsonl";
  ASSERT_EQ(run("embed --checkpoint '" + ck + "' -d '" + manifest().string() + "' -o '" + a.string() + "'").code, 0);
  ASSERT_EQ(run("embed --checkpoint '" + ck + "' -d '" + manifest().string() + "' -o '" + b.string() + "' --threads 1").code, 0);
  std::ifstream is(a);
  EXPECT_EQ(parse_embeddings(is).size(), 8u);
  EXPECT_EQ(read_file(a), read_file(b));

  const Result missing = run("embed --checkpoint '" + (root() / "nope.bin").string() + "' -d '" + manifest().string() + "' -o '" +
                             (root() / "c.jsonl").string() + "'");
  EXPECT_EQ(missing.code, 2) << missing.out;
}

TEST_F(Cli, EvalWritesMetricsAndHandlesEmptyPartitions) {
  ASSERT_EQ(train_out_.code, 0);
  const fs::path emb = root() / "eval.jsonl";
  ASSERT_EQ(run("embed --checkpoint '" + (run_dir() / "final.bin").string() + "' -d '" + manifest().string() + "' -o '" + emb.string() + "'").code, 0);
  const fs::path out = root() / "eval";
  const Result r = run("eval --embeddings '" + emb.string() + "' -o '" + out.string() + "' --plot");
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string csv = read_file(out / "metrics.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "protocol,metric,NM,BG,NT,Overall,config_hash");
  EXPECT_NE(csv.find("N/A"), std::string::npos);  // no carry or coat sequences
  EXPECT_TRUE(fs::exists(out / "metrics.json"));
  EXPECT_TRUE(fs::exists(out / "metrics.svg"));

  // Only one distance level: every cross-distance partition is empty.
  const Result d = run("eval --embeddings '" + emb.string() + "' -o '" + (root() / "eval_d").string() + "' --protocol cross-distance");
  EXPECT_EQ(d.code, 0) << d.out;
  EXPECT_NE(read_file(root() / "eval_d" / "metrics.csv").find("N/A"), std::string::npos);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("train -d x").code, 1);
  EXPECT_EQ(run("eval -o '" + (root() / "e").string() + "'").code, 1);
  const fs::path bad = root() / "bad.json";
  std::ofstream(bad) << R"({"train": {"lrr": 1}})";
  const Result r = run("synth -c '" + bad.string() + "' -o '" + (root() / "x").string() + "'");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("train.lrr"), std::string::npos) << r.out;
}

}  // namespace
