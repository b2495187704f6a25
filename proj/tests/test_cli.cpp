#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "lvt/app/cli.hpp"

using namespace lvt;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "lvt");
  std::vector<const char*> argv;
  for (auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / "lvt_cli_test" / name;
  fs::remove_all(d);
  return d.string();
}

// Small enough to train every stage in a few seconds.
std::vector<std::string> tiny(const std::string& out) {
  return {"--out",         out,
          "--set",         "data.train_items=120",
          "--set",         "data.val_items=40",
          "--set",         "tokenizer.steps=20",
          "--set",         "lm.steps=20",
          "--set",         "lm.pairs=32",
          "--set",         "denoiser.steps=20"};
}

std::vector<std::string> with(std::vector<std::string> a, std::initializer_list<std::string> more) {
  a.insert(a.end(), more);
  return a;
}

}  // namespace

TEST(Cli, UsageErrorsExitWithOne) {
  EXPECT_EQ(cli({}).code, 1);
  EXPECT_EQ(cli({"no-such-command"}).code, 1);
  EXPECT_EQ(cli({"--bogus", "config"}).code, 1);
  EXPECT_EQ(cli({"tokenize"}).code, 1);  // missing --input/--id
}

TEST(Cli, HelpExitsWithZero) {
  const auto r = cli({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("train-tokenizer"), std::string::npos);
}

TEST(Cli, BadConfigValuesAreValidationErrors) {
  const auto dir = fresh_dir("badcfg");
  auto r = cli({"--out", dir, "--set", "no.such_key=1", "config"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("no.such_key"), std::string::npos);
  EXPECT_EQ(cli({"--out", dir, "--set", "lm.lr=-1", "config"}).code, 1);
  EXPECT_EQ(cli({"--out", dir, "--set", "lm.steps=abc", "config"}).code, 1);
  EXPECT_EQ(cli({"--out", dir, "--metrics", "xml", "config"}).code, 1);
  EXPECT_EQ(cli({"--out", dir, "ablate", "nope"}).code, 1);
}

TEST(Cli, ConfigRoundTripsThroughAFile) {
  const auto dir = fresh_dir("cfg");
  const auto a = cli({"--out", dir, "--seed", "9", "--set", "lm.steps=77", "config"});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_NE(a.out.find("steps = 77"), std::string::npos);
  fs::create_directories(dir);
  const auto path = dir + "/c.ini";
  write_file_atomic(path, a.out);
  const auto b = cli({"--out", dir, "--config", path, "config"});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(a.out, b.out);
}

TEST(Cli, MissingCheckpointIsARuntimeError) {
  const auto dir = fresh_dir("missing");
  EXPECT_EQ(cli(with(tiny(dir), {"gen-corpus"})).code, 0);
  const auto r = cli(with(tiny(dir), {"tokenize", "--input", dir + "/val.lvtc", "--id", "0"}));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("tokenizer.ckpt"), std::string::npos);
}

TEST(Cli, PipelineRunsEndToEnd) {
  const auto dir = fresh_dir("pipeline");
  const auto base = tiny(dir);
  ASSERT_EQ(cli(with(base, {"gen-corpus"})).code, 0);
  EXPECT_TRUE(fs::exists(dir + "/train.lvtc"));
  EXPECT_TRUE(fs::exists(dir + "/manifest.json"));

  const auto tt = cli(with(base, {"train-tokenizer"}));
  ASSERT_EQ(tt.code, 0) << tt.err;
  EXPECT_TRUE(fs::exists(dir + "/tokenizer.ckpt"));
  const auto metrics = dir + "/metrics/tokenizer.jsonl";
  ASSERT_TRUE(fs::exists(metrics));
  const std::string first = read_file(metrics);

  const auto val = ingest_features(dir + "/val.lvtc", Config{}.data.feature_dim).items;
  const auto id = std::to_string(val.front().grid.image_id);
  const auto tk = cli(with(base, {"tokenize", "--input", dir + "/val.lvtc", "--id", id}));
  ASSERT_EQ(tk.code, 0) << tk.err;
  EXPECT_EQ(tk.out.rfind("T ", 0), 0u);
  EXPECT_NE(tk.out.find("codes "), std::string::npos);
  EXPECT_EQ(cli(with(base, {"tokenize", "--input", dir + "/val.lvtc", "--id", "999999"})).code, 1);

  ASSERT_EQ(cli(with(base, {"train-lm"})).code, 0);
  ASSERT_EQ(cli(with(base, {"train-denoiser"})).code, 0);
  const auto gt = cli(with(base, {"generate-text", "--input", dir + "/val.lvtc", "--id", id}));
  ASSERT_EQ(gt.code, 0) << gt.err;
  EXPECT_EQ(gt.out.rfind("caption", 0), 0u);
  const auto gi = cli(with(base, {"generate-image", "--prompt", "1,2", "--denoise"}));
  ASSERT_EQ(gi.code, 0) << gi.err;
  const auto j = nlohmann::json::parse(read_file(dir + "/generated.json"));
  EXPECT_EQ(j["signal"].size(), j["rows"].get<std::size_t>() * j["dim"].get<std::size_t>());

  // same seed and config: byte-identical metrics
  ASSERT_EQ(cli(with(base, {"train-tokenizer"})).code, 0);
  EXPECT_EQ(read_file(metrics), first);
}

TEST(Cli, CsvMetricsHaveOneHeader) {
  const auto dir = fresh_dir("csv");
  auto base = tiny(dir);
  base.insert(base.end(), {"--metrics", "csv"});
  ASSERT_EQ(cli(with(base, {"gen-corpus"})).code, 0);
  ASSERT_EQ(cli(with(base, {"train-tokenizer"})).code, 0);
  std::istringstream in(read_file(dir + "/metrics/tokenizer.csv"));
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 21u);
  EXPECT_NE(lines[0].find("step"), std::string::npos);
  EXPECT_EQ(lines[1].find("step"), std::string::npos);
}
