#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "lvt/diffusion/denoiser.hpp"
#include "lvt/io/checkpoint.hpp"
#include "lvt/lm/train.hpp"
#include "lvt/tokenizer/train.hpp"

using namespace lvt;
namespace fs = std::filesystem;

namespace {

Config small() {
  Config c;
  c.data.grid_rows = 2;
  c.data.grid_cols = 2;
  c.data.feature_dim = 4;
  c.data.bank_size = 4;
  c.tokenizer.codebook_size = 8;
  c.tokenizer.heads = 1;
  c.lm.text_vocab = 4;
  c.lm.d_model = 8;
  c.lm.layers = 1;
  c.lm.context = 16;
  c.denoiser.hidden = 8;
  c.denoiser.time_dim = 4;
  return c;
}

std::string temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "lvt_persist_test";
  fs::create_directories(dir);
  return (dir / name).string();
}

template <class S>
void expect_bit_identical(const ParamStore<S>& a, const ParamStore<S>& b) {
  ASSERT_EQ(a.items().size(), b.items().size());
  for (const auto& [name, p] : a.items()) {
    const auto& q = b.get(name);
    ASSERT_EQ(p.value.shape(), q.value.shape()) << name;
    EXPECT_EQ(p.trainable, q.trainable) << name;
    EXPECT_EQ(std::memcmp(p.value.data().data(), q.value.data().data(), p.value.size() * sizeof(S)), 0) << name;
  }
}

std::vector<std::string> lines_of(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExactForEveryStage) {
  const Config cfg = small();
  Tokenizer<float> tk(cfg, 1);
  tk.params().get("selector.fc1.weight").value[0] = -0.0f;  // sign of zero survives
  LanguageModel<float> lm(cfg, 2);
  Denoiser<double> den(16, 16, cfg.denoiser, 3);
  const auto p1 = temp_path("tok.ckpt"), p2 = temp_path("lm.ckpt"), p3 = temp_path("den.ckpt");
  save_checkpoint(tk.params(), cfg, Stage::Tokenizer, 17, p1);
  save_checkpoint(lm.params(), cfg, Stage::Lm, 18, p2);
  save_checkpoint(den.params(), cfg, Stage::Denoiser, 19, p3);
  const auto a = load_checkpoint<float>(p1, cfg, Stage::Tokenizer);
  const auto b = load_checkpoint<float>(p2, cfg, Stage::Lm);
  const auto c = load_checkpoint<double>(p3, cfg, Stage::Denoiser);
  EXPECT_EQ(a.step, 17u);
  EXPECT_EQ(b.step, 18u);
  EXPECT_EQ(c.step, 19u);
  expect_bit_identical(tk.params(), a.params);
  expect_bit_identical(lm.params(), b.params);
  expect_bit_identical(den.params(), c.params);
  EXPECT_TRUE(std::signbit(a.params.get("selector.fc1.weight").value[0]));
  EXPECT_EQ(encode_checkpoint(a.params, cfg, Stage::Tokenizer, 17), read_file(p1));
}

TEST(Checkpoint, AssignRestoresModelBehaviour) {
  const Config cfg = small();
  Tokenizer<float> tk(cfg, 1), fresh(cfg, 99);
  save_checkpoint(tk.params(), cfg, Stage::Tokenizer, 0, temp_path("assign.ckpt"));
  assign_params(fresh.params(), load_checkpoint<float>(temp_path("assign.ckpt"), cfg, Stage::Tokenizer).params);
  Rng rng(4);
  const auto X = randn<float>({4, 4}, rng);
  EXPECT_EQ(tk.tokenize_one(X).codes, fresh.tokenize_one(X).codes);
}

TEST(Checkpoint, MismatchedConfigIsADigestError) {
  const Config cfg = small();
  Tokenizer<float> tk(cfg, 1);
  const auto p = temp_path("digest.ckpt");
  save_checkpoint(tk.params(), cfg, Stage::Tokenizer, 0, p);
  Config other = cfg;
  other.tokenizer.codebook_size = 16;
  try {
    load_checkpoint<float>(p, other, Stage::Tokenizer);
    FAIL() << "expected a digest error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("digest"), std::string::npos);
  }
  // training-only keys do not participate
  Config lr = cfg;
  lr.tokenizer.lr = 1e-4;
  EXPECT_NO_THROW(load_checkpoint<float>(p, lr, Stage::Tokenizer));
  EXPECT_THROW(load_checkpoint<float>(p, cfg, Stage::Lm), ValidationError);
  EXPECT_THROW(load_checkpoint<double>(p, cfg, Stage::Tokenizer), FormatError);
}

TEST(Checkpoint, TruncatedAndCorruptFilesAreParseErrors) {
  const Config cfg = small();
  LanguageModel<float> lm(cfg, 2);
  const std::string bytes = encode_checkpoint(lm.params(), cfg, Stage::Lm, 5);
  for (std::size_t cut : {std::size_t{0}, std::size_t{4}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(decode_checkpoint<float>(bytes.substr(0, cut), cfg, Stage::Lm), FormatError) << "cut " << cut;
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint<float>(bad, cfg, Stage::Lm), FormatError);
  std::string ver = bytes;
  ver[8] = 9;
  EXPECT_THROW(decode_checkpoint<float>(ver, cfg, Stage::Lm), FormatError);
  EXPECT_THROW(decode_checkpoint<float>(bytes + "x", cfg, Stage::Lm), FormatError);
  EXPECT_THROW(load_checkpoint<float>(temp_path("missing.ckpt"), cfg, Stage::Lm), IoError);
}

TEST(Checkpoint, WriteIsAtomicAndLeavesNoTemporary) {
  const Config cfg = small();
  LanguageModel<float> lm(cfg, 2);
  const auto p = temp_path("atomic.ckpt");
  save_checkpoint(lm.params(), cfg, Stage::Lm, 1, p);
  for (const auto& e : fs::directory_iterator(fs::path(p).parent_path()))
    EXPECT_EQ(e.path().string().find(".tmp"), std::string::npos) << e.path();
  EXPECT_THROW(save_checkpoint(lm.params(), cfg, Stage::Lm, 1, p + "/x.ckpt"), IoError);
}

TEST(Metrics, JsonLineIsSingleLineWithSortedKeys) {
  const auto line = metric_to_json_line({{"step", 3.0}, {"loss", 0.5}, {"stage", std::string("lm")}});
  EXPECT_EQ(line, R"({"loss":0.5,"stage":"lm","step":3.0})");
  EXPECT_EQ(line.find('\n'), std::string::npos);
  EXPECT_EQ(nlohmann::json::parse(line)["step"], 3.0);
}

TEST(Metrics, CsvHeaderWrittenExactlyOnce) {
  const auto p = temp_path("m.csv");
  {
    MetricsSink s(p, MetricsFormat::Csv);
    for (int i = 0; i < 3; ++i) s.emit({{"step", double(i)}, {"loss", 1.0 / (i + 1)}, {"stage", std::string("a,b")}});
    EXPECT_THROW(s.emit({{"step", 1.0}}), ValidationError);
  }
  const auto lines = lines_of(p);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "loss,stage,step");
  EXPECT_EQ(lines[1], "1.0,\"a,b\",0.0");
  EXPECT_THROW(parse_metrics_format("xml"), ValidationError);
}

TEST(Metrics, TenStepRunGivesTenLines) {
  Config cfg = small();
  cfg.tokenizer.steps = 10;
  cfg.tokenizer.batch = 2;
  Rng rng(1);
  std::vector<PatchGrid> grids(4);
  for (auto& g : grids) g = PatchGrid{0, 2, 2, randn<float>({4, 4}, rng)};
  std::vector<const PatchGrid*> ptrs;
  for (auto& g : grids) ptrs.push_back(&g);
  const auto p = temp_path("ten.jsonl");
  {
    Tokenizer<float> tk(cfg, 1);
    MetricsSink sink(p, MetricsFormat::Jsonl);
    train_tokenizer(tk, ptrs, cfg, sink);
  }
  const auto lines = lines_of(p);
  ASSERT_EQ(lines.size(), 10u);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto j = nlohmann::json::parse(lines[i]);
    EXPECT_EQ(j["step"], double(i));
    for (const char* key : {"perplexity", "keep_fraction", "loss", "lr", "grad_norm"}) EXPECT_TRUE(j.contains(key));
  }
  // identical config and seed: identical bytes
  const auto p2 = temp_path("ten2.jsonl");
  {
    Tokenizer<float> tk(cfg, 1);
    MetricsSink sink(p2, MetricsFormat::Jsonl);
    train_tokenizer(tk, ptrs, cfg, sink);
  }
  EXPECT_EQ(read_file(p), read_file(p2));
}
