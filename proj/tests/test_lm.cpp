#include <gtest/gtest.h>

#include <cmath>

#include "lvt/core/gradcheck.hpp"
#include "lvt/lm/train.hpp"

using namespace lvt;
using T = Tensor<double>;

namespace {

// S_vocab = 4 + 12 + 16 = 32
Config small_lm() {
  Config c;
  c.data.grid_rows = 2;
  c.data.grid_cols = 2;
  c.data.feature_dim = 4;
  c.data.bank_size = 4;
  c.tokenizer.codebook_size = 16;
  c.tokenizer.heads = 1;
  c.lm.text_vocab = 12;
  c.lm.d_model = 8;
  c.lm.heads = 2;
  c.lm.layers = 1;
  c.lm.context = 32;
  c.lm.init_std = 0.3;
  return c;
}

template <class S>
ImageTokens<S> image(std::vector<std::size_t> codes, std::uint64_t seed = 1) {
  Rng rng(seed);
  return {codes, randn<S>({codes.size(), 4}, rng)};
}

template <class S>
void set_head(LanguageModel<S>& lm, std::size_t hot, S bias) {
  auto& p = lm.params();
  p.get("lm.head.weight").value = Tensor<S>(p.get("lm.head.weight").value.shape());
  p.get("lm.head.bias").value = Tensor<S>(p.get("lm.head.bias").value.shape());
  p.get("lm.head.bias").value[hot] = bias;
}

}  // namespace

TEST(Vocabulary, IdLayoutExample) {
  const Vocabulary v{8, 64};
  const auto img = image<double>({5, 9});
  const auto s = build_sequence<double>(v, &img, {0, 3}, Order::ImageFirst, InputMode::Continuous);
  EXPECT_EQ(s.ids, (std::vector<std::size_t>{1, 2, 17, 21, 3, 4, 7}));
  EXPECT_EQ(v.size(), 76u);
  EXPECT_THROW(v.visual_id(64), ValidationError);
  EXPECT_THROW(v.text_id(8), ValidationError);
}

TEST(BuildSequence, TextOnlyHasNoImageSpan) {
  const Vocabulary v{8, 64};
  const auto s = build_sequence<double>(v, nullptr, {0, 3}, Order::TextFirst, InputMode::Continuous);
  EXPECT_EQ(s.ids, (std::vector<std::size_t>{1, 4, 7}));
  EXPECT_TRUE(s.override_positions().empty());
  EXPECT_FALSE(s.order.has_value());
}

TEST(BuildSequence, ContinuousModeOverridesExactlyTheCodePositions) {
  const Vocabulary v{8, 64};
  const auto img = image<double>({5, 9, 1});
  const auto s = build_sequence<double>(v, &img, {2}, Order::ImageFirst, InputMode::Continuous);
  EXPECT_EQ(s.override_positions(), (std::vector<std::size_t>{2, 3, 4}));
  const auto q = build_sequence<double>(v, &img, {2}, Order::ImageFirst, InputMode::Quantized);
  EXPECT_TRUE(q.override_positions().empty());
  // text-first keeps id embeddings for the image
  const auto tf = build_sequence<double>(v, &img, {2}, Order::TextFirst, InputMode::Continuous);
  EXPECT_EQ(tf.ids, (std::vector<std::size_t>{1, 6, 2, 17, 21, 13, 3}));
  EXPECT_TRUE(tf.override_positions().empty());
}

TEST(BuildSequence, RejectsEmptyInputs) {
  const Vocabulary v{8, 64};
  EXPECT_THROW(build_sequence<double>(v, nullptr, {}, Order::ImageFirst, InputMode::Continuous), ValidationError);
  const ImageTokens<double> empty{};
  EXPECT_THROW(build_sequence<double>(v, &empty, {1}, Order::ImageFirst, InputMode::Continuous), ValidationError);
}

TEST(BuildSequence, LossMaskScopes) {
  const Vocabulary v{8, 64};
  const auto img = image<double>({5, 9});
  const auto all = build_sequence<double>(v, &img, {0, 3}, Order::ImageFirst, InputMode::Continuous);
  EXPECT_EQ(all.loss_mask, (std::vector<std::uint8_t>{0, 1, 1, 1, 1, 1, 1}));
  const auto resp = build_sequence<double>(v, &img, {0, 3}, Order::ImageFirst, InputMode::Continuous,
                                           {LossScope::Response, true, true});
  EXPECT_EQ(resp.ids.back(), Vocabulary::kPad);
  EXPECT_EQ(resp.loss_mask, (std::vector<std::uint8_t>{0, 0, 0, 0, 0, 1, 1, 1}));
  const auto nospec = build_sequence<double>(v, &img, {0, 3}, Order::TextFirst, InputMode::Continuous,
                                             {LossScope::All, false, false});
  EXPECT_EQ(nospec.loss_mask, (std::vector<std::uint8_t>{0, 1, 1, 0, 1, 1, 0}));
}

TEST(BuildSequence, InputModeNeverChangesTargets) {
  const Vocabulary v{12, 16};
  const auto img = image<double>({3, 3, 7});
  for (auto order : {Order::ImageFirst, Order::TextFirst}) {
    const auto a = build_sequence<double>(v, &img, {1, 2}, order, InputMode::Continuous);
    const auto b = build_sequence<double>(v, &img, {1, 2}, order, InputMode::Quantized);
    EXPECT_EQ(a.ids, b.ids);
    EXPECT_EQ(a.loss_mask, b.loss_mask);
    const auto ta = next_token_targets<double>({&a}, a.size());
    const auto tb = next_token_targets<double>({&b}, b.size());
    EXPECT_EQ(ta.targets, tb.targets);
    EXPECT_EQ(ta.weights, tb.weights);
  }
}

TEST(LmForward, SingleTokenShapeAndFiniteLogits) {
  LanguageModel<double> lm(small_lm(), 3);
  MultimodalSequence<double> s;
  s.ids = {Vocabulary::kBos};
  s.loss_mask = {0};
  Tape<double> t;
  auto o = lm.forward(t, {&s});
  EXPECT_EQ(o.logits.value().shape(), (Shape{1, 32}));
  EXPECT_TRUE(o.logits.value().all_finite());
}

TEST(LmForward, RejectsOutOfVocabularyAndOverlongInput) {
  LanguageModel<double> lm(small_lm(), 3);
  MultimodalSequence<double> s;
  s.ids = {1, 32};
  s.loss_mask = {0, 1};
  Tape<double> t;
  EXPECT_THROW(lm.forward(t, {&s}), ValidationError);
  s.ids.assign(33, 4);
  s.loss_mask.assign(33, 1);
  EXPECT_THROW(lm.forward(t, {&s}), ValidationError);
}

TEST(LmForward, CausalAt16RandomPositions) {
  LanguageModel<double> lm(small_lm(), 5);
  const Vocabulary& v = lm.vocab();
  Rng rng(9);
  std::uniform_int_distribution<std::size_t> code(0, 15), word(0, 11);
  for (int trial = 0; trial < 16; ++trial) {
    std::vector<std::size_t> codes(4);
    for (auto& c : codes) c = code(rng);
    auto img = image<double>(codes, trial);
    const std::vector<std::size_t> text = {word(rng), word(rng), word(rng)};
    auto base = build_sequence<double>(v, &img, text, Order::ImageFirst, InputMode::Continuous);
    const std::size_t j = std::uniform_int_distribution<std::size_t>(1, base.size() - 1)(rng);
    auto pert = base;
    if (v.is_visual(pert.ids[j])) {
      const std::size_t k = j - 2;
      for (std::size_t d = 0; d < 4; ++d) pert.visual_features.at(k, d) += 1.0;
      pert.ids[j] = v.visual_id((v.code_of(pert.ids[j]) + 1) % 16);
    } else {
      pert.ids[j] = pert.ids[j] == 4 ? 5 : 4;
    }
    Tape<double> t;
    auto a = lm.forward(t, {&base}).logits.value();
    auto b = lm.forward(t, {&pert}).logits.value();
    double diff = 0;
    for (std::size_t i = 0; i < j; ++i)
      for (std::size_t c = 0; c < 32; ++c) diff = std::max(diff, std::abs(a.at(i, c) - b.at(i, c)));
    EXPECT_LE(diff, 1e-6) << "position " << j;
  }
}

TEST(LmForward, PaddingDoesNotChangeShorterSequences) {
  LanguageModel<double> lm(small_lm(), 5);
  auto img = image<double>({1, 2, 3});
  auto s1 = build_sequence<double>(lm.vocab(), &img, {0}, Order::ImageFirst, InputMode::Continuous);
  auto s2 = build_sequence<double>(lm.vocab(), &img, {0, 1, 2, 3, 4}, Order::TextFirst, InputMode::Continuous);
  Tape<double> t;
  auto alone = lm.forward(t, {&s1});
  auto both = lm.forward(t, {&s1, &s2});
  for (std::size_t i = 0; i < s1.size(); ++i)
    for (std::size_t c = 0; c < 32; ++c)
      EXPECT_NEAR(alone.logits.value().at(i, c), both.logits.value().at(i, c), 1e-12);
}

TEST(LmLoss, UniformLogitsGiveLogVocab) {
  LanguageModel<double> lm(small_lm(), 2);
  set_head(lm, 0, 0.0);
  auto img = image<double>({1, 2});
  auto s = build_sequence<double>(lm.vocab(), &img, {3}, Order::ImageFirst, InputMode::Continuous);
  Tape<double> t;
  EXPECT_NEAR(lm_loss(t, lm, {&s}).value().item(), std::log(32.0), 1e-5);
}

TEST(LmLoss, ConfidentCorrectLogitsGiveNearZero) {
  LanguageModel<double> lm(small_lm(), 2);
  set_head(lm, 4, 60.0);
  const auto s = build_sequence<double>(lm.vocab(), nullptr, {0, 0, 0}, Order::TextFirst, InputMode::Continuous);
  Tape<double> t;
  EXPECT_LT(lm_loss(t, lm, {&s}).value().item(), 1e-20);
}

TEST(LmLoss, AllMaskedSequenceIsRejected) {
  LanguageModel<double> lm(small_lm(), 2);
  auto s = build_sequence<double>(lm.vocab(), nullptr, {0, 1}, Order::TextFirst, InputMode::Continuous);
  s.loss_mask.assign(s.size(), 0);
  Tape<double> t;
  EXPECT_THROW(lm_loss(t, lm, {&s}), ValidationError);
}

class LmGradient : public ::testing::TestWithParam<VisualObjective> {};

TEST_P(LmGradient, MatchesFiniteDifferencesAt10Points) {
  auto cfg = small_lm();
  cfg.ablation.visual_objective = GetParam();
  for (std::uint64_t point = 0; point < 10; ++point) {
    LanguageModel<double> lm(cfg, 40 + point);
    Rng rng(point);
    std::uniform_int_distribution<std::size_t> code(0, 15), word(0, 11);
    auto img = image<double>({code(rng), code(rng), code(rng)}, point);
    auto a = build_sequence<double>(lm.vocab(), &img, {word(rng), word(rng)}, Order::ImageFirst,
                                    InputMode::Continuous, {LossScope::All, true, true});
    auto b = build_sequence<double>(lm.vocab(), &img, {word(rng)}, Order::TextFirst, InputMode::Continuous);
    const auto rep = check_param_gradients(
        lm.params(), [&](Tape<double>& t) { return lm_loss(t, lm, {&a, &b}); }, 1e-5, 8);
    EXPECT_LT(rep.max_rel_error, 1e-4) << "point " << point;
  }
}

INSTANTIATE_TEST_SUITE_P(Objectives, LmGradient,
                         ::testing::Values(VisualObjective::Classification, VisualObjective::Regression),
                         [](const auto& info) {
                           return info.param == VisualObjective::Classification ? "Classification" : "Regression";
                         });

TEST(Cfg, EndpointsAreExact) {
  const std::vector<double> u = {0.1, -3.7, 1e-9, 123.456}, c = {2.2, 0.3, -5.5, 7.0};
  EXPECT_EQ(cfg_logits(c, u, 0.0), u);
  EXPECT_EQ(cfg_logits(c, u, 1.0), c);
}

TEST(Cfg, HandBlendExample) {
  const auto l = cfg_logits({3, 0}, {1, 2}, 1.5);
  EXPECT_DOUBLE_EQ(l[0], 4.0);
  EXPECT_DOUBLE_EQ(l[1], -1.0);
  EXPECT_THROW(cfg_logits({1}, {1, 2}, 1.5), DimensionError);
}

TEST(TopK, KOneIsArgmax) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(top_k_sample({0.1, 2.0, -1.0, 1.9}, 1, 1.0, rng), 1u);
}

TEST(TopK, TwoEqualTopLogitsSplitEvenly) {
  Rng rng(12);
  std::size_t first = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto id = top_k_sample({0.0, 3.0, -2.0, 3.0, 1.0}, 2, 1.0, rng);
    ASSERT_TRUE(id == 1 || id == 3);
    first += id == 1;
  }
  EXPECT_NEAR(first / 10000.0, 0.5, 0.03);
}

TEST(TopK, LowTemperatureIsArgmaxAndLargeKClamps) {
  Rng rng(2);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(top_k_sample({0.5, 0.4, 0.6, 0.1}, 4, 1e-4, rng), 2u);
  for (int i = 0; i < 10; ++i) EXPECT_LT(top_k_sample({0.5, 0.4}, 50, 1.0, rng), 2u);
  EXPECT_THROW(top_k_sample({1.0}, 0, 1.0, rng), ValidationError);
  EXPECT_THROW(top_k_sample({1.0}, 1, 0.0, rng), ValidationError);
}

TEST(GenerateImage, ImmediateEndGivesEmptyCodes) {
  LanguageModel<double> lm(small_lm(), 2);
  set_head(lm, Vocabulary::kImgEnd, 100.0);
  Rng rng(1);
  const auto g = generate_image_tokens(lm, {1, 2}, GenerationOptions{}, rng);
  EXPECT_TRUE(g.codes.empty());
  EXPECT_TRUE(g.terminated);
}

TEST(GenerateImage, OnlyVisualIdsAndTruncationFlag) {
  LanguageModel<double> lm(small_lm(), 2);
  set_head(lm, 5, 100.0);  // a text id dominates but is masked out
  lm.params().get("lm.head.bias").value[Vocabulary::kImgEnd] = -100.0;
  Rng rng(1);
  GenerationOptions opt;
  opt.max_len = 6;
  const auto g = generate_image_tokens(lm, {1}, opt, rng);
  EXPECT_FALSE(g.terminated);
  ASSERT_EQ(g.codes.size(), 6u);
  for (auto c : g.codes) EXPECT_LT(c, 16u);
}

TEST(GenerateImage, ScaleOneMatchesConditionalOnlySampling) {
  LanguageModel<double> lm(small_lm(), 8);
  GenerationOptions opt;
  opt.cfg_scale = 1.0;
  opt.max_len = 8;
  Rng a(21), b(21);
  const auto g = generate_image_tokens(lm, {3, 4}, opt, a);
  // hand-rolled conditional stream
  MultimodalSequence<double> s;
  s.ids = {Vocabulary::kBos, lm.vocab().text_id(3), lm.vocab().text_id(4), Vocabulary::kImg};
  std::vector<std::size_t> codes;
  for (std::size_t step = 0; step < opt.max_len; ++step) {
    s.loss_mask.assign(s.size(), 0);
    auto l = last_logits(lm, {&s}).front();
    for (std::size_t id = 0; id < l.size(); ++id)
      if (!lm.vocab().is_visual(id) && id != Vocabulary::kImgEnd) l[id] = -INFINITY;
    const auto id = top_k_sample(l, opt.top_k, opt.temperature, b);
    if (id == Vocabulary::kImgEnd) break;
    codes.push_back(lm.vocab().code_of(id));
    s.ids.push_back(id);
  }
  EXPECT_EQ(g.codes, codes);
}

TEST(GenerateText, GreedyIsDeterministicAndTextOnly) {
  LanguageModel<double> lm(small_lm(), 4);
  GenerationOptions opt;
  opt.top_k = 1;
  opt.max_len = 5;
  const auto img = image<double>({1, 2, 3});
  Rng a(1), b(2);
  const auto x = generate_text(lm, img, opt, a);
  EXPECT_EQ(x, generate_text(lm, img, opt, b));
  for (auto w : x) EXPECT_LT(w, 12u);
  EXPECT_THROW(generate_text(lm, ImageTokens<double>{}, opt, a), ValidationError);
}

TEST(GenerateText, EndMarkerStops) {
  LanguageModel<double> lm(small_lm(), 4);
  set_head(lm, Vocabulary::kPad, 100.0);
  Rng rng(1);
  EXPECT_TRUE(generate_text(lm, image<double>({1}), GenerationOptions{}, rng).empty());
}

TEST(Rerank, SingleCandidateAndTies) {
  LanguageModel<double> lm(small_lm(), 4);
  EXPECT_EQ(rerank_by_likelihood(lm, {{1, 2}}, {0}), 0u);
  EXPECT_EQ(rerank_by_likelihood(lm, {{1, 2}, {1, 2}, {1, 2}}, {0}), 0u);
  EXPECT_THROW(rerank_by_likelihood(lm, {}, {0}), ValidationError);
}

TEST(Rerank, OverfitModelPrefersItsTrainingTarget) {
  auto cfg = small_lm();
  cfg.lm.steps = 150;
  cfg.lm.batch = 4;
  cfg.lm.lr = 1e-2;
  cfg.lm.warmup = 10;
  cfg.lm.mix_ratio = 0;
  cfg.lm.image_first_prob = 0;
  LanguageModel<float> lm(cfg, 4);
  LmData<float> data;
  data.images.push_back(image<float>({4, 9, 9, 2}));
  data.captions.push_back({1, 5});
  MetricsSink sink;
  train_lm(lm, data, cfg, sink);
  EXPECT_EQ(rerank_by_likelihood(lm, {{7, 0, 13}, {4, 9, 9, 2}, {1, 1}}, {1, 5}), 1u);
}

TEST(TrainLm, TenStepsFiniteAndDecreasing) {
  auto cfg = small_lm();
  cfg.lm.steps = 10;
  cfg.lm.warmup = 0;
  cfg.lm.lr = 1e-2;
  cfg.lm.batch = 8;
  cfg.lm.mix_ratio = 0;
  LanguageModel<float> lm(cfg, 4);
  LmData<float> data;
  data.images.push_back(image<float>({4, 9}));
  data.captions.push_back({1, 5});
  MetricsSink sink;
  std::vector<double> losses;
  train_lm(lm, data, cfg, sink, 0, [&](std::size_t, const LmStepStats& s) { losses.push_back(s.loss); });
  ASSERT_EQ(losses.size(), 10u);
  for (auto l : losses) EXPECT_TRUE(std::isfinite(l));
  EXPECT_LT(losses.back(), losses.front());
}

TEST(TrainLm, MixRatioZeroDrawsNoTextBatches) {
  auto cfg = small_lm();
  cfg.lm.steps = 30;
  cfg.lm.batch = 2;
  cfg.lm.mix_ratio = 0;
  LanguageModel<float> lm(cfg, 4);
  LmData<float> data;
  data.images.push_back(image<float>({4, 9}));
  data.captions.push_back({1, 5});
  data.texts.push_back({2, 3});
  MetricsSink sink;
  train_lm(lm, data, cfg, sink);
  for (const auto& r : sink.records()) EXPECT_EQ(std::get<std::string>(r.at("batch_kind")), "multimodal");
  cfg.lm.mix_ratio = 1;
  LanguageModel<float> lm2(cfg, 4);
  MetricsSink sink2;
  train_lm(lm2, data, cfg, sink2);
  for (const auto& r : sink2.records()) EXPECT_EQ(std::get<std::string>(r.at("batch_kind")), "text");
}

TEST(TrainLm, FrozenModeOnlyTrainsTheProjection) {
  auto cfg = small_lm();
  cfg.lm.steps = 20;
  cfg.lm.batch = 4;
  cfg.lm.image_first_prob = 1;
  cfg.ablation.lm = LmMode::Frozen;
  LanguageModel<float> lm(cfg, 4);
  LmData<float> data;
  data.images.push_back(image<float>({4, 9}));
  data.captions.push_back({1, 5});
  const auto proj = checksum(lm.params(), "lm.proj.");
  std::uint64_t others = 0;
  for (const auto prefix : {"lm.L", "lm.embed", "lm.pos", "lm.head", "lm.ln_f"})
    others ^= checksum(lm.params(), prefix) * 31;
  MetricsSink sink;
  train_lm(lm, data, cfg, sink);
  std::uint64_t after = 0;
  for (const auto prefix : {"lm.L", "lm.embed", "lm.pos", "lm.head", "lm.ln_f"})
    after ^= checksum(lm.params(), prefix) * 31;
  EXPECT_EQ(after, others);
  EXPECT_NE(checksum(lm.params(), "lm.proj."), proj);
}
