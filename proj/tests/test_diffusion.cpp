#include <gtest/gtest.h>

#include <cmath>

#include "lvt/core/gradcheck.hpp"
#include "lvt/diffusion/denoiser.hpp"

using namespace lvt;
using T = Tensor<double>;

namespace {

DenoiserConfig tiny_denoiser() {
  DenoiserConfig d;
  d.diffusion_steps = 10;
  d.hidden = 6;
  d.time_dim = 4;
  d.init_std = 0.5;
  return d;
}

EpsPredictor<double> zero_predictor() {
  return [](Tape<double>& t, const Var<double>& z, const std::vector<std::size_t>&, const Var<double>&) {
    return t.constant(T(z.value().shape()));
  };
}

}  // namespace

TEST(NoiseSchedule, RejectsBetasOutsideOpenUnitInterval) {
  EXPECT_THROW(NoiseSchedule({0.1, 0.0}), ValidationError);
  EXPECT_THROW(NoiseSchedule({1.0}), ValidationError);
  EXPECT_THROW(NoiseSchedule(std::vector<double>{}), ValidationError);
}

TEST(NoiseSchedule, AlphaBarStrictlyDecreasingAndBelowOne) {
  const auto s = NoiseSchedule::linear(50, 2e-3, 0.4);
  EXPECT_LT(s.alpha_bar(1), 1.0);
  for (std::size_t t = 2; t <= s.steps(); ++t) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
  EXPECT_THROW(s.alpha_bar(51), ValidationError);
}

TEST(DiffusionForward, HandExample) {
  const NoiseSchedule s({0.75});  // abar_1 = 0.25
  const auto z = diffusion_forward(T({1}, {2.0}), 1, T({1}, {1.0}), s);
  EXPECT_NEAR(z[0], 1.8660254037844386, 1e-12);
}

TEST(DiffusionForward, NoNoiseEndpoint) {
  const NoiseSchedule s({1e-15});
  const auto z = diffusion_forward(T({2}, {0.3, -1.2}), 1, T({2}, {5.0, 5.0}), s);
  EXPECT_NEAR(z[0], 0.3, 1e-6);
  EXPECT_NEAR(z[1], -1.2, 1e-6);
}

TEST(DiffusionForward, InversionRoundTripAtEveryStep) {
  const auto s = NoiseSchedule::linear(50, 2e-3, 0.4);
  Rng rng(4);
  const auto z0 = randn<double>({8, 16}, rng);
  double worst = 0;
  for (std::size_t t = 1; t <= s.steps(); ++t) {
    const auto eps = randn<double>({8, 16}, rng);
    const auto back = diffusion_invert(diffusion_forward(z0, t, eps, s), t, eps, s);
    for (std::size_t i = 0; i < z0.size(); ++i) worst = std::max(worst, std::abs(back[i] - z0[i]));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(DiffusionForward, StepOutOfRangeIsRejected) {
  const NoiseSchedule s({0.1, 0.2});
  EXPECT_THROW(diffusion_forward(T({1}), 0, T({1}), s), ValidationError);
  EXPECT_THROW(diffusion_forward(T({1}), 3, T({1}), s), ValidationError);
}

TEST(TimeEmbedding, StepZeroIsSinZeroCosOne) {
  const auto e = time_embedding<double>({0, 3}, 4);
  EXPECT_EQ(e.at(0, 0), 0.0);
  EXPECT_EQ(e.at(0, 2), 1.0);
  EXPECT_NEAR(e.at(1, 0), std::sin(3.0), 1e-15);
  EXPECT_NEAR(e.at(1, 1), std::sin(0.03), 1e-15);
  EXPECT_THROW(time_embedding<double>({1}, 3), ValidationError);
}

TEST(EpsilonLoss, OraclePredictorGivesZero) {
  const auto s = NoiseSchedule::linear(10, 1e-2, 0.3);
  Rng rng(2);
  const auto z0 = randn<double>({6, 5}, rng);
  const std::vector<std::size_t> ts = {1, 2, 4, 7, 9, 10};
  const auto eps = randn<double>({6, 5}, rng);
  EpsPredictor<double> oracle = [&](Tape<double>& t, const Var<double>& z, const std::vector<std::size_t>& steps,
                                    const Var<double>&) {
    T e(z.value().shape());
    for (std::size_t r = 0; r < e.rows(); ++r) {
      const double ab = s.alpha_bar(steps[r]);
      for (std::size_t j = 0; j < e.cols(); ++j)
        e.at(r, j) = (z.value().at(r, j) - std::sqrt(ab) * z0.at(r, j)) / std::sqrt(1 - ab);
    }
    return t.constant(e);
  };
  Tape<double> t;
  EXPECT_LT(epsilon_loss_at(t, oracle, z0, T({6, 2}), ts, eps, s).value().item(), 1e-20);
}

TEST(EpsilonLoss, ZeroPredictorExpectationIsSignalDimension) {
  const auto s = NoiseSchedule::linear(50, 2e-3, 0.4);
  Rng rng(11);
  const std::size_t Z = 8;
  const auto z0 = randn<double>({20000, Z}, rng, 0.25);
  Tape<double> t;
  const double loss = epsilon_loss(t, zero_predictor(), z0, T({20000, 1}), s, rng).value().item();
  EXPECT_NEAR(loss, static_cast<double>(Z), 0.05 * Z);
}

TEST(EpsilonLoss, ParameterGradientsMatchFiniteDifferences) {
  const auto dc = tiny_denoiser();
  const auto s = NoiseSchedule::linear(dc.diffusion_steps, dc.beta_start, dc.beta_end);
  for (std::uint64_t point = 0; point < 10; ++point) {
    Denoiser<double> den(3, 2, dc, 100 + point);
    Rng rng(point);
    const auto z0 = randn<double>({4, 3}, rng), cond = randn<double>({4, 2}, rng), eps = randn<double>({4, 3}, rng);
    std::uniform_int_distribution<std::size_t> step(1, dc.diffusion_steps);
    std::vector<std::size_t> ts(4);
    for (auto& x : ts) x = step(rng);
    const auto pred = den.predictor();
    const auto rep = check_param_gradients(
        den.params(), [&](Tape<double>& t) { return epsilon_loss_at(t, pred, z0, cond, ts, eps, s); }, 1e-5, 16);
    EXPECT_LT(rep.max_rel_error, 1e-4) << "point " << point;
  }
}

TEST(Denoiser, RejectsShapeMismatch) {
  Denoiser<double> den(3, 2, tiny_denoiser(), 1);
  Tape<double> t;
  EXPECT_THROW(den(t, t.constant(T({2, 4})), {1, 1}, t.constant(T({2, 2}))), DimensionError);
  EXPECT_THROW(den(t, t.constant(T({2, 3})), {1, 11}, t.constant(T({2, 2}))), ValidationError);
}

TEST(DdpmSample, SameSeedSameSamples) {
  Denoiser<double> den(3, 2, tiny_denoiser(), 1);
  const auto s = NoiseSchedule::linear(10, 2e-3, 0.4);
  const T cond({5, 2}, 0.5);
  Rng a(8), b(8);
  const auto x = ddpm_sample(den.predictor(), cond, 3, s, a);
  const auto y = ddpm_sample(den.predictor(), cond, 3, s, b);
  EXPECT_EQ(x.vec(), y.vec());
  EXPECT_TRUE(x.all_finite());
}

TEST(DdpmSample, SingleStepScheduleIsFinite) {
  auto dc = tiny_denoiser();
  dc.diffusion_steps = 1;
  Denoiser<double> den(3, 2, dc, 1);
  Rng rng(1);
  const auto x = ddpm_sample(den.predictor(), T({4, 2}), 3, NoiseSchedule({0.3}), rng);
  EXPECT_TRUE(x.all_finite());
}

TEST(DdpmSample, ExactPredictorRecoversFixedPoint) {
  // With the true conditional noise for a point mass at z0, every reverse
  // step lands on the posterior mean and the final step returns z0.
  const auto s = NoiseSchedule::linear(20, 1e-2, 0.3);
  const T z0({1, 3}, {0.5, -0.25, 1.0});
  EpsPredictor<double> exact = [&](Tape<double>& t, const Var<double>& z, const std::vector<std::size_t>& steps,
                                   const Var<double>&) {
    T e(z.value().shape());
    for (std::size_t r = 0; r < e.rows(); ++r) {
      const double ab = s.alpha_bar(steps[r]);
      for (std::size_t j = 0; j < e.cols(); ++j)
        e.at(r, j) = (z.value().at(r, j) - std::sqrt(ab) * z0[j]) / std::sqrt(1 - ab);
    }
    return t.constant(e);
  };
  Rng rng(3);
  const auto x = ddpm_sample(exact, T({4, 1}), 3, s, rng);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(x.at(r, j), z0[j], 1e-9);
}

TEST(TrainDenoiser, LossDecreasesAndMetricsPerStep) {
  Config cfg;
  cfg.denoiser = tiny_denoiser();
  cfg.denoiser.hidden = 32;
  cfg.denoiser.steps = 200;
  cfg.denoiser.batch = 16;
  cfg.denoiser.lr = 3e-3;
  Rng rng(6);
  const auto z0 = randn<float>({8, 4}, rng, 0.25f), cond = randn<float>({8, 4}, rng);
  Denoiser<float> den(4, 4, cfg.denoiser, 3);
  MetricsSink sink;
  std::vector<double> losses;
  train_denoiser(den, z0, cond, cfg, sink, 0, [&](std::size_t, double l) { losses.push_back(l); });
  ASSERT_EQ(sink.records().size(), 200u);
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    head += losses[i];
    tail += losses[losses.size() - 1 - i];
  }
  EXPECT_LT(tail, head);
}
