#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "lvt/core/attention.hpp"
#include "lvt/core/ops.hpp"
#include "lvt/core/rng.hpp"

using namespace lvt;
using T = Tensor<double>;

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  Tape<double> t;
  auto y = matmul(t.constant(T::matrix({{1, 0}, {0, 1}})), t.constant(T::matrix({{5}, {6}})));
  EXPECT_EQ(y.value(), T::matrix({{5}, {6}}));
}

TEST(Matmul, HandComputedProduct) {
  Tape<double> t;
  auto y = matmul(t.constant(T::matrix({{1, 2}, {3, 4}})), t.constant(T::matrix({{5}, {6}})));
  EXPECT_EQ(y.value(), T::matrix({{17}, {39}}));
}

TEST(Matmul, InnerExtentMismatchReportsBothShapes) {
  Tape<double> t;
  try {
    matmul(t.constant(T({2, 3})), t.constant(T({4, 2})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4x2]"), std::string::npos);
  }
}

TEST(Softmax, UniformInputIsUniform) {
  Tape<double> t;
  auto y = softmax(t.constant(T({3}, 0.0)), 0);
  for (auto v : y.value().data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  Tape<float> t;
  auto y = softmax(t.constant(Tensor<float>({2}, std::vector<float>{1000.f, 0.f})), 0);
  EXPECT_FLOAT_EQ(y.value()[0], 1.f);
  EXPECT_FLOAT_EQ(y.value()[1], 0.f);
}

TEST(Softmax, LogTwoGivesTwoThirds) {
  Tape<double> t;
  auto y = softmax(t.constant(T({2}, std::vector<double>{std::log(2.0), 0.0})), 0);
  EXPECT_NEAR(y.value()[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(y.value()[1], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, InvalidAxisThrows) {
  Tape<double> t;
  EXPECT_THROW(softmax(t.constant(T({2, 2})), 2), DimensionError);
}

TEST(Softmax, SlicesAlongAnyAxisSumToOne) {
  Rng rng(3);
  Tape<double> t;
  auto x = t.constant(randn<double>({3, 4, 5}, rng, 3.0));
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const auto& y = softmax(x, axis).value();
    const std::size_t d0 = 3, d1 = 4, d2 = 5;
    auto at = [&](std::size_t a, std::size_t b, std::size_t c) { return y[(a * d1 + b) * d2 + c]; };
    if (axis == 1)
      for (std::size_t a = 0; a < d0; ++a)
        for (std::size_t c = 0; c < d2; ++c) {
          double s = 0;
          for (std::size_t b = 0; b < d1; ++b) {
            EXPECT_GE(at(a, b, c), 0.0);
            s += at(a, b, c);
          }
          EXPECT_NEAR(s, 1.0, 1e-6);
        }
  }
}

TEST(Attention, SingleKeyReturnsItsValue) {
  Tape<double> t;
  auto q = t.constant(T::matrix({{0.3, -1.0}}));
  auto k = t.constant(T::matrix({{2.0, 0.5}}));
  auto v = t.constant(T::matrix({{7.0, -3.0}}));
  auto y = attention(q, k, v, T({1, 1}));
  EXPECT_EQ(y.value(), T::matrix({{7.0, -3.0}}));
}

TEST(Attention, FullyMaskedRowIsZero) {
  Rng rng(1);
  Tape<double> t;
  auto q = t.constant(randn<double>({3, 4}, rng));
  auto k = t.constant(randn<double>({3, 4}, rng));
  auto v = t.constant(randn<double>({3, 4}, rng));
  T mask({3, 3});
  for (std::size_t j = 0; j < 3; ++j) mask.at(1, j) = -std::numeric_limits<double>::infinity();
  auto y = attention(q, k, v, mask);
  for (std::size_t d = 0; d < 4; ++d) EXPECT_EQ(y.value().at(1, d), 0.0);
  EXPECT_NE(y.value().at(0, 0), 0.0);
}

TEST(Attention, LowerTriangularFirstRowEqualsFirstValue) {
  Rng rng(2);
  Tape<double> t;
  auto q = t.constant(randn<double>({2, 3}, rng));
  auto k = t.constant(randn<double>({2, 3}, rng));
  auto vv = randn<double>({2, 3}, rng);
  auto y = attention(q, k, t.constant(vv), causal_mask<double>(2));
  for (std::size_t d = 0; d < 3; ++d) EXPECT_EQ(y.value().at(0, d), vv.at(0, d));
}

TEST(Attention, QueryKeyDimMismatchThrows) {
  Tape<double> t;
  EXPECT_THROW(attention(t.constant(T({1, 3})), t.constant(T({1, 2})), t.constant(T({1, 2})), T({1, 1})),
               DimensionError);
}

TEST(Attention, ZeroGateActsLikeMask) {
  Rng rng(4);
  Tape<double> t;
  auto q = t.constant(randn<double>({2, 4}, rng));
  auto k = t.constant(randn<double>({3, 4}, rng));
  auto v = t.constant(randn<double>({3, 4}, rng));
  T mask({2, 3});
  mask.at(0, 1) = mask.at(1, 1) = -std::numeric_limits<double>::infinity();
  auto masked = attention(q, k, v, mask, {1, 2, 3, 2});
  auto gate = t.constant(T({3}, std::vector<double>{1, 0, 1}));
  auto gated = attention(q, k, v, T({2, 3}), {1, 2, 3, 2}, gate);
  for (std::size_t i = 0; i < masked.value().size(); ++i) EXPECT_NEAR(masked.value()[i], gated.value()[i], 1e-14);
}

TEST(Attention, CausalMaskIgnoresFutureRows) {
  Rng rng(5);
  const std::size_t n = 6, d = 4;
  auto q = randn<double>({n, d}, rng), k = randn<double>({n, d}, rng), v = randn<double>({n, d}, rng);
  auto run = [&](const T& qq, const T& kk, const T& vv) {
    Tape<double> t;
    return attention(t.constant(qq), t.constant(kk), t.constant(vv), causal_mask<double>(n), {1, n, n, 2}).value();
  };
  const T base = run(q, k, v);
  for (std::size_t j = 1; j < n; ++j) {
    T q2 = q, k2 = k, v2 = v;
    for (std::size_t c = 0; c < d; ++c) {
      q2.at(j, c) += 1.0;
      k2.at(j, c) -= 2.0;
      v2.at(j, c) += 3.0;
    }
    const T pert = run(q2, k2, v2);
    for (std::size_t i = 0; i < j; ++i)
      for (std::size_t c = 0; c < d; ++c) EXPECT_LE(std::abs(pert.at(i, c) - base.at(i, c)), 1e-6);
  }
}

TEST(LayerNorm, ConstantRowNormalizesToZero) {
  Tape<double> t;
  auto y = layer_norm(t.constant(T({1, 4}, 2.5)), t.constant(T({4}, 1.0)), t.constant(T({4}, 0.0)), 1e-5);
  for (auto v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoElementRow) {
  Tape<double> t;
  auto y = layer_norm(t.constant(T::matrix({{1, 3}})), t.constant(T({2}, 1.0)), t.constant(T({2}, 0.0)), 1e-12);
  EXPECT_NEAR(y.value()[0], -1.0, 1e-9);
  EXPECT_NEAR(y.value()[1], 1.0, 1e-9);
}

TEST(LayerNorm, ZeroGammaCollapsesToBeta) {
  Rng rng(6);
  Tape<double> t;
  auto y = layer_norm(t.constant(randn<double>({3, 5}, rng)), t.constant(T({5}, 0.0)), t.constant(T({5}, 5.0)), 1e-5);
  for (auto v : y.value().data()) EXPECT_EQ(v, 5.0);
}

TEST(Ops, NonFiniteForwardIsAnError) {
  Tape<double> t;
  auto x = t.constant(T({1}, 1e308));
  EXPECT_THROW(scale(x, 10.0), NumericError);
}

TEST(Ops, CrossEntropyOfUniformLogitsIsLogVocab) {
  Tape<double> t;
  auto y = cross_entropy(t.constant(T({3, 32}, 0.7)), {0, 5, 31}, {1.0, 1.0, 1.0});
  EXPECT_NEAR(y.value().item(), std::log(32.0), 1e-12);
}

TEST(Ops, CrossEntropyAllMaskedThrows) {
  Tape<double> t;
  EXPECT_THROW(cross_entropy(t.constant(T({2, 4})), {0, 1}, {0.0, 0.0}), ValidationError);
}

TEST(Ops, ReplayIsBitIdentical) {
  auto run = [] {
    Rng rng(77);
    Tape<float> t;
    auto a = t.constant(randn<float>({4, 8}, rng));
    auto b = t.constant(randn<float>({8, 8}, rng));
    auto y = softmax(gelu(matmul(a, b)), 1);
    return y.value();
  };
  EXPECT_EQ(run(), run());
}
