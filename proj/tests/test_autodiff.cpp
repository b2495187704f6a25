#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "lvt/app/oracles.hpp"

using namespace lvt;
using T = Tensor<double>;
using Vars = std::vector<Var<double>>;

TEST(Backward, SquareAtThree) {
  Tape<double> t;
  auto x = t.leaf(T::scalar(3.0));
  t.backward(mul(x, x));
  EXPECT_EQ(t.grad(x).item(), 6.0);
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
  Rng rng(1);
  Tape<double> t;
  auto x = t.leaf(randn<double>({7}, rng));
  t.backward(sum(softmax(x, 0)));
  const auto g = t.grad(x);
  for (auto v : g.data()) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(Backward, StraightThroughForwardsHardPassesGradientToSoft) {
  Tape<double> t;
  auto soft = t.leaf(T({3}, {0.2, 0.7, -1.0}));
  auto y = straight_through(soft, T({3}, {0.0, 1.0, 0.0}));
  EXPECT_EQ(y.value()[1], 1.0);
  t.backward(sum(mul(y, t.constant(T({3}, {2.0, -3.0, 0.5})))));
  const auto g = t.grad(soft);
  EXPECT_EQ(g[0], 2.0);
  EXPECT_EQ(g[1], -3.0);
  EXPECT_EQ(g[2], 0.5);
  EXPECT_THROW(straight_through(soft, T({1}, {1.0})), DimensionError);
}

TEST(Backward, StopGradientBlocksFlow) {
  Tape<double> t;
  auto x = t.leaf(T({2}, {1.5, -2.0}));
  t.backward(sum(add(square(x), stop_gradient(square(x)))));
  const auto g = t.grad(x);
  EXPECT_EQ(g[0], 3.0);
  EXPECT_EQ(g[1], -4.0);
}

TEST(Backward, UnusedLeafGetsExactZero) {
  Tape<double> t;
  auto x = t.leaf(T({3}, 2.0));
  auto unused = t.leaf(T({2}, 5.0));
  t.backward(sum(square(x)));
  const auto g = t.grad(unused);
  for (auto v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, UnusedParameterGradientIsZero) {
  Parameter<double> used("used", T({2}, 1.0)), unused("unused", T({2}, 1.0));
  Tape<double> t;
  t.param(unused);
  t.backward(sum(square(t.param(used))));
  EXPECT_EQ(used.grad[0], 2.0);
  EXPECT_EQ(unused.grad[0], 0.0);
}

TEST(Backward, NonScalarLossRejected) {
  Tape<double> t;
  auto x = t.leaf(T({3}, 1.0));
  EXPECT_THROW(t.backward(x), TapeError);
}

TEST(Backward, SecondBackwardOnSameRecordingIsStale) {
  Tape<double> t;
  auto x = t.leaf(T::scalar(1.0));
  auto y = mul(x, x);
  t.backward(y);
  EXPECT_THROW(t.backward(y), TapeError);
  EXPECT_THROW(mul(x, x), TapeError);
  t.clear();
  auto x2 = t.leaf(T::scalar(2.0));
  EXPECT_NO_THROW(t.backward(mul(x2, x2)));
}

TEST(Backward, FrozenParameterIsConstant) {
  Parameter<double> p("frozen", T({2}, 1.0), false);
  Tape<double> t;
  auto y = sum(square(t.param(p)));
  t.backward(y);
  EXPECT_EQ(p.grad[0], 0.0);
}

TEST(GradCheck, IdentityHasZeroError) {
  // Dyadic point and step keep the central difference exact.
  auto rep = check_gradients([](Tape<double>&, const Vars& in) { return sum(in[0]); },
                             {T({3}, std::vector<double>{0.5, -1.25, 3.0})}, 1.0 / 65536);
  EXPECT_EQ(rep.max_rel_error, 0.0);
}

TEST(GradCheck, MatmulRandom3x3) {
  Rng rng(3);
  auto rep = check_gradients(
      [](Tape<double>& t, const Vars& in) {
        auto w = t.constant(T::matrix({{0.3, -1.2, 0.7}, {2.0, 0.1, -0.4}, {0.5, 0.9, 1.1}}));
        return sum(mul(matmul(in[0], in[1]), matmul(in[0], w)));
      },
      {randn<double>({3, 3}, rng), randn<double>({3, 3}, rng)});
  EXPECT_LT(rep.max_rel_error, 1e-6);
}

TEST(GradCheck, SoftmaxRandom8) {
  Rng rng(4);
  auto weights = randn<double>({8}, rng);
  auto rep = check_gradients(
      [&](Tape<double>& t, const Vars& in) { return sum(mul(softmax(in[0], 0), t.constant(weights))); },
      {randn<double>({8}, rng)});
  EXPECT_LT(rep.max_rel_error, 1e-6);
}

// Every differentiable op, 10 random points each, 64-bit, max relative error
// below 1e-4.
TEST(GradCheck, EveryOpAtTenRandomPoints) {
  for (const auto& c : oracle::op_cases()) {
    for (int point = 0; point < 10; ++point) {
      const auto rep = oracle::check_op(c, point);
      EXPECT_LT(rep.max_rel_error, 1e-4) << c.name << " point " << point << " input " << rep.worst_input << "["
                                         << rep.worst_index << "] analytic " << rep.analytic << " numeric "
                                         << rep.numeric;
    }
  }
}

TEST(GradCheck, HardGateStillReceivesGradient) {
  // Dropped keys (gate 0) get a nonzero gradient: the selector learns from it.
  Rng rng(9);
  Tape<double> t;
  auto q = t.constant(randn<double>({3, 4}, rng));
  auto k = t.constant(randn<double>({3, 4}, rng));
  auto v = t.constant(randn<double>({3, 4}, rng));
  auto gate = t.leaf(T({3}, std::vector<double>{1, 0, 1}));
  auto y = attention(q, k, v, T({3, 3}), {1, 3, 3, 1}, gate);
  t.backward(oracle::contract(t, y, 5));
  EXPECT_NE(t.grad(gate)[1], 0.0);
}
