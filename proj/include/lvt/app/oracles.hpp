#pragma once

// Reference implementations used by the test suite and the acceptance
// harness: a catalog of differentiable ops for finite-difference checks and
// an exhaustive nearest-code search.

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "lvt/core/gradcheck.hpp"

namespace lvt::oracle {

using Vars = std::vector<Var<double>>;

struct OpCase {
  const char* name;
  std::vector<Shape> shapes;
  std::function<Var<double>(Tape<double>&, const Vars&)> op;
  bool positive_inputs = false;  // last input drawn from |N(0,1)| + 0.2
};

/// Contracts y with a fixed random tensor so the scalar depends on every
/// output coordinate.
inline Var<double> contract(Tape<double>& t, const Var<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, t.constant(randn<double>(y.value().shape(), rng))));
}

/// Every op with a true derivative. straight_through and stop_gradient are
/// estimators by design and have no finite-difference counterpart.
inline std::vector<OpCase> op_cases() {
  using T = Tensor<double>;
  const double inf = std::numeric_limits<double>::infinity();
  return {
      {"matmul", {{3, 4}, {4, 2}}, [](auto&, const Vars& v) { return matmul(v[0], v[1]); }},
      {"add", {{2, 3}, {2, 3}}, [](auto&, const Vars& v) { return add(v[0], v[1]); }},
      {"sub", {{2, 3}, {2, 3}}, [](auto&, const Vars& v) { return sub(v[0], v[1]); }},
      {"mul", {{2, 3}, {2, 3}}, [](auto&, const Vars& v) { return mul(v[0], v[1]); }},
      {"square", {{5}}, [](auto&, const Vars& v) { return square(v[0]); }},
      {"scale", {{4}}, [](auto&, const Vars& v) { return scale(v[0], -1.7); }},
      {"add_scalar", {{4}}, [](auto&, const Vars& v) { return add_scalar(v[0], 0.3); }},
      {"one_minus", {{4}}, [](auto&, const Vars& v) { return one_minus(v[0]); }},
      {"add_bias", {{3, 4}, {4}}, [](auto&, const Vars& v) { return add_bias(v[0], v[1]); }},
      {"relu", {{10}}, [](auto&, const Vars& v) { return relu(v[0]); }},
      {"gelu", {{10}}, [](auto&, const Vars& v) { return gelu(v[0]); }},
      {"silu", {{10}}, [](auto&, const Vars& v) { return silu(v[0]); }},
      {"softmax_axis0", {{3, 4}}, [](auto&, const Vars& v) { return softmax(v[0], 0); }},
      {"softmax_axis1", {{3, 4}}, [](auto&, const Vars& v) { return softmax(v[0], 1); }},
      {"log_softmax", {{3, 5}}, [](auto&, const Vars& v) { return log_softmax(v[0]); }},
      {"layer_norm", {{3, 6}, {6}, {6}}, [](auto&, const Vars& v) { return layer_norm(v[0], v[1], v[2], 1e-5); }},
      {"sum", {{2, 3}}, [](auto&, const Vars& v) { return sum(v[0]); }},
      {"mean", {{2, 3}}, [](auto&, const Vars& v) { return mean(v[0]); }},
      {"row_sum", {{3, 4}}, [](auto&, const Vars& v) { return row_sum(v[0]); }},
      {"row_cosine", {{3, 4}, {3, 4}}, [](auto&, const Vars& v) { return row_cosine(v[0], v[1]); }},
      {"normalize_rows", {{3, 4}}, [](auto&, const Vars& v) { return normalize_rows(v[0]); }},
      {"cross_entropy", {{4, 6}},
       [](auto&, const Vars& v) { return cross_entropy(v[0], {0, 3, 5, 2}, {1.0, 0.0, 2.0, 0.5}); }},
      {"gather_rows", {{5, 3}}, [](auto&, const Vars& v) { return gather_rows(v[0], {4, 0, 4, 2}); }},
      {"replace_rows", {{5, 3}, {2, 3}}, [](auto&, const Vars& v) { return replace_rows(v[0], {3, 1}, v[1]); }},
      {"concat_cols", {{3, 2}, {3, 4}}, [](auto&, const Vars& v) { return concat_cols(v[0], v[1]); }},
      {"column", {{4, 3}}, [](auto&, const Vars& v) { return column(v[0], 1); }},
      {"reshape", {{2, 6}}, [](auto&, const Vars& v) { return reshape(v[0], {3, 4}); }},
      {"attention_causal",
       {{8, 4}, {8, 4}, {8, 4}},
       [](auto&, const Vars& v) { return attention(v[0], v[1], v[2], causal_mask<double>(4), {2, 4, 4, 2}); }},
      {"attention_gated",
       {{6, 4}, {10, 4}, {10, 4}, {10}},
       [inf](auto&, const Vars& v) {
         T mask({3, 5});
         mask.at(0, 4) = -inf;
         mask.at(2, 0) = -inf;
         return attention(v[0], v[1], v[2], mask, {2, 3, 5, 2}, v[3]);
       },
       true},
  };
}

/// Random inputs for point `point` of an op case.
inline std::vector<Tensor<double>> op_inputs(const OpCase& c, int point) {
  Rng rng(1000 + point);
  std::vector<Tensor<double>> inputs;
  for (std::size_t i = 0; i < c.shapes.size(); ++i) {
    auto x = randn<double>(c.shapes[i], rng);
    if (c.positive_inputs && i + 1 == c.shapes.size())
      for (auto& v : x.vec()) v = 0.2 + std::abs(v);
    inputs.push_back(std::move(x));
  }
  return inputs;
}

inline GradCheckReport check_op(const OpCase& c, int point) {
  const std::uint64_t seed = 77 + point;
  return check_gradients([&](Tape<double>& t, const Vars& in) { return contract(t, c.op(t, in), seed); },
                         op_inputs(c, point));
}

/// Exhaustive nearest unit code in long double; first index wins ties.
template <class S>
std::size_t brute_force_code(const Tensor<S>& codes, const std::vector<double>& q) {
  auto unit = [](std::vector<long double> v) {
    long double ss = 0;
    for (auto x : v) ss += x * x;
    for (auto& x : v) x /= std::sqrt(ss);
    return v;
  };
  const auto uq = unit(std::vector<long double>(q.begin(), q.end()));
  std::size_t best = 0;
  long double best_d = INFINITY;
  for (std::size_t k = 0; k < codes.rows(); ++k) {
    const auto r = codes.row(k);
    const auto uc = unit(std::vector<long double>(r.begin(), r.end()));
    long double d = 0;
    for (std::size_t j = 0; j < uq.size(); ++j) d += (uq[j] - uc[j]) * (uq[j] - uc[j]);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

}  // namespace lvt::oracle
