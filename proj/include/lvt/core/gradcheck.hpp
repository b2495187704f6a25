#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "lvt/core/nn.hpp"

namespace lvt {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Denominator floor so that coordinates whose true gradient is zero are
// judged by absolute error.
inline constexpr double kGradCheckFloor = 1e-6;

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), kGradCheckFloor});
}

using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Compares tape gradients of the scalar `f` at `point` with central
/// differences (f(x+h) - f(x-h)) / 2h, one coordinate at a time.
inline GradCheckReport check_gradients(const ScalarFn& f, const std::vector<Tensor<double>>& point, double h = 1e-5) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> in;
    for (const auto& p : point) in.push_back(tape.leaf(p));
    tape.backward(f(tape, in));
    for (const auto& v : in) analytic.push_back(tape.grad(v));
  }
  auto eval = [&](const std::vector<Tensor<double>>& pt) {
    Tape<double> tape;
    std::vector<Var<double>> in;
    for (const auto& p : pt) in.push_back(tape.constant(p));
    return f(tape, in).value().item();
  };
  GradCheckReport rep;
  std::vector<Tensor<double>> pt = point;
  for (std::size_t a = 0; a < pt.size(); ++a)
    for (std::size_t i = 0; i < pt[a].size(); ++i) {
      const double x0 = pt[a][i];
      pt[a][i] = x0 + h;
      const double fp = eval(pt);
      pt[a][i] = x0 - h;
      const double fm = eval(pt);
      pt[a][i] = x0;
      const double num = (fp - fm) / (2 * h);
      const double err = relative_error(analytic[a][i], num);
      if (err > rep.max_rel_error || (a == 0 && i == 0)) rep = {err, a, i, analytic[a][i], num};
    }
  return rep;
}

/// Same check over every trainable parameter of a store. `f` records a scalar
/// loss on the given tape using the store's parameters. `max_coords` caps the
/// number of coordinates probed per parameter (0 = all).
template <class F>
GradCheckReport check_param_gradients(ParamStore<double>& store, F&& f, double h = 1e-5, std::size_t max_coords = 0) {
  store.zero_grad();
  {
    Tape<double> tape;
    tape.backward(f(tape));
  }
  GradCheckReport rep;
  std::size_t pi = 0;
  bool first = true;
  for (auto& [name, p] : store.items()) {
    if (!p.trainable) {
      ++pi;
      continue;
    }
    const std::size_t n = p.value.size();
    const std::size_t stride = (max_coords == 0 || n <= max_coords) ? 1 : n / max_coords;
    for (std::size_t i = 0; i < n; i += stride) {
      const double x0 = p.value[i];
      p.value[i] = x0 + h;
      double fp, fm;
      {
        Tape<double> tape;
        fp = f(tape).value().item();
      }
      p.value[i] = x0 - h;
      {
        Tape<double> tape;
        fm = f(tape).value().item();
      }
      p.value[i] = x0;
      const double num = (fp - fm) / (2 * h);
      const double err = relative_error(p.grad[i], num);
      if (first || err > rep.max_rel_error) rep = {err, pi, i, static_cast<double>(p.grad[i]), num};
      first = false;
    }
    ++pi;
  }
  return rep;
}

}  // namespace lvt
