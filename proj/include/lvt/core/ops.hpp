#pragma once

// Differentiable tensor ops. Each op checks shapes at its boundary, computes
// the forward value, and registers its vector-Jacobian product on the tape.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "lvt/core/tape.hpp"
#include "lvt/core/tensor.hpp"

namespace lvt {

namespace detail {

template <class S>
void require_rank2(const Tensor<S>& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

// C[m×n] = A[m×k] · B[k×n]
template <class S>
Tensor<S> mm(const Tensor<S>& a, const Tensor<S>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> c({m, n});
  const S* A = a.data().data();
  const S* B = b.data().data();
  S* C = c.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const S av = A[i * k + p];
      if (av == S{0}) continue;
      const S* brow = B + p * n;
      S* crow = C + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  return c;
}

// C[m×k] = G[m×n] · Bᵀ where B is [k×n]
template <class S>
Tensor<S> mm_nt(const Tensor<S>& g, const Tensor<S>& b) {
  const std::size_t m = g.dim(0), n = g.dim(1), k = b.dim(0);
  Tensor<S> c({m, k});
  const S* G = g.data().data();
  const S* B = b.data().data();
  S* C = c.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      S acc{0};
      const S* grow = G + i * n;
      const S* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      C[i * k + p] = acc;
    }
  return c;
}

// C[k×n] = Aᵀ · G where A is [m×k], G is [m×n]
template <class S>
Tensor<S> mm_tn(const Tensor<S>& a, const Tensor<S>& g) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = g.dim(1);
  Tensor<S> c({k, n});
  const S* A = a.data().data();
  const S* G = g.data().data();
  S* C = c.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const S av = A[i * k + p];
      if (av == S{0}) continue;
      const S* grow = G + i * n;
      S* crow = C + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  return c;
}

template <class S, class F>
Tensor<S> map(const Tensor<S>& x, F f) {
  Tensor<S> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return y;
}

}  // namespace detail

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_rank2(av, "matmul");
  detail::require_rank2(bv, "matmul");
  if (av.dim(1) != bv.dim(0))
    throw DimensionError("matmul: inner extents disagree, " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
  return a.tape().record("matmul", detail::mm(av, bv), {a, b}, [a, b](Tape<S>& t, const Tensor<S>& g) {
    if (a.requires_grad()) t.accumulate_grad(a, detail::mm_nt(g, b.value()));
    if (b.requires_grad()) t.accumulate_grad(b, detail::mm_tn(a.value(), g));
  });
}

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<S> y = a.value();
  accumulate(y, b.value());
  return a.tape().record("add", std::move(y), {a, b}, [a, b](Tape<S>& t, const Tensor<S>& g) {
    t.accumulate_grad(a, g);
    t.accumulate_grad(b, g);
  });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<S> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return a.tape().record("sub", std::move(y), {a, b}, [a, b](Tape<S>& t, const Tensor<S>& g) {
    t.accumulate_grad(a, g);
    if (b.requires_grad()) t.accumulate_grad(b, detail::map(g, [](S v) { return -v; }));
  });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<S> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  return a.tape().record("mul", std::move(y), {a, b}, [a, b](Tape<S>& t, const Tensor<S>& g) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (a.requires_grad()) {
      Tensor<S> ga(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bv[i];
      t.accumulate_grad(a, ga);
    }
    if (b.requires_grad()) {
      Tensor<S> gb(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * av[i];
      t.accumulate_grad(b, gb);
    }
  });
}

template <class S>
Var<S> square(const Var<S>& x) {
  return mul(x, x);
}

template <class S>
Var<S> scale(const Var<S>& x, S s) {
  return x.tape().record("scale", detail::map(x.value(), [s](S v) { return v * s; }), {x},
                         [x, s](Tape<S>& t, const Tensor<S>& g) {
                           t.accumulate_grad(x, detail::map(g, [s](S v) { return v * s; }));
                         });
}

template <class S>
Var<S> add_scalar(const Var<S>& x, S s) {
  return x.tape().record("add_scalar", detail::map(x.value(), [s](S v) { return v + s; }), {x},
                         [x](Tape<S>& t, const Tensor<S>& g) { t.accumulate_grad(x, g); });
}

// 1 - x
template <class S>
Var<S> one_minus(const Var<S>& x) {
  return add_scalar(scale(x, S{-1}), S{1});
}

// x[..., C] + b[C], broadcast over leading extents.
template <class S>
Var<S> add_bias(const Var<S>& x, const Var<S>& b) {
  const auto& xv = x.value();
  const auto& bv = b.value();
  if (bv.size() != xv.cols())
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " does not match trailing extent of " +
                         shape_str(xv.shape()));
  Tensor<S> y = xv;
  const std::size_t c = xv.cols();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i % c];
  return x.tape().record("add_bias", std::move(y), {x, b}, [x, b](Tape<S>& t, const Tensor<S>& g) {
    t.accumulate_grad(x, g);
    if (b.requires_grad()) {
      Tensor<S> gb(b.value().shape());
      const std::size_t c = gb.size();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
      t.accumulate_grad(b, gb);
    }
  });
}

template <class S>
Var<S> relu(const Var<S>& x) {
  return x.tape().record("relu", detail::map(x.value(), [](S v) { return v > 0 ? v : S{0}; }), {x},
                         [x](Tape<S>& t, const Tensor<S>& g) {
                           const auto& xv = x.value();
                           Tensor<S> gx(g.shape());
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] = xv[i] > 0 ? g[i] : S{0};
                           t.accumulate_grad(x, gx);
                         });
}

// tanh approximation of GELU
template <class S>
Var<S> gelu(const Var<S>& x) {
  constexpr S c = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  constexpr S a = static_cast<S>(0.044715);
  auto f = [](S v) { return S{0.5} * v * (S{1} + std::tanh(c * (v + a * v * v * v))); };
  return x.tape().record("gelu", detail::map(x.value(), f), {x}, [x](Tape<S>& t, const Tensor<S>& g) {
    const auto& xv = x.value();
    Tensor<S> gx(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const S v = xv[i];
      const S u = c * (v + a * v * v * v);
      const S th = std::tanh(u);
      const S du = c * (S{1} + S{3} * a * v * v);
      gx[i] = g[i] * (S{0.5} * (S{1} + th) + S{0.5} * v * (S{1} - th * th) * du);
    }
    t.accumulate_grad(x, gx);
  });
}

template <class S>
Var<S> silu(const Var<S>& x) {
  auto sig = [](S v) { return S{1} / (S{1} + std::exp(-v)); };
  return x.tape().record("silu", detail::map(x.value(), [sig](S v) { return v * sig(v); }), {x},
                         [x, sig](Tape<S>& t, const Tensor<S>& g) {
                           const auto& xv = x.value();
                           Tensor<S> gx(g.shape());
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             const S s = sig(xv[i]);
                             gx[i] = g[i] * (s + xv[i] * s * (S{1} - s));
                           }
                           t.accumulate_grad(x, gx);
                         });
}

/// Numerically stable softmax along `axis` (max-subtracted).
template <class S>
Var<S> softmax(const Var<S>& x, std::size_t axis) {
  const auto& xv = x.value();
  if (axis >= xv.rank())
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(xv.shape()));
  std::size_t outer = 1, inner = 1;
  const std::size_t n = xv.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.dim(i);
  for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
  Tensor<S> y(xv.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      S mx = -std::numeric_limits<S>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      S z{0};
      for (std::size_t j = 0; j < n; ++j) z += (y[base + j * inner] = std::exp(xv[base + j * inner] - mx));
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] /= z;
    }
  Tensor<S> saved = y;
  return x.tape().record("softmax", std::move(y), {x},
                         [x, saved, outer, inner, n](Tape<S>& t, const Tensor<S>& g) {
                           Tensor<S> gx(g.shape());
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t in = 0; in < inner; ++in) {
                               const std::size_t base = o * n * inner + in;
                               S dot{0};
                               for (std::size_t j = 0; j < n; ++j)
                                 dot += g[base + j * inner] * saved[base + j * inner];
                               for (std::size_t j = 0; j < n; ++j) {
                                 const std::size_t k = base + j * inner;
                                 gx[k] = saved[k] * (g[k] - dot);
                               }
                             }
                           t.accumulate_grad(x, gx);
                         });
}

/// log-softmax over the trailing axis.
template <class S>
Var<S> log_softmax(const Var<S>& x) {
  const auto& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor<S> y(xv.shape());
  for (std::size_t i = 0; i < r; ++i) {
    S mx = -std::numeric_limits<S>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, xv[i * c + j]);
    S z{0};
    for (std::size_t j = 0; j < c; ++j) z += std::exp(xv[i * c + j] - mx);
    const S lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = xv[i * c + j] - lse;
  }
  Tensor<S> saved = y;
  return x.tape().record("log_softmax", std::move(y), {x}, [x, saved, r, c](Tape<S>& t, const Tensor<S>& g) {
    Tensor<S> gx(g.shape());
    for (std::size_t i = 0; i < r; ++i) {
      S gs{0};
      for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] = g[i * c + j] - std::exp(saved[i * c + j]) * gs;
    }
    t.accumulate_grad(x, gx);
  });
}

/// Per-row normalization over the trailing axis with affine gamma/beta.
template <class S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps) {
  const auto& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  if (gamma.value().size() != c || beta.value().size() != c)
    throw DimensionError("layer_norm: affine extents do not match trailing extent of " + shape_str(xv.shape()));
  if (!(eps > 0)) throw ValidationError("layer_norm: eps must be positive");
  Tensor<S> xhat(xv.shape());
  std::vector<S> rstd(r);
  for (std::size_t i = 0; i < r; ++i) {
    S mean{0};
    for (std::size_t j = 0; j < c; ++j) mean += xv[i * c + j];
    mean /= static_cast<S>(c);
    S var{0};
    for (std::size_t j = 0; j < c; ++j) {
      const S d = xv[i * c + j] - mean;
      var += d * d;
    }
    var /= static_cast<S>(c);
    rstd[i] = S{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) xhat[i * c + j] = (xv[i * c + j] - mean) * rstd[i];
  }
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<S> y(xv.shape());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = xhat[i * c + j] * gv[j] + bv[j];
  return x.tape().record(
      "layer_norm", std::move(y), {x, gamma, beta},
      [x, gamma, beta, xhat, rstd, r, c](Tape<S>& t, const Tensor<S>& g) {
        const auto& gv = gamma.value();
        if (gamma.requires_grad() || beta.requires_grad()) {
          Tensor<S> gg(gamma.value().shape()), gb(beta.value().shape());
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              gg[j] += g[i * c + j] * xhat[i * c + j];
              gb[j] += g[i * c + j];
            }
          t.accumulate_grad(gamma, gg);
          t.accumulate_grad(beta, gb);
        }
        if (x.requires_grad()) {
          Tensor<S> gx(x.value().shape());
          for (std::size_t i = 0; i < r; ++i) {
            S m1{0}, m2{0};
            for (std::size_t j = 0; j < c; ++j) {
              const S dxh = g[i * c + j] * gv[j];
              m1 += dxh;
              m2 += dxh * xhat[i * c + j];
            }
            m1 /= static_cast<S>(c);
            m2 /= static_cast<S>(c);
            for (std::size_t j = 0; j < c; ++j) {
              const S dxh = g[i * c + j] * gv[j];
              gx[i * c + j] = rstd[i] * (dxh - m1 - xhat[i * c + j] * m2);
            }
          }
          t.accumulate_grad(x, gx);
        }
      });
}

template <class S>
Var<S> sum(const Var<S>& x) {
  S s{0};
  for (auto v : x.value().data()) s += v;
  return x.tape().record("sum", Tensor<S>::scalar(s), {x}, [x](Tape<S>& t, const Tensor<S>& g) {
    t.accumulate_grad(x, Tensor<S>(x.value().shape(), g[0]));
  });
}

template <class S>
Var<S> mean(const Var<S>& x) {
  return scale(sum(x), S{1} / static_cast<S>(x.value().size()));
}

// Sums over the trailing axis: [..., C] -> [rows]
template <class S>
Var<S> row_sum(const Var<S>& x) {
  const auto& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor<S> y({r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i] += xv[i * c + j];
  return x.tape().record("row_sum", std::move(y), {x}, [x, r, c](Tape<S>& t, const Tensor<S>& g) {
    Tensor<S> gx(x.value().shape());
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] = g[i];
    t.accumulate_grad(x, gx);
  });
}

// Cosine similarity of matching rows: [R×C], [R×C] -> [R]
template <class S>
Var<S> row_cosine(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.value(), b.value(), "row_cosine");
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t r = av.rows(), c = av.cols();
  Tensor<S> y({r});
  std::vector<S> na(r), nb(r), dot(r);
  for (std::size_t i = 0; i < r; ++i) {
    S aa{0}, bb{0}, ab{0};
    for (std::size_t j = 0; j < c; ++j) {
      aa += av[i * c + j] * av[i * c + j];
      bb += bv[i * c + j] * bv[i * c + j];
      ab += av[i * c + j] * bv[i * c + j];
    }
    na[i] = std::sqrt(aa);
    nb[i] = std::sqrt(bb);
    if (na[i] == S{0} || nb[i] == S{0}) throw NumericError("row_cosine: zero-norm row " + std::to_string(i));
    dot[i] = ab;
    y[i] = ab / (na[i] * nb[i]);
  }
  return a.tape().record("row_cosine", std::move(y), {a, b},
                         [a, b, na, nb, dot, r, c](Tape<S>& t, const Tensor<S>& g) {
                           const auto& av = a.value();
                           const auto& bv = b.value();
                           Tensor<S> ga(av.shape()), gb(bv.shape());
                           for (std::size_t i = 0; i < r; ++i) {
                             const S inv = S{1} / (na[i] * nb[i]);
                             const S cosv = dot[i] * inv;
                             for (std::size_t j = 0; j < c; ++j) {
                               const std::size_t k = i * c + j;
                               ga[k] = g[i] * (bv[k] * inv - cosv * av[k] / (na[i] * na[i]));
                               gb[k] = g[i] * (av[k] * inv - cosv * bv[k] / (nb[i] * nb[i]));
                             }
                           }
                           if (a.requires_grad()) t.accumulate_grad(a, ga);
                           if (b.requires_grad()) t.accumulate_grad(b, gb);
                         });
}

// Row-wise L2 normalization. A zero-norm row signals degenerate features.
template <class S>
Var<S> normalize_rows(const Var<S>& x) {
  const auto& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor<S> y(xv.shape());
  std::vector<S> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    S ss{0};
    for (std::size_t j = 0; j < c; ++j) ss += xv[i * c + j] * xv[i * c + j];
    norms[i] = std::sqrt(ss);
    if (norms[i] == S{0}) throw NumericError("normalize_rows: zero-norm row " + std::to_string(i));
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = xv[i * c + j] / norms[i];
  }
  Tensor<S> saved = y;
  return x.tape().record("normalize_rows", std::move(y), {x},
                         [x, saved, norms, r, c](Tape<S>& t, const Tensor<S>& g) {
                           Tensor<S> gx(g.shape());
                           for (std::size_t i = 0; i < r; ++i) {
                             S d{0};
                             for (std::size_t j = 0; j < c; ++j) d += g[i * c + j] * saved[i * c + j];
                             for (std::size_t j = 0; j < c; ++j)
                               gx[i * c + j] = (g[i * c + j] - d * saved[i * c + j]) / norms[i];
                           }
                           t.accumulate_grad(x, gx);
                         });
}

/// Mean of weights[i] * (-log softmax(logits)[i, targets[i]]) over rows,
/// normalized by the total weight.
template <class S>
Var<S> cross_entropy(const Var<S>& logits, const std::vector<int>& targets, const std::vector<S>& weights) {
  const auto& lv = logits.value();
  detail::require_rank2(lv, "cross_entropy");
  const std::size_t r = lv.dim(0), c = lv.dim(1);
  if (targets.size() != r || weights.size() != r)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                         std::to_string(weights.size()) + " weights for " + std::to_string(r) + " rows");
  S wsum{0};
  for (auto w : weights) wsum += w;
  if (!(wsum > 0)) throw ValidationError("cross_entropy: no active positions");
  Tensor<S> probs(lv.shape());
  S loss{0};
  for (std::size_t i = 0; i < r; ++i) {
    const int tgt = targets[i];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= c)
      throw ValidationError("cross_entropy: target " + std::to_string(tgt) + " outside [0," + std::to_string(c) + ")");
    S mx = -std::numeric_limits<S>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, lv[i * c + j]);
    S z{0};
    for (std::size_t j = 0; j < c; ++j) z += (probs[i * c + j] = std::exp(lv[i * c + j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    if (weights[i] != S{0}) loss += weights[i] * (mx + std::log(z) - lv[i * c + tgt]);
  }
  loss /= wsum;
  return logits.tape().record("cross_entropy", Tensor<S>::scalar(loss), {logits},
                              [logits, probs, targets, weights, wsum, r, c](Tape<S>& t, const Tensor<S>& g) {
                                Tensor<S> gl(probs.shape());
                                for (std::size_t i = 0; i < r; ++i) {
                                  if (weights[i] == S{0}) continue;
                                  const S w = g[0] * weights[i] / wsum;
                                  for (std::size_t j = 0; j < c; ++j) gl[i * c + j] = w * probs[i * c + j];
                                  gl[i * c + targets[i]] -= w;
                                }
                                t.accumulate_grad(logits, gl);
                              });
}

/// Rows of `table` selected by `idx` (embedding lookup); gradient scatter-adds.
template <class S>
Var<S> gather_rows(const Var<S>& table, const std::vector<std::size_t>& idx) {
  const auto& tv = table.value();
  detail::require_rank2(tv, "gather_rows");
  const std::size_t c = tv.dim(1);
  if (idx.empty()) throw DimensionError("gather_rows: empty index list");
  Tensor<S> y({idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= tv.dim(0))
      throw DimensionError("gather_rows: index " + std::to_string(idx[i]) + " out of range for " +
                           shape_str(tv.shape()));
    std::copy_n(tv.data().begin() + idx[i] * c, c, y.data().begin() + i * c);
  }
  return table.tape().record("gather_rows", std::move(y), {table}, [table, idx, c](Tape<S>& t, const Tensor<S>& g) {
    Tensor<S>* slot = t.grad_slot(table);
    if (!slot) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) (*slot)[idx[i] * c + j] += g[i * c + j];
  });
}

/// Copy of `base` with rows at `positions` replaced by the rows of `rows`.
template <class S>
Var<S> replace_rows(const Var<S>& base, const std::vector<std::size_t>& positions, const Var<S>& rows) {
  const auto& bv = base.value();
  const auto& rv = rows.value();
  detail::require_rank2(bv, "replace_rows");
  detail::require_rank2(rv, "replace_rows");
  if (rv.dim(0) != positions.size() || rv.dim(1) != bv.dim(1))
    throw DimensionError("replace_rows: " + shape_str(rv.shape()) + " rows for " + std::to_string(positions.size()) +
                         " positions into " + shape_str(bv.shape()));
  const std::size_t c = bv.dim(1);
  Tensor<S> y = bv;
  std::vector<char> replaced(bv.dim(0), 0);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] >= bv.dim(0)) throw DimensionError("replace_rows: position out of range");
    if (replaced[positions[i]]) throw DimensionError("replace_rows: duplicate position");
    replaced[positions[i]] = 1;
    std::copy_n(rv.data().begin() + i * c, c, y.data().begin() + positions[i] * c);
  }
  return base.tape().record("replace_rows", std::move(y), {base, rows},
                            [base, rows, positions, replaced, c](Tape<S>& t, const Tensor<S>& g) {
                              if (base.requires_grad()) {
                                Tensor<S> gb = g;
                                for (std::size_t r = 0; r < replaced.size(); ++r)
                                  if (replaced[r]) std::fill_n(gb.data().begin() + r * c, c, S{0});
                                t.accumulate_grad(base, gb);
                              }
                              if (rows.requires_grad()) {
                                Tensor<S> gr(rows.value().shape());
                                for (std::size_t i = 0; i < positions.size(); ++i)
                                  std::copy_n(g.data().begin() + positions[i] * c, c, gr.data().begin() + i * c);
                                t.accumulate_grad(rows, gr);
                              }
                            });
}

// [R×Ca], [R×Cb] -> [R×(Ca+Cb)]
template <class S>
Var<S> concat_cols(const Var<S>& a, const Var<S>& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rows() != bv.rows())
    throw DimensionError("concat_cols: row count mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  const std::size_t r = av.rows(), ca = av.cols(), cb = bv.cols();
  Tensor<S> y({r, ca + cb});
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(av.data().begin() + i * ca, ca, y.data().begin() + i * (ca + cb));
    std::copy_n(bv.data().begin() + i * cb, cb, y.data().begin() + i * (ca + cb) + ca);
  }
  return a.tape().record("concat_cols", std::move(y), {a, b}, [a, b, r, ca, cb](Tape<S>& t, const Tensor<S>& g) {
    Tensor<S> ga(a.value().shape()), gb(b.value().shape());
    for (std::size_t i = 0; i < r; ++i) {
      std::copy_n(g.data().begin() + i * (ca + cb), ca, ga.data().begin() + i * ca);
      std::copy_n(g.data().begin() + i * (ca + cb) + ca, cb, gb.data().begin() + i * cb);
    }
    if (a.requires_grad()) t.accumulate_grad(a, ga);
    if (b.requires_grad()) t.accumulate_grad(b, gb);
  });
}

// Column j of a matrix: [R×C] -> [R]
template <class S>
Var<S> column(const Var<S>& x, std::size_t j) {
  const auto& xv = x.value();
  detail::require_rank2(xv, "column");
  if (j >= xv.dim(1)) throw DimensionError("column: index out of range");
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor<S> y({r});
  for (std::size_t i = 0; i < r; ++i) y[i] = xv[i * c + j];
  return x.tape().record("column", std::move(y), {x}, [x, j, r, c](Tape<S>& t, const Tensor<S>& g) {
    Tensor<S>* slot = t.grad_slot(x);
    if (!slot) return;
    for (std::size_t i = 0; i < r; ++i) (*slot)[i * c + j] += g[i];
  });
}

template <class S>
Var<S> reshape(const Var<S>& x, Shape shape) {
  return x.tape().record("reshape", x.value().reshaped(shape), {x}, [x](Tape<S>& t, const Tensor<S>& g) {
    t.accumulate_grad(x, g.reshaped(x.value().shape()));
  });
}

/// Forward value `hard`, gradient passed to `soft` unchanged. Implements both
/// hard Gumbel sampling and the quantizer's copy-gradient path.
template <class S>
Var<S> straight_through(const Var<S>& soft, Tensor<S> hard) {
  require_same_shape(soft.value(), hard, "straight_through");
  return soft.tape().record("straight_through", std::move(hard), {soft},
                            [soft](Tape<S>& t, const Tensor<S>& g) { t.accumulate_grad(soft, g); });
}

template <class S>
Var<S> stop_gradient(const Var<S>& x) {
  return x.tape().constant(x.value());
}

template <class S>
Var<S> operator+(const Var<S>& a, const Var<S>& b) { return add(a, b); }
template <class S>
Var<S> operator-(const Var<S>& a, const Var<S>& b) { return sub(a, b); }
template <class S>
Var<S> operator*(const Var<S>& a, const Var<S>& b) { return mul(a, b); }
template <class S>
Var<S> operator*(S s, const Var<S>& x) { return scale(x, s); }

}  // namespace lvt
