#pragma once

// Nearest-code lookup on L2-normalized vectors and the EMA codebook update.

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "lvt/core/nn.hpp"

namespace lvt {

template <class S>
Tensor<S> l2_normalized(const Tensor<S>& x) {
  Tensor<S> out = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double ss = 0;
    for (S v : x.row(r)) ss += static_cast<double>(v) * v;
    if (!(ss > 0)) throw NumericError("l2 normalization of a zero-norm row " + std::to_string(r));
    const double inv = 1.0 / std::sqrt(ss);
    for (auto& v : out.row(r)) v = static_cast<S>(v * inv);
  }
  return out;
}

/// Index of the row of `unit_codes` closest to `unit_query` in Euclidean
/// distance; ties go to the lowest index.
template <class S>
std::size_t nearest_code(const Tensor<S>& unit_codes, std::span<const S> unit_query) {
  std::size_t best = 0;
  double best_d = INFINITY;
  for (std::size_t k = 0; k < unit_codes.rows(); ++k) {
    double d = 0;
    const auto c = unit_codes.row(k);
    for (std::size_t j = 0; j < c.size(); ++j) {
      const double diff = static_cast<double>(unit_query[j]) - c[j];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

template <class S>
struct Quantized {
  std::vector<std::size_t> codes;
  Tensor<S> vectors;  // code rows c_{v_i}
};

/// v_i = argmin_j |l2(x_i) - l2(c_j)|. Quantized rows are the stored code
/// rows, so an input lying on a unit code maps back to it bit-exactly.
template <class S>
Quantized<S> quantize(const Tensor<S>& merged, const Tensor<S>& codes) {
  if (merged.cols() != codes.cols())
    throw DimensionError("quantize: feature dim " + std::to_string(merged.cols()) + " vs codebook " +
                         std::to_string(codes.cols()));
  const Tensor<S> uc = l2_normalized(codes), uq = l2_normalized(merged);
  Quantized<S> out{{}, Tensor<S>(merged.shape())};
  for (std::size_t i = 0; i < merged.rows(); ++i) {
    const std::size_t k = nearest_code(uc, uq.row(i));
    out.codes.push_back(k);
    const auto src = codes.row(k);
    std::copy(src.begin(), src.end(), out.vectors.row(i).begin());
  }
  return out;
}

/// exp(entropy) of a usage histogram.
inline double perplexity(const std::vector<double>& counts) {
  double total = 0, h = 0;
  for (double c : counts) total += c;
  if (total <= 0) return 0.0;
  for (double c : counts)
    if (c > 0) h -= (c / total) * std::log(c / total);
  return std::exp(h);
}

/// Codebook tensors live in the model's ParamStore as non-trainable entries,
/// so checkpoints carry the EMA statistics and usage counters.
template <class S>
struct Codebook {
  Parameter<S>* codes = nullptr;       // [K × D], unit rows
  Parameter<S>* ema_count = nullptr;   // [K]
  Parameter<S>* ema_sum = nullptr;     // [K × D]
  Parameter<S>* usage = nullptr;       // [K], total assignments
  Parameter<S>* idle = nullptr;        // [K], consecutive unused steps

  static Codebook create(ParamStore<S>& store, std::size_t K, std::size_t D, Rng& rng) {
    Codebook cb;
    cb.codes = &store.add("codebook.codes", l2_normalized(randn<S>({K, D}, rng)), false);
    cb.ema_count = &store.add("codebook.ema_count", Tensor<S>({K}, S{1}), false);
    cb.ema_sum = &store.add("codebook.ema_sum", cb.codes->value, false);
    cb.usage = &store.add("codebook.usage", Tensor<S>({K}), false);
    cb.idle = &store.add("codebook.idle", Tensor<S>({K}), false);
    return cb;
  }

  std::size_t size() const { return codes->value.rows(); }

  /// One EMA step from the unit-normalized features `unit` [R × D] assigned
  /// to `assign`. A code unused for `dead_steps` consecutive steps is re-seeded
  /// from a batch feature whose squared distance to its current code exceeds
  /// `min_error`, drawn with probability proportional to that distance; if no
  /// feature qualifies the code stays dead. At most one code is revived per
  /// call. Returns the number of revived codes (0 or 1).
  std::size_t ema_update(const Tensor<S>& unit, const std::vector<std::size_t>& assign, double decay,
                         std::size_t dead_steps, Rng& rng, double min_error = 0.0) {
    const std::size_t K = size(), D = codes->value.cols();
    std::vector<double> cnt(K, 0.0), sums(K * D, 0.0), err(assign.size(), 0.0);
    for (std::size_t i = 0; i < assign.size(); ++i) {
      cnt[assign[i]] += 1;
      for (std::size_t d = 0; d < D; ++d) {
        sums[assign[i] * D + d] += unit.at(i, d);
        const double diff = static_cast<double>(unit.at(i, d)) - codes->value.at(assign[i], d);
        err[i] += diff * diff;
      }
    }
    for (auto& e : err)
      if (e <= min_error) e = 0;
    const bool candidates = std::any_of(err.begin(), err.end(), [](double e) { return e > 0; });
    std::size_t revived = 0;
    for (std::size_t k = 0; k < K; ++k) {
      usage->value[k] += static_cast<S>(cnt[k]);
      ema_count->value[k] = static_cast<S>(decay * ema_count->value[k] + (1 - decay) * cnt[k]);
      for (std::size_t d = 0; d < D; ++d)
        ema_sum->value.at(k, d) = static_cast<S>(decay * ema_sum->value.at(k, d) + (1 - decay) * sums[k * D + d]);
      idle->value[k] = cnt[k] > 0 ? S{0} : idle->value[k] + S{1};
      if (dead_steps > 0 && idle->value[k] >= static_cast<S>(dead_steps) && candidates && revived == 0) {
        const std::size_t pick = std::discrete_distribution<std::size_t>(err.begin(), err.end())(rng);
        for (std::size_t d = 0; d < D; ++d) ema_sum->value.at(k, d) = unit.at(pick, d);
        ema_count->value[k] = S{1};
        idle->value[k] = S{0};
        ++revived;
      }
      double ss = 0;
      for (std::size_t d = 0; d < D; ++d) ss += static_cast<double>(ema_sum->value.at(k, d)) * ema_sum->value.at(k, d);
      if (ss > 1e-24) {
        const double inv = 1.0 / std::sqrt(ss);
        for (std::size_t d = 0; d < D; ++d) codes->value.at(k, d) = static_cast<S>(ema_sum->value.at(k, d) * inv);
      }
    }
    return revived;
  }
};

}  // namespace lvt
