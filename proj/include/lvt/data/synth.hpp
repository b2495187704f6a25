#pragma once

// Procedural patch-feature "images". Each grid is a raster-order sequence of
// runs; every run repeats one prototype vector, so the informative patches are
// the run starts and the rest is redundant background.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "lvt/core/parallel.hpp"
#include "lvt/core/rng.hpp"
#include "lvt/core/tensor.hpp"
#include "lvt/io/config.hpp"

namespace lvt {

struct PatchGrid {
  std::uint64_t image_id = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  Tensor<float> features;  // [rows*cols × D], raster order

  std::size_t patches() const { return rows * cols; }
  std::size_t dim() const { return features.cols(); }
};

struct CorpusItem {
  PatchGrid grid;
  std::vector<std::uint16_t> caption;  // may be empty for image-only corpora
};

struct Corpus {
  std::size_t feature_dim = 0;
  std::vector<CorpusItem> items;
};

/// Unit-norm prototypes with pairwise cosine below the separation threshold;
/// prototype b carries text label b.
struct PrototypeBank {
  Tensor<float> prototypes;  // [B × D]
  std::vector<std::uint16_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return prototypes.cols(); }
};

struct SyntheticItem {
  PatchGrid grid;
  std::vector<std::uint16_t> caption;    // sorted labels of the prototypes used
  std::size_t complexity = 0;            // distinct prototypes used
  std::vector<std::size_t> cell_source;  // prototype index per cell
};

inline PrototypeBank make_bank(std::size_t size, std::size_t dim, double separation, Rng& rng) {
  PrototypeBank bank;
  bank.prototypes = Tensor<float>({size, dim});
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(dim);
  for (std::size_t b = 0; b < size; ++b) {
    bool accepted = false;
    for (int attempt = 0; attempt < 100000 && !accepted; ++attempt) {
      double ss = 0;
      for (auto& x : v) {
        x = n(rng);
        ss += x * x;
      }
      const double norm = std::sqrt(ss);
      for (auto& x : v) x /= norm;
      accepted = true;
      for (std::size_t o = 0; o < b && accepted; ++o) {
        double dot = 0;
        for (std::size_t d = 0; d < dim; ++d) dot += v[d] * bank.prototypes.at(o, d);
        accepted = dot < separation;
      }
    }
    if (!accepted)
      throw ValidationError("cannot place " + std::to_string(size) + " prototypes in dimension " +
                            std::to_string(dim) + " with cosine below " + std::to_string(separation));
    for (std::size_t d = 0; d < dim; ++d) bank.prototypes.at(b, d) = static_cast<float>(v[d]);
    bank.labels.push_back(static_cast<std::uint16_t>(b));
  }
  return bank;
}

/// Run count for a grid of n cells using c prototypes: uniform on
/// [c, max(c, n/4)], so simple images carry a few repeated runs while complex
/// ones have exactly one run per prototype.
inline std::size_t draw_run_count(std::size_t c, std::size_t n, Rng& rng) {
  if (c == 1) return 1;
  const std::size_t hi = std::min(n, std::max(c, n / 4));
  return std::uniform_int_distribution<std::size_t>(c, hi)(rng);
}

inline SyntheticItem gen_image(const PrototypeBank& bank, std::size_t complexity, std::size_t rows, std::size_t cols,
                               double noise_std, Rng& rng) {
  const std::size_t n = rows * cols, B = bank.size(), D = bank.dim();
  if (complexity < 1 || complexity > B)
    throw ValidationError("complexity " + std::to_string(complexity) + " outside [1, " + std::to_string(B) + "]");
  if (complexity > n) throw ValidationError("complexity exceeds the number of grid cells");
  if (noise_std < 0) throw ValidationError("noise_std must be non-negative");

  std::vector<std::size_t> pool(B);
  std::iota(pool.begin(), pool.end(), 0);
  std::shuffle(pool.begin(), pool.end(), rng);
  std::vector<std::size_t> chosen(pool.begin(), pool.begin() + complexity);

  const std::size_t runs = draw_run_count(complexity, n, rng);
  std::vector<std::size_t> seq;
  if (runs == complexity) {
    seq = chosen;
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, complexity - 1);
    for (;;) {
      seq.assign(1, chosen[pick(rng)]);
      while (seq.size() < runs) {
        std::size_t next;
        do next = chosen[pick(rng)];
        while (next == seq.back());
        seq.push_back(next);
      }
      if (std::set<std::size_t>(seq.begin(), seq.end()).size() == complexity) break;
    }
  }

  // Random composition of n into `runs` positive lengths.
  std::vector<std::size_t> cuts(n - 1);
  std::iota(cuts.begin(), cuts.end(), 1);
  std::shuffle(cuts.begin(), cuts.end(), rng);
  cuts.resize(runs - 1);
  std::sort(cuts.begin(), cuts.end());
  cuts.push_back(n);

  SyntheticItem item;
  item.complexity = complexity;
  item.cell_source.resize(n);
  std::size_t start = 0;
  for (std::size_t r = 0; r < runs; ++r) {
    for (std::size_t i = start; i < cuts[r]; ++i) item.cell_source[i] = seq[r];
    start = cuts[r];
  }

  item.grid.rows = rows;
  item.grid.cols = cols;
  item.grid.features = Tensor<float>({n, D});
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> v(D);
  for (std::size_t i = 0; i < n; ++i) {
    const auto proto = bank.prototypes.row(item.cell_source[i]);
    if (noise_std == 0.0) {
      std::copy(proto.begin(), proto.end(), item.grid.features.row(i).begin());
      continue;
    }
    double ss = 0;
    for (std::size_t d = 0; d < D; ++d) {
      v[d] = proto[d] + noise_std * noise(rng);
      ss += v[d] * v[d];
    }
    const double norm = std::sqrt(ss);
    for (std::size_t d = 0; d < D; ++d) item.grid.features.at(i, d) = static_cast<float>(v[d] / norm);
  }
  for (auto b : chosen) item.caption.push_back(bank.labels[b]);
  std::sort(item.caption.begin(), item.caption.end());
  return item;
}

// Stream ids reserved outside the item-id space.
inline constexpr std::uint64_t kBankStream = 0xB0B0B0B0ull << 32;

inline PrototypeBank bank_for(const Config& cfg) {
  Rng rng = derive_rng(cfg.seed, kBankStream);
  return make_bank(cfg.data.bank_size, cfg.data.feature_dim, cfg.data.separation, rng);
}

/// Item `id` of the corpus described by cfg. Depends only on (seed, id).
inline SyntheticItem corpus_item(const Config& cfg, const PrototypeBank& bank,
                                 const std::vector<std::pair<std::size_t, double>>& dist, std::uint64_t id,
                                 double noise_std) {
  Rng rng = derive_rng(cfg.seed, id);
  const double u = uniform_open<double>(rng);
  double acc = 0;
  std::size_t complexity = dist.back().first;
  for (const auto& [c, p] : dist) {
    acc += p;
    if (u < acc) {
      complexity = c;
      break;
    }
  }
  SyntheticItem item = gen_image(bank, complexity, cfg.data.grid_rows, cfg.data.grid_cols, noise_std, rng);
  item.grid.image_id = id;
  return item;
}

struct SyntheticSplits {
  std::vector<SyntheticItem> train;
  std::vector<SyntheticItem> val;
};

/// Train ids are [0, train_items); val ids follow, so splits are disjoint.
inline SyntheticSplits gen_splits(const Config& cfg, const PrototypeBank& bank, double noise_std) {
  const auto dist = parse_complexity(cfg.data.complexity, bank.size());
  const std::size_t nt = cfg.data.train_items, nv = cfg.data.val_items;
  std::vector<SyntheticItem> all(nt + nv);
  parallel_for(all.size(), [&](std::size_t i) { all[i] = corpus_item(cfg, bank, dist, i, noise_std); });
  SyntheticSplits s;
  s.train.assign(std::make_move_iterator(all.begin()), std::make_move_iterator(all.begin() + nt));
  s.val.assign(std::make_move_iterator(all.begin() + nt), std::make_move_iterator(all.end()));
  return s;
}

inline Corpus to_corpus(const std::vector<SyntheticItem>& items, std::size_t dim) {
  Corpus c;
  c.feature_dim = dim;
  for (const auto& it : items) c.items.push_back(CorpusItem{it.grid, it.caption});
  return c;
}

}  // namespace lvt
