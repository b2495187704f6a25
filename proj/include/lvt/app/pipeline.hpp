#pragma once

// Glue between stages: tokenized images for the LM, (signal, condition) rows
// for the denoiser.

#include <vector>

#include "lvt/core/parallel.hpp"
#include "lvt/data/synth.hpp"
#include "lvt/diffusion/denoiser.hpp"
#include "lvt/lm/train.hpp"
#include "lvt/tokenizer/train.hpp"

namespace lvt {

/// Inference tokenization of many grids, chunked across workers.
template <class S>
std::vector<TokenizedImage<S>> tokenize_all(const Tokenizer<S>& tk, const std::vector<const PatchGrid*>& grids,
                                            std::size_t chunk = 64) {
  std::vector<TokenizedImage<S>> out(grids.size());
  const std::size_t n_chunks = (grids.size() + chunk - 1) / chunk;
  parallel_for(n_chunks, [&](std::size_t c) {
    const std::size_t lo = c * chunk, hi = std::min(grids.size(), lo + chunk);
    auto part = tk.tokenize(std::vector<const PatchGrid*>(grids.begin() + lo, grids.begin() + hi));
    for (std::size_t i = lo; i < hi; ++i) out[i] = std::move(part[i - lo]);
  });
  return out;
}

template <class S>
ImageTokens<S> image_tokens(const TokenizedImage<S>& img) {
  return {img.codes, img.merged};
}

inline std::vector<std::size_t> caption_tokens(const std::vector<std::uint16_t>& caption) {
  return std::vector<std::size_t>(caption.begin(), caption.end());
}

/// The first lm.pairs items become image-caption pairs; captions of the
/// remaining items form the text-only set.
template <class S>
LmData<S> build_lm_data(const Tokenizer<S>& tk, const std::vector<CorpusItem>& items, const Config& cfg) {
  const std::size_t pairs = std::min(cfg.lm.pairs, items.size());
  std::vector<const PatchGrid*> grids;
  for (std::size_t i = 0; i < pairs; ++i) grids.push_back(&items[i].grid);
  LmData<S> data;
  for (auto& img : tokenize_all(tk, grids)) data.images.push_back(image_tokens(img));
  for (std::size_t i = 0; i < pairs; ++i) {
    if (items[i].caption.empty()) throw ValidationError("train-lm: item " + std::to_string(i) + " has no caption");
    data.captions.push_back(caption_tokens(items[i].caption));
  }
  for (std::size_t i = pairs; i < items.size(); ++i)
    if (!items[i].caption.empty()) data.texts.push_back(caption_tokens(items[i].caption));
  return data;
}

/// Flattened grids as diffusion signals, conditioned on the tokenizer's
/// reconstruction of the same grid.
template <class S>
std::pair<Tensor<S>, Tensor<S>> denoiser_pairs(const Tokenizer<S>& tk, const std::vector<const PatchGrid*>& grids,
                                               std::size_t chunk = 64) {
  const std::size_t n = tk.patches() * tk.dim();
  Tensor<S> z0({grids.size(), n}), cond({grids.size(), n});
  const std::size_t n_chunks = (grids.size() + chunk - 1) / chunk;
  parallel_for(n_chunks, [&](std::size_t c) {
    const std::size_t lo = c * chunk, hi = std::min(grids.size(), lo + chunk);
    std::vector<const PatchGrid*> part(grids.begin() + lo, grids.begin() + hi);
    const Tensor<S> X = tk.stack(part);
    Tape<S> t;
    const auto recon = tk.forward(t, X, {RunMode::Infer}).recon.value();
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        z0.at(i, j) = X[(i - lo) * n + j];
        cond.at(i, j) = recon[(i - lo) * n + j];
      }
  });
  return {std::move(z0), std::move(cond)};
}

}  // namespace lvt
