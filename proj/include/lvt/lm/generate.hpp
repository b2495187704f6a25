#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "lvt/lm/model.hpp"

namespace lvt {

/// uncond + alpha * (cond - uncond), evaluated as (1 - alpha) uncond + alpha cond
/// so both endpoints are reproduced exactly.
inline std::vector<double> cfg_logits(const std::vector<double>& cond, const std::vector<double>& uncond,
                                      double alpha) {
  if (cond.size() != uncond.size())
    throw DimensionError("cfg_logits: cond has " + std::to_string(cond.size()) + " entries, uncond " +
                         std::to_string(uncond.size()));
  std::vector<double> out(cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - alpha) * uncond[i] + alpha * cond[i];
  return out;
}

/// Keeps the k largest finite logits (lower id first on ties), divides by
/// temperature and samples from the renormalized softmax.
inline std::size_t top_k_sample(const std::vector<double>& logits, std::size_t k, double temperature, Rng& rng) {
  if (k == 0) throw ValidationError("top_k_sample: k must be >= 1");
  if (!(temperature > 0)) throw ValidationError("top_k_sample: temperature must be positive");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (std::isfinite(logits[i])) idx.push_back(i);
  if (idx.empty()) throw ValidationError("top_k_sample: no admissible token");
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  idx.resize(std::min(k, idx.size()));
  if (idx.size() == 1) return idx[0];
  const double mx = logits[idx[0]];
  std::vector<double> w(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) w[i] = std::exp((logits[idx[i]] - mx) / temperature);
  return idx[std::discrete_distribution<std::size_t>(w.begin(), w.end())(rng)];
}

/// Next-token logits at the last position of each sequence.
template <class S>
std::vector<std::vector<double>> last_logits(const LanguageModel<S>& lm,
                                             const std::vector<const MultimodalSequence<S>*>& seqs) {
  Tape<S> t;
  auto o = lm.forward(t, seqs);
  const auto& lv = o.logits.value();
  std::vector<std::vector<double>> out;
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const auto row = lv.row(b * o.len + seqs[b]->size() - 1);
    out.emplace_back(row.begin(), row.end());
  }
  return out;
}

struct GenerationOptions {
  double cfg_scale = 1.5;
  std::size_t top_k = 16;
  double temperature = 1.0;
  std::size_t max_len = 32;

  static GenerationOptions from(const Config& cfg) {
    const auto& g = cfg.generation;
    return {g.cfg_scale, g.top_k, g.temperature, g.max_len};
  }
};

struct GeneratedImage {
  std::vector<std::size_t> codes;
  bool terminated = false;  // [/IMG] was emitted before max_len
};

/// Text-to-image: samples visual ids after "[BOS] text [IMG]" with guidance
/// against the unconditional context "[BOS][IMG]". Only visual ids and [/IMG]
/// are admissible.
template <class S>
GeneratedImage generate_image_tokens(const LanguageModel<S>& lm, const std::vector<std::size_t>& text,
                                     const GenerationOptions& opt, Rng& rng) {
  if (opt.max_len == 0) throw ValidationError("generate_image_tokens: max_len must be >= 1");
  const auto& vocab = lm.vocab();
  MultimodalSequence<S> cond, uncond;
  cond.ids.push_back(Vocabulary::kBos);
  for (auto w : text) cond.ids.push_back(vocab.text_id(w));
  cond.ids.push_back(Vocabulary::kImg);
  uncond.ids = {Vocabulary::kBos, Vocabulary::kImg};
  GeneratedImage out;
  const bool guided = opt.cfg_scale != 1.0;
  for (std::size_t step = 0; step < opt.max_len; ++step) {
    cond.loss_mask.assign(cond.ids.size(), 0);
    uncond.loss_mask.assign(uncond.ids.size(), 0);
    std::vector<double> l;
    if (guided) {
      auto both = last_logits(lm, {&cond, &uncond});
      l = cfg_logits(both[0], both[1], opt.cfg_scale);
    } else {
      l = last_logits(lm, {&cond}).front();
    }
    for (std::size_t id = 0; id < l.size(); ++id)
      if (!vocab.is_visual(id) && id != Vocabulary::kImgEnd) l[id] = -std::numeric_limits<double>::infinity();
    const std::size_t id = top_k_sample(l, opt.top_k, opt.temperature, rng);
    if (id == Vocabulary::kImgEnd) {
      out.terminated = true;
      break;
    }
    out.codes.push_back(vocab.code_of(id));
    cond.ids.push_back(id);
    uncond.ids.push_back(id);
  }
  return out;
}

/// Image-to-text: "[BOS][IMG] v.. [/IMG]" then text ids until the end marker
/// or max_len.
template <class S>
std::vector<std::size_t> generate_text(const LanguageModel<S>& lm, const ImageTokens<S>& image,
                                       const GenerationOptions& opt, Rng& rng) {
  if (image.codes.empty()) throw ValidationError("generate_text: empty visual code list");
  const auto& vocab = lm.vocab();
  auto seq = build_sequence<S>(vocab, &image, {}, Order::ImageFirst, lm.config().ablation.input_mode);
  std::vector<std::size_t> text;
  for (std::size_t step = 0; step < opt.max_len; ++step) {
    seq.loss_mask.assign(seq.ids.size(), 0);
    auto l = last_logits(lm, {&seq}).front();
    for (std::size_t id = 0; id < l.size(); ++id)
      if (!vocab.is_text(id) && id != Vocabulary::kPad) l[id] = -std::numeric_limits<double>::infinity();
    const std::size_t id = top_k_sample(l, opt.top_k, opt.temperature, rng);
    if (id == Vocabulary::kPad) break;
    text.push_back(vocab.text_of(id));
    seq.ids.push_back(id);
  }
  return text;
}

/// Sum of log p(ids[i] | ids[<i]) over positions with loss_mask = 1.
template <class S>
std::vector<double> sequence_log_likelihood(const LanguageModel<S>& lm,
                                            const std::vector<const MultimodalSequence<S>*>& seqs) {
  Tape<S> t;
  auto o = lm.forward(t, seqs);
  const auto& lv = o.logits.value();
  const std::size_t V = lv.cols();
  std::vector<double> ll(seqs.size(), 0.0);
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const auto& s = *seqs[b];
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      if (!s.loss_mask[i + 1]) continue;
      const S* row = lv.data().data() + (b * o.len + i) * V;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double z = 0;
      for (std::size_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
      ll[b] += row[s.ids[i + 1]] - mx - std::log(z);
    }
  }
  return ll;
}

/// Candidate maximizing log p(codes, [/IMG] | "[BOS] text [IMG]"); the first
/// one wins ties.
template <class S>
std::size_t rerank_by_likelihood(const LanguageModel<S>& lm, const std::vector<std::vector<std::size_t>>& candidates,
                                 const std::vector<std::size_t>& text) {
  if (candidates.empty()) throw ValidationError("rerank: no candidates");
  if (candidates.size() == 1) return 0;
  std::vector<MultimodalSequence<S>> seqs;
  for (const auto& c : candidates) {
    MultimodalSequence<S> s;
    s.ids.push_back(Vocabulary::kBos);
    for (auto w : text) s.ids.push_back(lm.vocab().text_id(w));
    s.ids.push_back(Vocabulary::kImg);
    const std::size_t first = s.ids.size();
    for (auto code : c) s.ids.push_back(lm.vocab().visual_id(code));
    s.ids.push_back(Vocabulary::kImgEnd);
    s.loss_mask.assign(s.ids.size(), 0);
    for (std::size_t i = first; i < s.ids.size(); ++i) s.loss_mask[i] = 1;
    seqs.push_back(std::move(s));
  }
  std::vector<const MultimodalSequence<S>*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  const auto ll = sequence_log_likelihood(lm, ptrs);
  std::size_t best = 0;
  for (std::size_t i = 1; i < ll.size(); ++i)
    if (ll[i] > ll[best]) best = i;
  return best;
}

}  // namespace lvt
