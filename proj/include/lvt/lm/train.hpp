#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lvt/core/optim.hpp"
#include "lvt/io/metrics.hpp"
#include "lvt/lm/generate.hpp"

namespace lvt {

/// Training material for the LM: image-caption pairs plus text-only captions.
template <class S>
struct LmData {
  std::vector<ImageTokens<S>> images;
  std::vector<std::vector<std::size_t>> captions;  // captions[i] pairs with images[i]
  std::vector<std::vector<std::size_t>> texts;     // text-only sequences
};

inline AdamWConfig lm_optim(const Config& cfg) {
  const auto& l = cfg.lm;
  return AdamWConfig{l.lr, l.beta1, l.beta2, l.eps, l.weight_decay, l.warmup, l.steps, l.grad_clip};
}

inline SequenceOptions sequence_options(const Config& cfg) {
  return {cfg.lm.loss_scope, cfg.lm.supervise_specials, true};
}

struct LmStepStats {
  double loss = 0, lr = 0, grad_norm = 0;
  bool text_only = false;
};

/// Each step draws either a text-only batch (probability mix_ratio, when
/// text-only data exists) or a batch of pairs, each pair ordered image-first
/// with probability image_first_prob.
template <class S>
void train_lm(LanguageModel<S>& lm, const LmData<S>& data, const Config& cfg, MetricsSink& sink,
              std::size_t max_steps = 0, const std::function<void(std::size_t, const LmStepStats&)>& on_step = {}) {
  if (data.images.size() != data.captions.size()) throw ValidationError("train-lm: images and captions differ in count");
  if (data.images.empty() && data.texts.empty()) throw ValidationError("train-lm: empty dataset");
  const auto& lc = cfg.lm;
  AdamW<S> opt(lm_optim(cfg));
  Rng rng = derive_rng(cfg.seed, 0x1A17A1Bull);
  const std::size_t steps = max_steps ? std::min(max_steps, lc.steps) : lc.steps;
  const auto sopt = sequence_options(cfg);
  const auto mode = cfg.ablation.input_mode;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t step = 0; step < steps; ++step) {
    LmStepStats st;
    st.text_only = data.images.empty() || (!data.texts.empty() && lc.mix_ratio > 0 && u(rng) < lc.mix_ratio);
    std::vector<MultimodalSequence<S>> seqs;
    for (std::size_t b = 0; b < lc.batch; ++b) {
      if (st.text_only) {
        const auto& txt = data.texts[std::uniform_int_distribution<std::size_t>(0, data.texts.size() - 1)(rng)];
        seqs.push_back(build_sequence<S>(lm.vocab(), nullptr, txt, Order::TextFirst, mode, sopt));
      } else {
        const std::size_t i = std::uniform_int_distribution<std::size_t>(0, data.images.size() - 1)(rng);
        const Order order = u(rng) < lc.image_first_prob ? Order::ImageFirst : Order::TextFirst;
        seqs.push_back(build_sequence<S>(lm.vocab(), &data.images[i], data.captions[i], order, mode, sopt));
      }
    }
    std::vector<const MultimodalSequence<S>*> ptrs;
    for (const auto& s : seqs) ptrs.push_back(&s);
    lm.params().zero_grad();
    try {
      Tape<S> t;
      auto loss = lm_loss(t, lm, ptrs);
      st.loss = loss.value().item();
      t.backward(loss);
      st.lr = learning_rate(opt.config(), step);
      st.grad_norm = opt.step(lm.params());
    } catch (const NumericError& e) {
      throw NumericError("train-lm: step " + std::to_string(step) + ": " + e.what());
    }
    sink.emit({{"stage", std::string("lm")},
               {"step", static_cast<double>(step)},
               {"loss", st.loss},
               {"batch_kind", std::string(st.text_only ? "text" : "multimodal")},
               {"lr", st.lr},
               {"grad_norm", st.grad_norm}});
    if (on_step) on_step(step, st);
  }
}

/// Mean next-token cross-entropy over the supervised positions of `seqs`.
template <class S>
double mean_cross_entropy(const LanguageModel<S>& lm, const std::vector<MultimodalSequence<S>>& seqs,
                          std::size_t chunk = 64) {
  double total = 0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < seqs.size(); s += chunk) {
    std::vector<const MultimodalSequence<S>*> ptrs;
    for (std::size_t i = s; i < std::min(seqs.size(), s + chunk); ++i) ptrs.push_back(&seqs[i]);
    for (auto v : sequence_log_likelihood(lm, ptrs)) total -= v;
    for (auto* p : ptrs)
      for (std::size_t i = 1; i < p->size(); ++i) count += p->loss_mask[i];
  }
  if (count == 0) throw ValidationError("mean_cross_entropy: no supervised positions");
  return total / static_cast<double>(count);
}

}  // namespace lvt
