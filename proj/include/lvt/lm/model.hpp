#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lvt/core/nn.hpp"
#include "lvt/lm/sequence.hpp"

namespace lvt {

template <class S>
struct DecoderBlock {
  LayerNorm<S> ln1, ln2;
  MultiHeadAttention<S> attn;
  FeedForward<S> ffn;
};

template <class S>
struct LmBatchOutput {
  Var<S> hidden;  // [B*L × d_model] after the final norm
  Var<S> logits;  // [B*L × vocab]
  std::size_t batch = 0, len = 0;
};

/// Small causal decoder with one prediction head over the joint vocabulary.
template <class S>
class LanguageModel {
 public:
  LanguageModel(const Config& cfg, std::uint64_t seed) : cfg_(cfg), vocab_(Vocabulary::from(cfg)) {
    validate(cfg_);
    const auto& lc = cfg_.lm;
    Rng rng = derive_rng(seed, 0x1A17u);
    const double sd = lc.init_std;
    const std::size_t dm = lc.d_model;
    embed_ = &store_.normal("lm.embed", {vocab_.size(), dm}, rng, sd);
    pos_ = &store_.normal("lm.pos", {lc.context, dm}, rng, sd);
    proj_ = Linear<S>::create(store_, "lm.proj", cfg_.data.feature_dim, dm, rng, sd);
    for (std::size_t l = 0; l < lc.layers; ++l) {
      const std::string p = "lm.L" + std::to_string(l);
      blocks_.push_back({LayerNorm<S>::create(store_, p + ".ln1", dm), LayerNorm<S>::create(store_, p + ".ln2", dm),
                         MultiHeadAttention<S>::create(store_, p + ".attn", dm, lc.heads, rng, sd),
                         FeedForward<S>::create(store_, p + ".ffn", dm, 4 * dm, rng, sd)});
    }
    ln_f_ = LayerNorm<S>::create(store_, "lm.ln_f", dm);
    head_ = Linear<S>::create(store_, "lm.head", dm, vocab_.size(), rng, sd);
    if (regression())
      reg_ = Linear<S>::create(store_, "lm.reg", dm, cfg_.data.feature_dim, rng, sd);
    if (cfg_.ablation.lm == LmMode::Frozen)
      for (auto& [name, p] : store_.items()) p.trainable = name.rfind("lm.proj.", 0) == 0;
  }

  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }
  const Vocabulary& vocab() const { return vocab_; }
  const Config& config() const { return cfg_; }
  bool regression() const { return cfg_.ablation.visual_objective == VisualObjective::Regression; }

  /// Runs a batch of sequences right-padded to a common length.
  LmBatchOutput<S> forward(Tape<S>& t, const std::vector<const MultimodalSequence<S>*>& seqs) const {
    if (seqs.empty()) throw ValidationError("lm_forward: empty batch");
    std::size_t L = 0;
    for (auto* s : seqs) {
      if (s->size() == 0) throw ValidationError("lm_forward: empty sequence");
      L = std::max(L, s->size());
    }
    if (L > cfg_.lm.context)
      throw ValidationError("lm_forward: sequence length " + std::to_string(L) + " exceeds context " +
                            std::to_string(cfg_.lm.context));
    const std::size_t B = seqs.size();
    std::vector<std::size_t> ids(B * L, Vocabulary::kPad), pos(B * L), over;
    std::size_t n_over = 0;
    for (auto* s : seqs) n_over += s->override_positions().size();
    Tensor<S> feats({std::max<std::size_t>(n_over, 1), cfg_.data.feature_dim});
    for (std::size_t b = 0; b < B; ++b) {
      const auto& s = *seqs[b];
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (s.ids[i] >= vocab_.size())
          throw ValidationError("lm_forward: id " + std::to_string(s.ids[i]) + " outside vocabulary of " +
                                std::to_string(vocab_.size()));
        ids[b * L + i] = s.ids[i];
      }
      for (std::size_t i = 0; i < L; ++i) pos[b * L + i] = i;
      const auto op = s.override_positions();
      for (std::size_t k = 0; k < op.size(); ++k) {
        const auto src = s.visual_features.row(k);
        std::copy(src.begin(), src.end(), feats.row(over.size()).begin());
        over.push_back(b * L + op[k]);
      }
    }
    auto h = gather_rows(t.param(*embed_), ids);
    if (!over.empty()) {
      Tensor<S> used({over.size(), feats.cols()});
      std::copy_n(feats.data().begin(), used.size(), used.data().begin());
      h = replace_rows(h, over, proj_(t, t.constant(std::move(used))));
    }
    h = add(h, gather_rows(t.param(*pos_), pos));
    const Tensor<S> mask = causal_mask<S>(L);
    const AttentionLayout lay{B, L, L, cfg_.lm.heads};
    for (const auto& blk : blocks_) {
      auto a = blk.ln1(t, h);
      h = add(h, blk.attn(t, a, a, mask, lay));
      h = add(h, blk.ffn(t, blk.ln2(t, h)));
    }
    LmBatchOutput<S> o;
    o.hidden = ln_f_(t, h);
    o.logits = head_(t, o.hidden);
    o.batch = B;
    o.len = L;
    return o;
  }

  Var<S> regress(Tape<S>& t, const Var<S>& hidden) const { return reg_(t, hidden); }

 private:
  Config cfg_;
  Vocabulary vocab_;
  ParamStore<S> store_;
  Parameter<S>* embed_ = nullptr;
  Parameter<S>* pos_ = nullptr;
  Linear<S> proj_;
  std::vector<DecoderBlock<S>> blocks_;
  LayerNorm<S> ln_f_;
  Linear<S> head_;
  Linear<S> reg_;
};

/// Next-token targets for a padded batch: row b*L+i predicts ids[i+1].
template <class S>
struct LmTargets {
  std::vector<int> targets;
  std::vector<S> weights;
  std::size_t active = 0;
};

template <class S>
LmTargets<S> next_token_targets(const std::vector<const MultimodalSequence<S>*>& seqs, std::size_t L) {
  LmTargets<S> tg;
  tg.targets.assign(seqs.size() * L, 0);
  tg.weights.assign(seqs.size() * L, S{0});
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const auto& s = *seqs[b];
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      tg.targets[b * L + i] = static_cast<int>(s.ids[i + 1]);
      if (s.loss_mask[i + 1]) {
        tg.weights[b * L + i] = S{1};
        ++tg.active;
      }
    }
  }
  return tg;
}

/// Mean next-token cross-entropy over supervised positions. Under the
/// regression objective, targets that are visual ids are replaced by the
/// squared error between the regressed vector and the target token's
/// unit-normalized feature; the result is the mean over all supervised
/// positions of either term.
template <class S>
Var<S> lm_loss(Tape<S>& t, const LanguageModel<S>& lm, const std::vector<const MultimodalSequence<S>*>& seqs) {
  auto o = lm.forward(t, seqs);
  auto tg = next_token_targets(seqs, o.len);
  if (tg.active == 0) throw ValidationError("lm_loss: no supervised positions");
  if (!lm.regression()) return cross_entropy(o.logits, tg.targets, tg.weights);

  const auto& vocab = lm.vocab();
  const std::size_t D = lm.config().data.feature_dim;
  std::vector<S> cls_w(tg.weights.size(), S{0});
  std::vector<std::size_t> reg_rows;
  std::vector<S> target_rows;
  std::size_t n_cls = 0;
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const auto& s = *seqs[b];
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      const std::size_t r = b * o.len + i;
      if (tg.weights[r] == S{0}) continue;
      if (!vocab.is_visual(s.ids[i + 1])) {
        cls_w[r] = S{1};
        ++n_cls;
        continue;
      }
      const auto it = std::find(s.visual_positions.begin(), s.visual_positions.end(), i + 1);
      const auto f = s.visual_features.row(static_cast<std::size_t>(it - s.visual_positions.begin()));
      double ss = 0;
      for (auto v : f) ss += static_cast<double>(v) * v;
      if (!(ss > 0)) throw NumericError("lm_loss: zero visual feature at position " + std::to_string(i + 1));
      for (auto v : f) target_rows.push_back(static_cast<S>(v / std::sqrt(ss)));
      reg_rows.push_back(r);
    }
  }
  const S total = static_cast<S>(tg.active);
  std::optional<Var<S>> loss;
  if (n_cls > 0) loss = scale(cross_entropy(o.logits, tg.targets, cls_w), static_cast<S>(n_cls) / total);
  if (!reg_rows.empty()) {
    auto pred = lm.regress(t, gather_rows(o.hidden, reg_rows));
    auto err = sum(square(sub(pred, t.constant(Tensor<S>({reg_rows.size(), D}, std::move(target_rows))))));
    auto r = scale(err, S{1} / total);
    loss = loss ? add(*loss, r) : r;
  }
  return *loss;
}

}  // namespace lvt
