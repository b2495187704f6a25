#pragma once

// Dynamic visual tokenizer: token selector, token merger, codebook lookup and
// a feature decoder. A batch is B grids of the same N stacked into [B*N × D];
// variable retained sets are expressed with per-key attention gates rather
// than by gathering, so every tensor keeps a fixed shape.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lvt/core/nn.hpp"
#include "lvt/io/config.hpp"
#include "lvt/tokenizer/codebook.hpp"

namespace lvt {

enum class RunMode { Train, Infer };

inline constexpr std::size_t kKeep = 0;  // selector column meaning "retain"

/// softmax((log_softmax(pi) + g) / tau), row-wise over the 2 decision logits.
template <class S>
Var<S> gumbel_relax(const Var<S>& pi, const Tensor<S>& g, S tau) {
  if (!(tau > 0)) throw ValidationError("gumbel relaxation: temperature must be positive");
  auto z = add(log_softmax(pi), pi.tape().constant(g));
  return softmax(scale(z, S{1} / tau), 1);
}

/// Value-level selection result for one or more grids.
template <class S>
struct DecisionMask {
  Tensor<S> pi;                     // [N × 2] selector logits
  Tensor<S> pi_hat;                 // [N × 2] relaxation (train) or softmax(pi) (infer)
  std::vector<std::uint8_t> keep;   // M
  double tau = 1.0;

  std::size_t retained() const { return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 1)); }
};

template <class S>
std::vector<std::uint8_t> hard_keep(const Tensor<S>& probs) {
  std::vector<std::uint8_t> m(probs.rows());
  for (std::size_t r = 0; r < probs.rows(); ++r) m[r] = probs.at(r, 0) >= probs.at(r, 1) ? 1 : 0;
  return m;
}

template <class S>
struct TokenBlock {
  LayerNorm<S> ln_self, ln_cross, ln_kv, ln_ffn;
  MultiHeadAttention<S> self_attn, cross_attn;
  FeedForward<S> ffn;

  static TokenBlock create(ParamStore<S>& st, const std::string& name, std::size_t D, std::size_t heads,
                           std::size_t ffn_hidden, Rng& rng, double sd) {
    return TokenBlock{LayerNorm<S>::create(st, name + ".ln_self", D),
                      LayerNorm<S>::create(st, name + ".ln_cross", D),
                      LayerNorm<S>::create(st, name + ".ln_kv", D),
                      LayerNorm<S>::create(st, name + ".ln_ffn", D),
                      MultiHeadAttention<S>::create(st, name + ".self", D, heads, rng, sd),
                      MultiHeadAttention<S>::create(st, name + ".cross", D, heads, rng, sd, false),
                      FeedForward<S>::create(st, name + ".ffn", D, ffn_hidden, rng, sd)};
  }
};

template <class S>
struct TokenizerForwardOptions {
  RunMode mode = RunMode::Train;
  double tau = 1.0;
  bool relaxed = false;             // use the soft relaxation as M (no straight-through)
  bool quantize = true;             // false decodes from l2(merged) directly
  const Tensor<S>* gumbel = nullptr;  // fixed noise [B*N × 2]; otherwise drawn from rng
  Rng* rng = nullptr;               // no rng and no fixed noise means G = 0
};

template <class S>
struct TokenizerOutput {
  std::optional<Var<S>> logits;     // absent under fixed tokenization
  Tensor<S> pi_hat;
  Var<S> keep;                      // M as a differentiable [B*N] vector
  std::vector<std::uint8_t> mask;   // hard M
  Var<S> merged;                    // [B*N × D] merger output at every position
  Var<S> unit;                      // l2(merged)
  Var<S> quantized;                 // straight-through code rows (or unit)
  std::vector<std::size_t> codes;   // per position; meaningful where mask = 1
  Var<S> recon;                     // [B*N × D]
};

/// One image after inference tokenization.
template <class S>
struct TokenizedImage {
  std::vector<std::size_t> codes;      // length T
  std::vector<std::size_t> positions;  // raster positions of retained patches
  Tensor<S> merged;                    // [T × D]
  Tensor<S> quantized;                 // [T × D]
  DecisionMask<S> mask;

  std::size_t length() const { return codes.size(); }
};

template <class S>
class Tokenizer {
 public:
  Tokenizer(const Config& cfg, std::uint64_t seed) : cfg_(cfg) {
    validate(cfg_);
    const auto& tc = cfg_.tokenizer;
    n_ = cfg_.data.patches();
    d_ = cfg_.data.feature_dim;
    Rng rng = derive_rng(seed, 0x70CE11ull);
    const double sd = tc.init_std;
    fc1_ = Linear<S>::create(store_, "selector.fc1", 2 * d_, tc.selector_hidden, rng, 1.0 / std::sqrt(2.0 * d_));
    fc2_ = Linear<S>::create(store_, "selector.fc2", tc.selector_hidden, 2, rng,
                             1.0 / std::sqrt(double(tc.selector_hidden)));
    for (std::size_t l = 0; l < tc.blocks; ++l)
      merger_.push_back(TokenBlock<S>::create(store_, "merger." + std::to_string(l), d_, tc.heads,
                                              tc.ffn_mult * d_, rng, sd));
    merger_ln_ = LayerNorm<S>::create(store_, "merger.ln_out", d_);
    codebook_ = Codebook<S>::create(store_, tc.codebook_size, d_, rng);
    pos_query_ = &store_.normal("decoder.pos_query", {n_, d_}, rng, 1.0);
    key_pos_ = &store_.normal("decoder.key_pos", {n_, d_}, rng, 1.0);
    for (std::size_t l = 0; l < tc.blocks; ++l)
      decoder_.push_back(TokenBlock<S>::create(store_, "decoder." + std::to_string(l), d_, tc.heads,
                                               tc.ffn_mult * d_, rng, sd));
    decoder_ln_ = LayerNorm<S>::create(store_, "decoder.ln_out", d_);
    decoder_out_ = Linear<S>::create(store_, "decoder.out", d_, d_, rng, 1.0 / std::sqrt(double(d_)));
  }

  Tokenizer(Tokenizer&&) noexcept = default;
  Tokenizer& operator=(Tokenizer&&) noexcept = default;

  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }
  const Config& config() const { return cfg_; }
  Codebook<S>& codebook() { return codebook_; }
  const Codebook<S>& codebook() const { return codebook_; }
  std::size_t patches() const { return n_; }
  std::size_t dim() const { return d_; }
  bool fixed() const { return cfg_.ablation.tokenization == Tokenization::Fixed; }

  /// Stacks grids into [B*N × D]; all grids must share N and D.
  template <class Grid>
  Tensor<S> stack(const std::vector<const Grid*>& grids) const {
    if (grids.empty()) throw ValidationError("tokenizer: empty batch");
    Tensor<S> X({grids.size() * n_, d_});
    for (std::size_t b = 0; b < grids.size(); ++b) {
      const auto& f = grids[b]->features;
      if (f.rows() != n_ || f.cols() != d_)
        throw DimensionError("tokenizer: grid " + shape_str(f.shape()) + " does not match configured N=" +
                             std::to_string(n_) + ", D=" + std::to_string(d_));
      for (std::size_t i = 0; i < n_ * d_; ++i) X[b * n_ * d_ + i] = static_cast<S>(f[i]);
    }
    return X;
  }

  /// Selector logits [B*N × 2]. The MLP sees each patch together with its
  /// raster predecessor (zeros for the first patch).
  Var<S> select_logits(Tape<S>& t, const Tensor<S>& X) const {
    Tensor<S> prev(X.shape());
    for (std::size_t r = 0; r < X.rows(); ++r)
      if (r % n_ != 0)
        for (std::size_t d = 0; d < d_; ++d) prev.at(r, d) = X.at(r - 1, d);
    auto in = concat_cols(t.constant(X), t.constant(prev));
    return fc2_(t, gelu(fc1_(t, in)));
  }

  /// Merger over all positions. Retained tokens self-attend (keys gated by M)
  /// and then cross-attend to the dropped input features (keys gated by 1-M).
  Var<S> merge(Tape<S>& t, const Var<S>& x, const Var<S>& keep, std::size_t batch) const {
    const AttentionLayout lay{batch, n_, n_, 1};
    const Tensor<S> self_mask =
        cfg_.ablation.attn_mode == AttnMode::Causal ? causal_mask<S>(n_) : Tensor<S>({n_, n_});
    const Tensor<S> open({n_, n_});
    auto drop = one_minus(keep);
    Var<S> h = x;
    for (const auto& blk : merger_) {
      auto a = blk.ln_self(t, h);
      h = add(h, blk.self_attn(t, a, a, self_mask, lay, keep));
      if (cfg_.ablation.merger) {
        auto c = blk.ln_cross(t, h);
        h = add(h, blk.cross_attn(t, c, blk.ln_kv(t, x), open, lay, drop));
      }
      h = add(h, blk.ffn(t, blk.ln_ffn(t, h)));
    }
    return merger_ln_(t, h);
  }

  /// Reconstructs all N positions from the retained tokens. Position queries
  /// attend to tokens at raster positions up to their own.
  Var<S> decode(Tape<S>& t, const Var<S>& tokens, const Var<S>& keep, std::size_t batch) const {
    const AttentionLayout lay{batch, n_, n_, 1};
    std::vector<std::size_t> idx(batch * n_);
    for (std::size_t r = 0; r < idx.size(); ++r) idx[r] = r % n_;
    auto h = gather_rows(t.param(*pos_query_), idx);
    auto mem = add(tokens, gather_rows(t.param(*key_pos_), idx));
    const Tensor<S> open({n_, n_});
    const Tensor<S> causal = causal_mask<S>(n_);
    for (const auto& blk : decoder_) {
      auto a = blk.ln_self(t, h);
      h = add(h, blk.self_attn(t, a, a, open, lay));
      auto c = blk.ln_cross(t, h);
      h = add(h, blk.cross_attn(t, c, blk.ln_kv(t, mem), causal, lay, keep));
      h = add(h, blk.ffn(t, blk.ln_ffn(t, h)));
    }
    return decoder_out_(t, decoder_ln_(t, h));
  }

  TokenizerOutput<S> forward(Tape<S>& t, const Tensor<S>& X, const TokenizerForwardOptions<S>& opt) const {
    if (X.rank() != 2 || X.cols() != d_ || X.rows() % n_ != 0)
      throw DimensionError("tokenizer: input " + shape_str(X.shape()) + " is not a stack of " + std::to_string(n_) +
                           "x" + std::to_string(d_) + " grids");
    const std::size_t BN = X.rows(), batch = BN / n_;
    TokenizerOutput<S> o;
    if (fixed()) {
      o.mask.assign(BN, 1);
      o.keep = t.constant(Tensor<S>({BN}, S{1}));
    } else {
      o.logits = select_logits(t, X);
      if (opt.mode == RunMode::Infer) {
        o.pi_hat = softmax(t.constant(o.logits->value()), 1).value();
        o.mask = hard_keep(o.pi_hat);
        force_keep(o.logits->value(), o.mask);
        o.keep = t.constant(mask_tensor(o.mask));
      } else {
        Tensor<S> g({BN, 2});
        if (opt.gumbel) g = *opt.gumbel;
        else if (opt.rng) g = gumbel_noise<S>({BN, 2}, *opt.rng);
        auto relaxed = gumbel_relax(*o.logits, g, static_cast<S>(opt.tau));
        o.pi_hat = relaxed.value();
        o.mask = hard_keep(o.pi_hat);
        Tensor<S> hard({BN, 2});
        for (std::size_t r = 0; r < BN; ++r) hard.at(r, o.mask[r] ? 0 : 1) = S{1};
        auto y = opt.relaxed ? relaxed : straight_through(relaxed, hard);
        o.keep = column(y, kKeep);
      }
    }
    o.merged = merge(t, t.constant(X), o.keep, batch);
    o.unit = normalize_rows(o.merged);
    if (opt.quantize) {
      auto q = quantize(o.unit.value(), codebook_.codes->value);
      o.codes = std::move(q.codes);
      o.quantized = straight_through(o.unit, std::move(q.vectors));
    } else {
      o.quantized = o.unit;
    }
    o.recon = decode(t, o.quantized, o.keep, batch);
    return o;
  }

  /// Deterministic inference tokenization of a batch of grids.
  template <class Grid>
  std::vector<TokenizedImage<S>> tokenize(const std::vector<const Grid*>& grids) const {
    const Tensor<S> X = stack(grids);
    Tape<S> t;
    auto o = forward(t, X, {RunMode::Infer});
    std::vector<TokenizedImage<S>> out(grids.size());
    for (std::size_t b = 0; b < grids.size(); ++b) {
      auto& img = out[b];
      img.mask.tau = 1.0;
      img.mask.pi = Tensor<S>({n_, 2});
      img.mask.pi_hat = Tensor<S>({n_, 2}, S{0});
      for (std::size_t i = 0; i < n_; ++i) {
        const std::size_t r = b * n_ + i;
        img.mask.keep.push_back(o.mask[r]);
        if (o.logits)
          for (std::size_t c = 0; c < 2; ++c) {
            img.mask.pi.at(i, c) = o.logits->value().at(r, c);
            img.mask.pi_hat.at(i, c) = o.pi_hat.at(r, c);
          }
        else
          img.mask.pi_hat.at(i, kKeep) = S{1};
        if (o.mask[r]) {
          img.positions.push_back(i);
          img.codes.push_back(o.codes[r]);
        }
      }
      const std::size_t T = img.positions.size();
      img.merged = Tensor<S>({T, d_});
      img.quantized = Tensor<S>({T, d_});
      for (std::size_t k = 0; k < T; ++k) {
        const std::size_t r = b * n_ + img.positions[k];
        for (std::size_t d = 0; d < d_; ++d) {
          img.merged.at(k, d) = o.merged.value().at(r, d);
          img.quantized.at(k, d) = o.quantized.value().at(r, d);
        }
      }
    }
    return out;
  }

  TokenizedImage<S> tokenize_one(const Tensor<S>& features) const {
    struct G {
      Tensor<S> features;
    } g{features};
    return tokenize(std::vector<const G*>{&g}).front();
  }

  /// Decodes quantized tokens at the given positions back to N features.
  Tensor<S> decode_tokens(const std::vector<std::size_t>& codes, const std::vector<std::size_t>& positions) const {
    if (codes.size() != positions.size()) throw DimensionError("decode: codes and positions differ in length");
    if (codes.empty()) throw ValidationError("decode: no tokens (T = 0)");
    Tensor<S> tokens({n_, d_});
    Tensor<S> keep({n_});
    for (std::size_t k = 0; k < codes.size(); ++k) {
      if (positions[k] >= n_ || codes[k] >= codebook_.size()) throw ValidationError("decode: token out of range");
      keep[positions[k]] = S{1};
      const auto c = codebook_.codes->value.row(codes[k]);
      std::copy(c.begin(), c.end(), tokens.row(positions[k]).begin());
    }
    Tape<S> t;
    return decode(t, t.constant(tokens), t.constant(keep), 1).value();
  }

 private:
  Tensor<S> mask_tensor(const std::vector<std::uint8_t>& m) const {
    Tensor<S> k({m.size()});
    for (std::size_t i = 0; i < m.size(); ++i) k[i] = m[i] ? S{1} : S{0};
    return k;
  }

  // An image whose argmax mask drops everything keeps its most likely patch.
  void force_keep(const Tensor<S>& logits, std::vector<std::uint8_t>& m) const {
    for (std::size_t b = 0; b < m.size() / n_; ++b) {
      std::size_t best = b * n_;
      bool any = false;
      for (std::size_t i = b * n_; i < (b + 1) * n_; ++i) {
        any = any || m[i];
        if (logits.at(i, 0) - logits.at(i, 1) > logits.at(best, 0) - logits.at(best, 1)) best = i;
      }
      if (!any) m[best] = 1;
    }
  }

  Config cfg_;
  std::size_t n_ = 0, d_ = 0;
  ParamStore<S> store_;
  Linear<S> fc1_, fc2_;
  std::vector<TokenBlock<S>> merger_;
  LayerNorm<S> merger_ln_;
  Codebook<S> codebook_;
  Parameter<S>* pos_query_ = nullptr;
  Parameter<S>* key_pos_ = nullptr;
  std::vector<TokenBlock<S>> decoder_;
  LayerNorm<S> decoder_ln_;
  Linear<S> decoder_out_;
};

/// mean(1 - cos(x_i, x_i^rec)) + lambda * (rho - mean(M))^2
template <class S>
Var<S> tokenizer_loss(const Var<S>& x, const Var<S>& recon, const Var<S>& keep, S rho, S lambda) {
  if (!(rho > 0 && rho <= 1)) throw ValidationError("tokenizer loss: rho must lie in (0, 1]");
  auto rec = mean(one_minus(row_cosine(x, recon)));
  auto rate = square(add_scalar(scale(mean(keep), S{-1}), rho));
  return add(rec, scale(rate, lambda));
}

/// Mean squared distance between retained unit features and their codes.
template <class S>
Var<S> commitment_loss(const Var<S>& unit, const Tensor<S>& code_rows, const std::vector<std::uint8_t>& mask) {
  const std::size_t kept = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
  Tensor<S> w({mask.size()});
  for (std::size_t i = 0; i < mask.size(); ++i) w[i] = mask[i] ? S{1} / static_cast<S>(std::max<std::size_t>(kept, 1)) : S{0};
  auto& t = unit.tape();
  auto per_row = row_sum(square(sub(unit, t.constant(code_rows))));
  return sum(mul(per_row, t.constant(w)));
}

}  // namespace lvt
