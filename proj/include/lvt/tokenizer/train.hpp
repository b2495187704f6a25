#pragma once

#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "lvt/core/optim.hpp"
#include "lvt/data/synth.hpp"
#include "lvt/io/metrics.hpp"
#include "lvt/tokenizer/model.hpp"

namespace lvt {

struct TokenizerStepStats {
  double loss = 0, recon = 0, rate = 0, commit = 0, keep_fraction = 0, perplexity = 0, lr = 0, grad_norm = 0, tau = 0;
  double revived = 0;
};

inline AdamWConfig tokenizer_optim(const Config& cfg) {
  const auto& t = cfg.tokenizer;
  return AdamWConfig{t.lr, t.beta1, t.beta2, t.eps, t.weight_decay, t.warmup, t.steps, t.grad_clip};
}

inline double tokenizer_tau(const Config& cfg, std::size_t step) {
  const auto& t = cfg.tokenizer;
  if (t.steps <= 1) return t.temperature;
  const double f = static_cast<double>(step) / static_cast<double>(t.steps - 1);
  return t.temperature + (t.temperature_final - t.temperature) * f;
}

/// Trains the tokenizer with the rate-controlled reconstruction loss plus the
/// commitment term, updating the codebook by EMA after each optimizer step.
/// `max_steps` (0 = config value) truncates the run without changing the
/// schedule.
template <class S>
void train_tokenizer(Tokenizer<S>& tk, const std::vector<const PatchGrid*>& data, const Config& cfg,
                     MetricsSink& sink, std::size_t max_steps = 0,
                     const std::function<void(std::size_t, const TokenizerStepStats&)>& on_step = {}) {
  if (data.empty()) throw ValidationError("train-tokenizer: empty dataset");
  const auto& tc = cfg.tokenizer;
  AdamW<S> opt(tokenizer_optim(cfg));
  Rng rng = derive_rng(cfg.seed, 0x70CE7A1Dull);
  const std::size_t steps = max_steps ? std::min(max_steps, tc.steps) : tc.steps;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<const PatchGrid*> batch;
    while (batch.size() < tc.batch) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(data[order[cursor++]]);
    }
    const Tensor<S> X = tk.stack(batch);
    TokenizerStepStats st;
    st.tau = tokenizer_tau(cfg, step);
    tk.params().zero_grad();
    try {
      Tape<S> t;
      auto o = tk.forward(t, X, {RunMode::Train, st.tau, false, true, nullptr, &rng});
      auto x = t.constant(X);
      // fixed tokenization has no selector, so no rate term
      const S lambda = tk.fixed() ? S{0} : static_cast<S>(tc.rate_weight);
      auto base = tokenizer_loss(x, o.recon, o.keep, static_cast<S>(tc.rate_target), lambda);
      auto commit = commitment_loss(o.unit, o.quantized.value(), o.mask);
      auto loss = add(base, scale(commit, static_cast<S>(tc.commitment)));
      st.loss = loss.value().item();
      st.commit = commit.value().item();
      st.recon = mean(one_minus(row_cosine(x, o.recon))).value().item();
      st.rate = st.loss - st.recon - tc.commitment * st.commit;
      t.backward(loss);
      st.lr = learning_rate(opt.config(), step);
      st.grad_norm = opt.step(tk.params());

      Tensor<S> kept_unit({std::max<std::size_t>(1, std::count(o.mask.begin(), o.mask.end(), 1)), tk.dim()});
      std::vector<std::size_t> assign;
      std::vector<double> hist(tk.codebook().size(), 0.0);
      for (std::size_t r = 0; r < o.mask.size(); ++r) {
        if (!o.mask[r]) continue;
        const auto row = o.unit.value().row(r);
        std::copy(row.begin(), row.end(), kept_unit.row(assign.size()).begin());
        assign.push_back(o.codes[r]);
        hist[o.codes[r]] += 1;
      }
      st.keep_fraction = static_cast<double>(assign.size()) / static_cast<double>(o.mask.size());
      st.perplexity = perplexity(hist);
      if (!assign.empty())
        st.revived = static_cast<double>(
            tk.codebook().ema_update(kept_unit, assign, tc.ema_decay, tc.dead_code_steps, rng, tc.revival_threshold));
    } catch (const NumericError& e) {
      throw NumericError("train-tokenizer: step " + std::to_string(step) + ": " + e.what());
    }
    sink.emit({{"stage", std::string("tokenizer")},
               {"step", static_cast<double>(step)},
               {"loss", st.loss},
               {"recon_loss", st.recon},
               {"rate_loss", st.rate},
               {"commit_loss", st.commit},
               {"keep_fraction", st.keep_fraction},
               {"perplexity", st.perplexity},
               {"revived_codes", st.revived},
               {"lr", st.lr},
               {"grad_norm", st.grad_norm},
               {"tau", st.tau}});
    if (on_step) on_step(step, st);
  }
}

struct TokenizerEval {
  double keep_fraction = 0;
  double recon_cosine = 0;
  double mean_tokens = 0;
};

/// Inference-mode statistics over a set of grids.
template <class S>
TokenizerEval evaluate_tokenizer(const Tokenizer<S>& tk, const std::vector<const PatchGrid*>& data,
                                 std::size_t chunk = 64) {
  TokenizerEval ev;
  std::size_t total = 0, kept = 0;
  double cos_sum = 0;
  for (std::size_t s = 0; s < data.size(); s += chunk) {
    std::vector<const PatchGrid*> part(data.begin() + s, data.begin() + std::min(data.size(), s + chunk));
    const Tensor<S> X = tk.stack(part);
    Tape<S> t;
    auto o = tk.forward(t, X, {RunMode::Infer});
    auto cos = row_cosine(t.constant(X), o.recon).value();
    for (std::size_t r = 0; r < o.mask.size(); ++r) {
      cos_sum += cos[r];
      kept += o.mask[r];
      ++total;
    }
  }
  ev.keep_fraction = static_cast<double>(kept) / static_cast<double>(total);
  ev.recon_cosine = cos_sum / static_cast<double>(total);
  ev.mean_tokens = static_cast<double>(kept) / static_cast<double>(data.size());
  return ev;
}

}  // namespace lvt
