#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include "lvt/core/nn.hpp"

namespace lvt {

struct AdamWConfig {
  double peak_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-6;
  double weight_decay = 0.1;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
  double grad_clip = 1.0;  // global-norm clip; <= 0 disables
};

/// Linear warm-up from 0 to the peak, then cosine decay reaching exactly 0 at
/// total_steps.
inline double learning_rate(const AdamWConfig& c, std::size_t step) {
  if (step < c.warmup_steps) return c.peak_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  if (step >= c.total_steps) return 0.0;
  const double span = static_cast<double>(c.total_steps - c.warmup_steps);
  const double progress = static_cast<double>(step - c.warmup_steps) / span;
  return c.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// AdamW with decoupled weight decay (applied to rank >= 2 tensors only).
template <class S>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::size_t step_count() const { return step_; }

  // Returns the pre-clip global gradient norm.
  double step(ParamStore<S>& store) {
    double sq = 0.0;
    for (auto& [_, p] : store.items()) {
      if (!p.trainable) continue;
      for (auto g : p.grad.data()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm at step " + std::to_string(step_));
    const double clip = (cfg_.grad_clip > 0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;
    const double lr = learning_rate(cfg_, step_);
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (auto& [name, p] : store.items()) {
      if (!p.trainable) continue;
      auto& st = moments_[name];
      if (st.m.empty()) {
        st.m = Tensor<S>(p.value.shape());
        st.v = Tensor<S>(p.value.shape());
      }
      const bool decay = p.value.rank() >= 2 && cfg_.weight_decay > 0;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = static_cast<double>(p.grad[i]) * clip;
        const double m = cfg_.beta1 * st.m[i] + (1 - cfg_.beta1) * g;
        const double v = cfg_.beta2 * st.v[i] + (1 - cfg_.beta2) * g * g;
        st.m[i] = static_cast<S>(m);
        st.v[i] = static_cast<S>(v);
        double w = p.value[i];
        if (decay) w -= lr * cfg_.weight_decay * w;
        w -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        p.value[i] = static_cast<S>(w);
      }
    }
    return norm;
  }

 private:
  struct Moments {
    Tensor<S> m, v;
  };
  AdamWConfig cfg_;
  std::size_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace lvt
