#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "lvt/core/optim.hpp"
#include "lvt/diffusion/schedule.hpp"
#include "lvt/io/config.hpp"
#include "lvt/io/metrics.hpp"

namespace lvt {

/// Sinusoidal embedding of integer steps: [sin(t f_k), cos(t f_k)] with
/// f_k = 10000^(-k/half).
template <class S>
Tensor<S> time_embedding(const std::vector<std::size_t>& ts, std::size_t dim) {
  if (dim < 2 || dim % 2 != 0) throw ValidationError("time embedding dimension must be even and >= 2");
  const std::size_t half = dim / 2;
  Tensor<S> e({ts.size(), dim});
  for (std::size_t r = 0; r < ts.size(); ++r)
    for (std::size_t k = 0; k < half; ++k) {
      const double f = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(half));
      e.at(r, k) = static_cast<S>(std::sin(static_cast<double>(ts[r]) * f));
      e.at(r, half + k) = static_cast<S>(std::cos(static_cast<double>(ts[r]) * f));
    }
  return e;
}

/// Noise predictor eps(z_t, t, cond) for a batch of rows.
template <class S>
using EpsPredictor = std::function<Var<S>(Tape<S>&, const Var<S>&, const std::vector<std::size_t>&, const Var<S>&)>;

/// Three-layer MLP over concat(z_t, time embedding, cond), plus a learned
/// per-step gain on z_t initialized to sqrt(1 - abar_t).
template <class S>
class Denoiser {
 public:
  Denoiser(std::size_t signal_dim, std::size_t cond_dim, const DenoiserConfig& cfg, std::uint64_t seed)
      : signal_dim_(signal_dim), cond_dim_(cond_dim), time_dim_(cfg.time_dim) {
    if (signal_dim == 0) throw ValidationError("denoiser: signal dimension must be positive");
    Rng rng = derive_rng(seed, 0xD1FFu);
    const std::size_t in = signal_dim + cfg.time_dim + cond_dim;
    fc1_ = Linear<S>::create(store_, "denoiser.fc1", in, cfg.hidden, rng, cfg.init_std);
    fc2_ = Linear<S>::create(store_, "denoiser.fc2", cfg.hidden, cfg.hidden, rng, cfg.init_std);
    fc3_ = Linear<S>::create(store_, "denoiser.fc3", cfg.hidden, signal_dim, rng, cfg.init_std);
    const auto sched = NoiseSchedule::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end);
    Tensor<S> skip({sched.steps()});
    for (std::size_t t = 1; t <= sched.steps(); ++t) skip[t - 1] = static_cast<S>(std::sqrt(1.0 - sched.alpha_bar(t)));
    skip_ = &store_.add("denoiser.skip", std::move(skip));
  }

  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }
  std::size_t signal_dim() const { return signal_dim_; }
  std::size_t cond_dim() const { return cond_dim_; }

  Var<S> operator()(Tape<S>& t, const Var<S>& zt, const std::vector<std::size_t>& ts, const Var<S>& cond) const {
    if (zt.value().cols() != signal_dim_ || cond.value().cols() != cond_dim_ || zt.value().rows() != ts.size() ||
        cond.value().rows() != ts.size())
      throw DimensionError("denoiser: got z " + shape_str(zt.value().shape()) + ", cond " +
                           shape_str(cond.value().shape()) + " for " + std::to_string(ts.size()) + " steps");
    auto h = concat_cols(concat_cols(zt, t.constant(time_embedding<S>(ts, time_dim_))), cond);
    h = silu(fc1_(t, h));
    h = silu(fc2_(t, h));
    std::vector<std::size_t> rows(ts.size() * signal_dim_);
    for (std::size_t r = 0; r < ts.size(); ++r) {
      if (ts[r] < 1 || ts[r] > skip_->value.size())
        throw ValidationError("denoiser: step " + std::to_string(ts[r]) + " outside schedule");
      std::fill_n(rows.begin() + r * signal_dim_, signal_dim_, ts[r] - 1);
    }
    auto gain = reshape(gather_rows(reshape(t.param(*skip_), {skip_->value.size(), 1}), rows), zt.value().shape());
    return add(fc3_(t, h), mul(gain, zt));
  }

  EpsPredictor<S> predictor() const {
    return [this](Tape<S>& t, const Var<S>& z, const std::vector<std::size_t>& ts, const Var<S>& c) {
      return (*this)(t, z, ts, c);
    };
  }

 private:
  std::size_t signal_dim_, cond_dim_, time_dim_;
  ParamStore<S> store_;
  Linear<S> fc1_, fc2_, fc3_;
  Parameter<S>* skip_ = nullptr;
};

/// Squared noise-prediction error summed over coordinates, averaged over rows,
/// at given steps and noise.
template <class S>
Var<S> epsilon_loss_at(Tape<S>& t, const EpsPredictor<S>& pred, const Tensor<S>& z0, const Tensor<S>& cond,
                       const std::vector<std::size_t>& ts, const Tensor<S>& eps, const NoiseSchedule& sched) {
  if (ts.size() != z0.rows()) throw DimensionError("epsilon_loss: one step per row required");
  Tensor<S> zt(z0.shape());
  for (std::size_t r = 0; r < z0.rows(); ++r) {
    const double ab = sched.alpha_bar(ts[r]);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    for (std::size_t j = 0; j < z0.cols(); ++j) zt.at(r, j) = static_cast<S>(a * z0.at(r, j) + b * eps.at(r, j));
  }
  auto diff = sub(t.constant(eps), pred(t, t.constant(zt), ts, t.constant(cond)));
  return scale(sum(square(diff)), S{1} / static_cast<S>(z0.rows()));
}

/// Same loss with t ~ U{1..T} and eps ~ N(0, I) drawn per row.
template <class S>
Var<S> epsilon_loss(Tape<S>& t, const EpsPredictor<S>& pred, const Tensor<S>& z0, const Tensor<S>& cond,
                    const NoiseSchedule& sched, Rng& rng) {
  std::uniform_int_distribution<std::size_t> step(1, sched.steps());
  std::vector<std::size_t> ts(z0.rows());
  for (auto& s : ts) s = step(rng);
  const Tensor<S> eps = randn<S>(z0.shape(), rng);
  return epsilon_loss_at(t, pred, z0, cond, ts, eps, sched);
}

/// Ancestral sampling from z_T ~ N(0, I) down to z_0, one row per cond row.
template <class S>
Tensor<S> ddpm_sample(const EpsPredictor<S>& pred, const Tensor<S>& cond, std::size_t signal_dim,
                      const NoiseSchedule& sched, Rng& rng) {
  const std::size_t B = cond.rows();
  Tensor<S> z = randn<S>({B, signal_dim}, rng);
  for (std::size_t step = sched.steps(); step >= 1; --step) {
    Tensor<S> eps;
    {
      Tape<S> t;
      eps = pred(t, t.constant(z), std::vector<std::size_t>(B, step), t.constant(cond)).value();
    }
    const double a = sched.alpha(step), ab = sched.alpha_bar(step), b = sched.beta(step);
    const double c = b / std::sqrt(1.0 - ab);
    const double sigma = step > 1 ? std::sqrt(sched.posterior_variance(step)) : 0.0;
    std::normal_distribution<double> n(0.0, 1.0);
    for (std::size_t i = 0; i < z.size(); ++i) {
      double v = (z[i] - c * eps[i]) / std::sqrt(a);
      if (step > 1) v += sigma * n(rng);
      if (!std::isfinite(v)) throw NumericError("ddpm_sample: non-finite value at step " + std::to_string(step));
      z[i] = static_cast<S>(v);
    }
  }
  return z;
}

inline NoiseSchedule schedule_for(const Config& cfg) {
  const auto& d = cfg.denoiser;
  return NoiseSchedule::linear(d.diffusion_steps, d.beta_start, d.beta_end);
}

inline AdamWConfig denoiser_optim(const Config& cfg) {
  const auto& d = cfg.denoiser;
  return AdamWConfig{d.lr, d.beta1, d.beta2, d.eps, d.weight_decay, d.warmup, d.steps, d.grad_clip};
}

/// Trains on rows of (z0, cond) pairs with the noise-prediction objective.
template <class S>
void train_denoiser(Denoiser<S>& den, const Tensor<S>& z0, const Tensor<S>& cond, const Config& cfg,
                    MetricsSink& sink, std::size_t max_steps = 0,
                    const std::function<void(std::size_t, double)>& on_step = {}) {
  if (z0.rows() == 0 || z0.rows() != cond.rows()) throw ValidationError("train-denoiser: need matching, non-empty pairs");
  const auto& dc = cfg.denoiser;
  const NoiseSchedule sched = schedule_for(cfg);
  AdamW<S> opt(denoiser_optim(cfg));
  Rng rng = derive_rng(cfg.seed, 0xD1FF05Eull);
  const std::size_t steps = max_steps ? std::min(max_steps, dc.steps) : dc.steps;
  const auto pred = den.predictor();
  std::vector<std::size_t> order(z0.rows());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  Tensor<S> zb({dc.batch, z0.cols()}), cb({dc.batch, cond.cols()});
  for (std::size_t step = 0; step < steps; ++step) {
    for (std::size_t r = 0; r < dc.batch; ++r) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const std::size_t i = order[cursor++];
      std::copy(z0.row(i).begin(), z0.row(i).end(), zb.row(r).begin());
      std::copy(cond.row(i).begin(), cond.row(i).end(), cb.row(r).begin());
    }
    den.params().zero_grad();
    double loss = 0, norm = 0;
    try {
      Tape<S> t;
      auto l = epsilon_loss(t, pred, zb, cb, sched, rng);
      loss = l.value().item();
      t.backward(l);
      norm = opt.step(den.params());
    } catch (const NumericError& e) {
      throw NumericError("train-denoiser: step " + std::to_string(step) + ": " + e.what());
    }
    sink.emit({{"stage", std::string("denoiser")},
               {"step", static_cast<double>(step)},
               {"loss", loss},
               {"lr", learning_rate(opt.config(), step)},
               {"grad_norm", norm}});
    if (on_step) on_step(step, loss);
  }
}

}  // namespace lvt
