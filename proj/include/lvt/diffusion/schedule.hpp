#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lvt/core/error.hpp"
#include "lvt/core/tensor.hpp"

namespace lvt {

/// Variance schedule indexed by t in [1, steps]. alpha_bar(t) is the product
/// of (1 - beta_s) for s <= t.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
    if (betas_.empty()) throw ValidationError("noise schedule: need at least one step");
    double acc = 1.0;
    for (std::size_t i = 0; i < betas_.size(); ++i) {
      const double b = betas_[i];
      if (!(b > 0.0 && b < 1.0))
        throw ValidationError("noise schedule: beta_" + std::to_string(i + 1) + " = " + std::to_string(b) +
                              " outside (0, 1)");
      acc *= 1.0 - b;
      alpha_bar_.push_back(acc);
    }
  }

  static NoiseSchedule linear(std::size_t steps, double beta_start, double beta_end) {
    if (steps == 0) throw ValidationError("noise schedule: need at least one step");
    std::vector<double> b(steps);
    for (std::size_t i = 0; i < steps; ++i)
      b[i] = steps == 1 ? beta_start
                        : beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(steps - 1);
    return NoiseSchedule(std::move(b));
  }

  std::size_t steps() const { return betas_.size(); }
  double beta(std::size_t t) const { return betas_[check(t) - 1]; }
  double alpha(std::size_t t) const { return 1.0 - beta(t); }
  double alpha_bar(std::size_t t) const { return t == 0 ? 1.0 : alpha_bar_[check(t) - 1]; }

  // Variance of q(z_{t-1} | z_t, z_0).
  double posterior_variance(std::size_t t) const {
    return (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t)) * beta(t);
  }

  std::size_t check(std::size_t t) const {
    if (t < 1 || t > betas_.size())
      throw ValidationError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(betas_.size()) +
                            "]");
    return t;
  }

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bar_;
};

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
template <class S>
Tensor<S> diffusion_forward(const Tensor<S>& z0, std::size_t t, const Tensor<S>& eps, const NoiseSchedule& sched) {
  require_same_shape(z0, eps, "diffusion_forward");
  const double ab = sched.alpha_bar(sched.check(t));
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor<S> z(z0.shape());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = static_cast<S>(a * z0[i] + b * eps[i]);
  return z;
}

/// Inverse of diffusion_forward when the noise is known.
template <class S>
Tensor<S> diffusion_invert(const Tensor<S>& zt, std::size_t t, const Tensor<S>& eps, const NoiseSchedule& sched) {
  require_same_shape(zt, eps, "diffusion_invert");
  const double ab = sched.alpha_bar(sched.check(t));
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor<S> z(zt.shape());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = static_cast<S>((zt[i] - b * eps[i]) / a);
  return z;
}

}  // namespace lvt
