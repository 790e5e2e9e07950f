#pragma once

#include <cmath>
#include <vector>

#include "segdiff/tensor.hpp"

namespace segdiff {

/// Per-timestep variance tables. betas[t-1] holds beta_t for t = 1..T; the
/// derived tables are kept in double regardless of the sampling precision.
struct NoiseSchedule {
  int num_timesteps = 0;  // T
  std::vector<double> betas;
  std::vector<double> alphas;      // 1 - beta_t
  std::vector<double> alpha_bars;  // cumulative product of alphas

  static NoiseSchedule from_betas(std::vector<double> betas_in) {
    if (betas_in.empty()) throw ConfigError("noise schedule needs at least one step");
    NoiseSchedule s;
    s.num_timesteps = static_cast<int>(betas_in.size());
    s.betas = std::move(betas_in);
    s.alphas.resize(s.betas.size());
    s.alpha_bars.resize(s.betas.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < s.betas.size(); ++i) {
      if (!(s.betas[i] > 0.0 && s.betas[i] < 1.0))
        throw ConfigError("beta_" + std::to_string(i + 1) + " = " +
                          std::to_string(s.betas[i]) + " outside (0, 1)");
      s.alphas[i] = 1.0 - s.betas[i];
      prod *= s.alphas[i];
      s.alpha_bars[i] = prod;
    }
    return s;
  }

  double beta(int t) const { return betas[check(t) - 1]; }
  double alpha(int t) const { return alphas[check(t) - 1]; }

  /// alpha_bar(0) is defined as 1 (the data endpoint).
  double alpha_bar(int t) const {
    if (t == 0) return 1.0;
    return alpha_bars[check(t) - 1];
  }

  int check(int t) const {
    if (t < 1 || t > num_timesteps)
      throw std::invalid_argument("timestep " + std::to_string(t) + " outside [1, " +
                                  std::to_string(num_timesteps) + "]");
    return t;
  }
};

/// Betas linearly spaced from beta_start to beta_end inclusive.
inline NoiseSchedule linear_schedule(int num_timesteps, double beta_start,
                                     double beta_end) {
  if (num_timesteps < 1)
    throw ConfigError("linear_schedule: T must be >= 1, got " +
                      std::to_string(num_timesteps));
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ConfigError("linear_schedule: endpoints (" + std::to_string(beta_start) +
                      ", " + std::to_string(beta_end) + ") outside 0 < start <= end < 1");
  std::vector<double> betas(static_cast<std::size_t>(num_timesteps));
  if (num_timesteps == 1) {
    betas[0] = beta_start;
  } else {
    for (int t = 0; t < num_timesteps; ++t)
      betas[static_cast<std::size_t>(t)] =
          beta_start + (beta_end - beta_start) * double(t) / double(num_timesteps - 1);
  }
  return NoiseSchedule::from_betas(std::move(betas));
}

// Desk-scale defaults: T = 200 with endpoints scaled x5 so the terminal
// alpha_bar stays within a factor of two of the (T=1000, 1e-4, 0.02) table.
inline constexpr int kDefaultTimesteps = 200;
inline constexpr double kDefaultBetaStart = 5e-4;
inline constexpr double kDefaultBetaEnd = 0.1;

inline NoiseSchedule default_schedule() {
  return linear_schedule(kDefaultTimesteps, kDefaultBetaStart, kDefaultBetaEnd);
}

/// Closed-form forward process: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.
template <class T>
Tensor<T> forward_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps,
                         const NoiseSchedule& schedule) {
  if (x0.shape() != eps.shape())
    throw std::invalid_argument("forward_sample: shape mismatch " +
                                shape_str(x0.shape()) + " vs " + shape_str(eps.shape()));
  const double ab = schedule.alpha_bar(schedule.check(t));
  const T c0 = T(std::sqrt(ab));
  const T c1 = T(std::sqrt(1.0 - ab));
  Tensor<T> out = Tensor<T>::zeros(x0.shape());
  auto x = x0.data();
  auto e = eps.data();
  auto o = out.data();
  for (std::int64_t i = 0; i < x0.numel(); ++i) o[i] = c0 * x[i] + c1 * e[i];
  return out;
}

/// One reverse step of ancestral (DDPM) sampling with sigma_t^2 = beta_t.
/// z is ignored at t = 1 by convention.
template <class T>
Tensor<T> ddpm_step(const Tensor<T>& x_t, int t, const Tensor<T>& eps_hat,
                    const Tensor<T>& z, const NoiseSchedule& schedule) {
  schedule.check(t);
  if (x_t.shape() != eps_hat.shape())
    throw std::invalid_argument("ddpm_step: shape mismatch " + shape_str(x_t.shape()) +
                                " vs " + shape_str(eps_hat.shape()));
  const double beta = schedule.beta(t);
  const double ab = schedule.alpha_bar(t);
  const T inv_sqrt_alpha = T(1.0 / std::sqrt(schedule.alpha(t)));
  const T eps_coef = T(beta / std::sqrt(1.0 - ab));
  const T sigma = T(std::sqrt(beta));
  const bool add_noise = t > 1;
  if (add_noise && x_t.shape() != z.shape())
    throw std::invalid_argument("ddpm_step: noise shape mismatch " +
                                shape_str(x_t.shape()) + " vs " + shape_str(z.shape()));
  Tensor<T> out = Tensor<T>::zeros(x_t.shape());
  auto x = x_t.data();
  auto e = eps_hat.data();
  auto o = out.data();
  for (std::int64_t i = 0; i < x_t.numel(); ++i)
    o[i] = inv_sqrt_alpha * (x[i] - eps_coef * e[i]);
  if (add_noise) {
    auto zv = z.data();
    for (std::int64_t i = 0; i < x_t.numel(); ++i) o[i] += sigma * zv[i];
  }
  return out;
}

/// One deterministic (eta = 0) DDIM step from t to t_prev < t; t_prev = 0 is
/// the data endpoint with alpha_bar(0) = 1.
template <class T>
Tensor<T> ddim_step(const Tensor<T>& x_t, int t, int t_prev, const Tensor<T>& eps_hat,
                    const NoiseSchedule& schedule) {
  schedule.check(t);
  if (t_prev >= t || t_prev < 0)
    throw std::invalid_argument("ddim_step: t_prev " + std::to_string(t_prev) +
                                " must lie in [0, " + std::to_string(t) + ")");
  if (x_t.shape() != eps_hat.shape())
    throw std::invalid_argument("ddim_step: shape mismatch " + shape_str(x_t.shape()) +
                                " vs " + shape_str(eps_hat.shape()));
  const double ab_t = schedule.alpha_bar(t);
  const double ab_p = schedule.alpha_bar(t_prev);
  const T inv_sqrt_ab_t = T(1.0 / std::sqrt(ab_t));
  const T sqrt_1m_t = T(std::sqrt(1.0 - ab_t));
  const T sqrt_ab_p = T(std::sqrt(ab_p));
  const T sqrt_1m_p = T(std::sqrt(1.0 - ab_p));
  Tensor<T> out = Tensor<T>::zeros(x_t.shape());
  auto x = x_t.data();
  auto e = eps_hat.data();
  auto o = out.data();
  for (std::int64_t i = 0; i < x_t.numel(); ++i) {
    const T x0_hat = (x[i] - sqrt_1m_t * e[i]) * inv_sqrt_ab_t;
    o[i] = sqrt_ab_p * x0_hat + sqrt_1m_p * e[i];
  }
  return out;
}

}  // namespace segdiff
