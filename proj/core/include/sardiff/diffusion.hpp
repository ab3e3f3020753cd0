#pragma once

#include <string>
#include <vector>

#include "sardiff/condition.hpp"
#include "sardiff/tensor.hpp"

namespace sardiff {

/// Variance schedule tables. Timesteps are 1-based: betas/alphas index t in
/// [1, T] via accessors, alpha_bar(0) == 1 so "no noise" is a valid state.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;       // size T, betas[t-1] = beta_t
  std::vector<double> alphas;      // size T, 1 - beta_t
  std::vector<double> alpha_bars;  // size T+1, alpha_bars[0] = 1

  double beta(int t) const { return betas.at(t - 1); }
  double alpha(int t) const { return alphas.at(t - 1); }
  double alpha_bar(int t) const { return alpha_bars.at(t); }
};

NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end);

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
Tensor forward_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s);

/// One Markov step: draw from N(sqrt(1-beta_t) x_prev, beta_t I).
Tensor forward_step(const Tensor& x_prev, int t, const NoiseSchedule& s, Rng& rng);

/// Invert the closed-form marginal and clamp the estimate into [-1, 1].
Tensor predict_x0(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& s);

/// (1 + w) eps_cond - w eps_uncond.
Tensor guided_noise(const Tensor& eps_cond, const Tensor& eps_uncond, double w);

/// Posterior step with fixed variance sigma_t^2 = beta_t; no noise at t = 1.
Tensor reverse_step(const Tensor& x_t, const Tensor& eps_guided, int t, const NoiseSchedule& s,
                    Rng& rng);

/// Conditional noise predictor over a batch that shares one timestep.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Tensor predict(const Tensor& x_t, int t, const std::vector<ConditionSet>& conds) = 0;
  virtual std::vector<int> sample_shape() const = 0;  // CHW of one sample
};

/// Full ancestral sampling loop with classifier-free guidance.
Tensor sample(Denoiser& denoiser, const ConditionSet& cond, double w, const NoiseSchedule& s,
              Rng& rng);
/// Batched variant; returns [N,C,H,W].
Tensor sample_batch(Denoiser& denoiser, const std::vector<ConditionSet>& conds, double w,
                    const NoiseSchedule& s, Rng& rng);

}  // namespace sardiff
