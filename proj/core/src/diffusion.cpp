#include "sardiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sardiff {

double normalize_angle_deg(double deg) {
  double a = std::fmod(deg, 360.0);
  if (a < 0.0) a += 360.0;
  if (a >= 360.0) a = 0.0;  // fmod can return 360.0 - ulp after the add
  return a;
}

NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
    throw std::invalid_argument("schedule: betas must satisfy 0 < start <= end < 1");
  NoiseSchedule s;
  s.T = T;
  s.betas.resize(T);
  s.alphas.resize(T);
  s.alpha_bars.resize(T + 1);
  s.alpha_bars[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
    const double beta = beta_start + (beta_end - beta_start) * frac;
    s.betas[t - 1] = beta;
    s.alphas[t - 1] = 1.0 - beta;
    s.alpha_bars[t] = s.alpha_bars[t - 1] * (1.0 - beta);
  }
  return s;
}

namespace {
void check_t(int t, const NoiseSchedule& s, const char* op) {
  if (t < 1 || t > s.T) throw std::invalid_argument(std::string(op) + ": t out of range");
}
}  // namespace

Tensor forward_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  check_t(t, s, "forward_sample");
  if (!x0.same_shape(eps)) throw std::invalid_argument("forward_sample: eps shape mismatch");
  const double ab = s.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out(x0.shape());
  const float* px = x0.data();
  const float* pe = eps.data();
  float* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i)
    po[i] = static_cast<float>(a * px[i] + b * pe[i]);
  return out;
}

Tensor forward_step(const Tensor& x_prev, int t, const NoiseSchedule& s, Rng& rng) {
  check_t(t, s, "forward_step");
  const double beta = s.beta(t);
  const double a = std::sqrt(1.0 - beta), sd = std::sqrt(beta);
  Tensor out(x_prev.shape());
  const float* px = x_prev.data();
  float* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i)
    po[i] = static_cast<float>(a * px[i] + sd * rng.normal());
  return out;
}

Tensor predict_x0(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& s) {
  check_t(t, s, "predict_x0");
  if (!x_t.same_shape(eps_hat)) throw std::invalid_argument("predict_x0: shape mismatch");
  const double ab = s.alpha_bar(t);
  const double inv_a = 1.0 / std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out(x_t.shape());
  const float* px = x_t.data();
  const float* pe = eps_hat.data();
  float* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) {
    const double v = (px[i] - b * pe[i]) * inv_a;
    po[i] = static_cast<float>(std::clamp(v, -1.0, 1.0));
  }
  return out;
}

Tensor guided_noise(const Tensor& eps_cond, const Tensor& eps_uncond, double w) {
  if (!eps_cond.same_shape(eps_uncond))
    throw std::invalid_argument("guided_noise: shape mismatch");
  Tensor out(eps_cond.shape());
  const float* pc = eps_cond.data();
  const float* pu = eps_uncond.data();
  float* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i)
    po[i] = static_cast<float>((1.0 + w) * pc[i] - w * pu[i]);
  return out;
}

Tensor reverse_step(const Tensor& x_t, const Tensor& eps_guided, int t, const NoiseSchedule& s,
                    Rng& rng) {
  check_t(t, s, "reverse_step");
  if (!x_t.same_shape(eps_guided)) throw std::invalid_argument("reverse_step: shape mismatch");
  const double beta = s.beta(t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(t));
  const double coef = beta / std::sqrt(1.0 - s.alpha_bar(t));
  const double sigma = std::sqrt(beta);
  Tensor out(x_t.shape());
  const float* px = x_t.data();
  const float* pe = eps_guided.data();
  float* po = out.data();
  if (t > 1) {
    for (std::int64_t i = 0; i < out.size(); ++i)
      po[i] = static_cast<float>(inv_sqrt_alpha * (px[i] - coef * pe[i]) + sigma * rng.normal());
  } else {
    for (std::int64_t i = 0; i < out.size(); ++i)
      po[i] = static_cast<float>(inv_sqrt_alpha * (px[i] - coef * pe[i]));
  }
  return out;
}

Tensor sample_batch(Denoiser& denoiser, const std::vector<ConditionSet>& conds, double w,
                    const NoiseSchedule& s, Rng& rng) {
  if (conds.empty()) throw std::invalid_argument("sample_batch: no conditions");
  const std::vector<int> chw = denoiser.sample_shape();
  const int N = static_cast<int>(conds.size());
  Tensor x = rng.normal_tensor({N, chw[0], chw[1], chw[2]});
  std::vector<ConditionSet> nulls(conds.size(), ConditionSet::null_condition());
  for (int t = s.T; t >= 1; --t) {
    const Tensor eps_cond = denoiser.predict(x, t, conds);
    const Tensor eps_uncond = denoiser.predict(x, t, nulls);
    const Tensor eps = guided_noise(eps_cond, eps_uncond, w);
    x = reverse_step(x, eps, t, s, rng);
  }
  float* p = x.data();
  for (std::int64_t i = 0; i < x.size(); ++i) p[i] = std::clamp(p[i], -1.0f, 1.0f);
  return x;
}

Tensor sample(Denoiser& denoiser, const ConditionSet& cond, double w, const NoiseSchedule& s,
              Rng& rng) {
  Tensor batch = sample_batch(denoiser, {cond}, w, s, rng);
  const auto& sh = batch.shape();
  return batch.reshaped({sh[1], sh[2], sh[3]}).clone();
}

}  // namespace sardiff
