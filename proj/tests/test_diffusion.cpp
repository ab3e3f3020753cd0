#include <cmath>

#include "doctest.h"
#include "sardiff/autodiff.hpp"
#include "sardiff/diffusion.hpp"
#include "sardiff/nn.hpp"

using namespace sardiff;

TEST_CASE("linear schedule construction") {
  NoiseSchedule s = build_linear_schedule(1000, 1e-4, 0.02);
  CHECK(s.T == 1000);
  CHECK(s.beta(1) == doctest::Approx(1e-4));
  CHECK(s.beta(1000) == doctest::Approx(0.02));
  CHECK(s.alpha_bar(0) == 1.0);
  // strictly decreasing, in (0,1], recurrence exact
  for (int t = 1; t <= 1000; ++t) {
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    CHECK(s.alpha_bar(t) > 0.0);
    CHECK(s.alpha_bar(t) == s.alpha_bar(t - 1) * (1.0 - s.beta(t)));
    CHECK(s.alpha_bar(t) / s.alpha_bar(t - 1) == doctest::Approx(s.alpha(t)).epsilon(1e-12));
  }
}

TEST_CASE("single step schedule") {
  NoiseSchedule s = build_linear_schedule(1, 0.5, 0.5);
  CHECK(s.alpha_bar(1) == doctest::Approx(0.5));
}

TEST_CASE("cumulative product oracle at T=10") {
  NoiseSchedule s = build_linear_schedule(10, 1e-4, 0.02);
  double prod = 1.0;
  for (int t = 1; t <= 10; ++t) {
    const double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 9.0;
    prod *= 1.0 - beta;
  }
  CHECK(s.alpha_bar(10) == doctest::Approx(prod).epsilon(1e-14));
}

TEST_CASE("schedule validation") {
  CHECK_THROWS(build_linear_schedule(0, 1e-4, 0.02));
  CHECK_THROWS(build_linear_schedule(10, 0.0, 0.02));
  CHECK_THROWS(build_linear_schedule(10, 1e-4, 1.0));
  CHECK_THROWS(build_linear_schedule(10, 0.5, 0.1));
}

TEST_CASE("forward_sample zero noise and closed form") {
  NoiseSchedule s = build_linear_schedule(1, 0.75, 0.75);  // alpha_bar(1) = 0.25
  Tensor x0 = Tensor::full({1, 2, 2}, 1.0f);
  Tensor eps = Tensor::zeros({1, 2, 2});
  Tensor xt = forward_sample(x0, 1, eps, s);
  for (std::int64_t i = 0; i < xt.size(); ++i)
    CHECK(xt[i] == doctest::Approx(std::sqrt(0.25)).epsilon(1e-6));

  eps.fill(1.0f);
  xt = forward_sample(x0, 1, eps, s);
  for (std::int64_t i = 0; i < xt.size(); ++i)
    CHECK(xt[i] == doctest::Approx(0.5 + std::sqrt(0.75)).epsilon(1e-5));

  CHECK_THROWS(forward_sample(x0, 2, eps, s));
  CHECK_THROWS(forward_sample(x0, 1, Tensor::zeros({1, 1, 1}), s));
}

TEST_CASE("forward_sample monte carlo moments") {
  NoiseSchedule s = build_linear_schedule(20, 1e-3, 0.12);
  const int t = 13;
  const double ab = s.alpha_bar(t);
  Rng rng(123);
  Tensor x0 = Tensor::full({1, 1, 1}, 0.7f);
  const int n = 100000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    Tensor eps = rng.normal_tensor({1, 1, 1});
    const double v = forward_sample(x0, t, eps, s)[0];
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  const double want_mean = std::sqrt(ab) * 0.7;
  const double want_var = 1.0 - ab;
  const double se_mean = std::sqrt(want_var / n);
  const double se_var = want_var * std::sqrt(2.0 / n);
  CHECK(std::abs(mean - want_mean) < 3 * se_mean);
  CHECK(std::abs(var - want_var) < 3 * se_var);
}

TEST_CASE("forward_step degenerate beta keeps input") {
  NoiseSchedule s = build_linear_schedule(1, 1e-8, 1e-8);
  Tensor x = Tensor::full({1, 4, 4}, 0.5f);
  Rng rng(7);
  Tensor y = forward_step(x, 1, s, rng);
  for (std::int64_t i = 0; i < y.size(); ++i) CHECK(std::abs(y[i] - 0.5f) < 1e-3f);
}

TEST_CASE("forward_step determinism") {
  NoiseSchedule s = build_linear_schedule(5, 1e-3, 0.1);
  Tensor x = Tensor::full({1, 3, 3}, 0.2f);
  Rng a(99), b(99);
  Tensor ya = forward_step(x, 3, s, a);
  Tensor yb = forward_step(x, 3, s, b);
  for (std::int64_t i = 0; i < ya.size(); ++i) CHECK(ya[i] == yb[i]);
}

TEST_CASE("iterated forward_step matches marginal in two moments") {
  NoiseSchedule s = build_linear_schedule(6, 0.01, 0.2);
  const int t = 6;
  Rng rng(2024);
  Tensor x0 = Tensor::full({1, 1, 1}, -0.4f);
  const int n = 10000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    Tensor x = x0;
    for (int step = 1; step <= t; ++step) x = forward_step(x, step, s, rng);
    sum += x[0];
    sq += static_cast<double>(x[0]) * x[0];
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  const double ab = s.alpha_bar(t);
  const double want_mean = std::sqrt(ab) * -0.4;
  const double want_var = 1.0 - ab;
  CHECK(std::abs(mean - want_mean) < 3 * std::sqrt(want_var / n));
  CHECK(std::abs(var - want_var) < 3 * want_var * std::sqrt(2.0 / n));
}

TEST_CASE("predict_x0 inverts forward_sample") {
  NoiseSchedule s = build_linear_schedule(50, 1e-3, 0.08);
  Rng rng(5);
  Tensor x0 = rng.uniform_tensor({2, 3, 4}, -0.95f, 0.95f);
  for (int t : {1, 7, 25, 50}) {
    Tensor eps = rng.normal_tensor({2, 3, 4});
    Tensor xt = forward_sample(x0, t, eps, s);
    Tensor rec = predict_x0(xt, eps, t, s);
    for (std::int64_t i = 0; i < x0.size(); ++i)
      CHECK(rec[i] == doctest::Approx(x0[i]).epsilon(1e-4));
  }
}

TEST_CASE("predict_x0 closed-form value and clamping") {
  NoiseSchedule s = build_linear_schedule(1, 0.75, 0.75);  // alpha_bar = 0.25
  Tensor xt = Tensor::full({1, 1, 1}, 1.0f);
  Tensor eps = Tensor::full({1, 1, 1}, 1.0f);
  Tensor x0 = predict_x0(xt, eps, 1, s);
  CHECK(x0[0] == doctest::Approx((1.0 - std::sqrt(0.75)) / 0.5).epsilon(1e-5));

  // eps_hat = 0 -> x_t / sqrt(alpha_bar), then clamp
  Tensor zero = Tensor::zeros({1, 1, 1});
  Tensor small = Tensor::full({1, 1, 1}, 0.3f);
  CHECK(predict_x0(small, zero, 1, s)[0] == doctest::Approx(0.6).epsilon(1e-5));
  CHECK(predict_x0(xt, zero, 1, s)[0] == 1.0f);  // 2.0 clamped
}

TEST_CASE("guided_noise identities and linearity") {
  Rng rng(8);
  Tensor c = rng.normal_tensor({2, 3, 3});
  Tensor u = rng.normal_tensor({2, 3, 3});

  Tensor g0 = guided_noise(c, u, 0.0);
  for (std::int64_t i = 0; i < c.size(); ++i) CHECK(g0[i] == c[i]);

  Tensor gc = guided_noise(c, c, 2.7);
  for (std::int64_t i = 0; i < c.size(); ++i) CHECK(gc[i] == doctest::Approx(c[i]).epsilon(1e-6));

  Tensor a = Tensor::full({1, 1, 1}, 0.2f), b = Tensor::full({1, 1, 1}, 0.1f);
  CHECK(guided_noise(a, b, 1.0)[0] == doctest::Approx(0.3).epsilon(1e-6));

  // linear in both arguments
  Tensor c2 = rng.normal_tensor({2, 3, 3});
  Tensor lhs = guided_noise(c, u, 1.5);
  Tensor lhs2 = guided_noise(c2, u, 1.5);
  Tensor summed({2, 3, 3});
  for (std::int64_t i = 0; i < c.size(); ++i) summed[i] = c[i] + c2[i];
  Tensor both = guided_noise(summed, u, 1.5);
  Tensor zero_u = Tensor::zeros({2, 3, 3});
  Tensor expect({2, 3, 3});
  for (std::int64_t i = 0; i < c.size(); ++i)
    expect[i] = lhs[i] + lhs2[i] - guided_noise(zero_u, u, 1.5)[i];
  for (std::int64_t i = 0; i < c.size(); ++i)
    CHECK(both[i] == doctest::Approx(expect[i]).epsilon(1e-4));
}

TEST_CASE("reverse_step mean and final-step determinism") {
  NoiseSchedule s;
  s.T = 2;
  s.betas = {0.44444444444444442, 0.1};
  s.alphas = {1.0 - s.betas[0], 0.9};
  s.alpha_bars = {1.0, 1.0 - s.betas[0], (1.0 - s.betas[0]) * 0.9};
  REQUIRE(s.alpha_bar(2) == doctest::Approx(0.5).epsilon(1e-10));

  Tensor xt = Tensor::full({1, 1, 1}, 1.0f);
  Tensor eps = Tensor::full({1, 1, 1}, 1.0f);
  // t=2, beta=0.1, alpha_bar=0.5: mean = (1/sqrt(0.9)) (1 - 0.1/sqrt(0.5))
  Rng rng(3);
  Tensor y = reverse_step(xt, eps, 2, s, rng);
  const double mu = (1.0 / std::sqrt(0.9)) * (1.0 - 0.1 / std::sqrt(0.5));
  CHECK(mu == doctest::Approx(0.90498).epsilon(1e-4));
  // stochastic at t=2: two different rngs differ
  Rng rng2(4);
  Tensor y2 = reverse_step(xt, eps, 2, s, rng2);
  CHECK(y[0] != y2[0]);

  // t=1 deterministic regardless of rng
  Tensor d1 = reverse_step(xt, eps, 1, s, rng);
  Tensor d2 = reverse_step(xt, eps, 1, s, rng2);
  CHECK(d1[0] == d2[0]);

  // eps=0, beta -> 0: output ~ x_t
  NoiseSchedule tiny = build_linear_schedule(2, 1e-9, 1e-9);
  Tensor z = Tensor::zeros({1, 1, 1});
  Rng rng3(5);
  Tensor near = reverse_step(xt, z, 2, tiny, rng3);
  CHECK(std::abs(near[0] - 1.0f) < 1e-3f);
}

namespace {

// Minimal unconditional MLP denoiser over a 2-value signal.
class ToyDenoiser : public Denoiser {
 public:
  explicit ToyDenoiser(int T, unsigned seed) : T_(T) {
    Rng rng(seed);
    l1_ = nn::Linear(ps_, "l1", 3, 48, rng);
    l2_ = nn::Linear(ps_, "l2", 48, 48, rng);
    l3_ = nn::Linear(ps_, "l3", 48, 2, rng);
  }

  ag::Var forward(const Tensor& x_flat, int t) {
    const int n = x_flat.dim(0);
    Tensor in({n, 3});
    for (int i = 0; i < n; ++i) {
      in.data()[i * 3 + 0] = x_flat.data()[i * 2 + 0];
      in.data()[i * 3 + 1] = x_flat.data()[i * 2 + 1];
      in.data()[i * 3 + 2] = static_cast<float>(t) / T_;
    }
    ag::Var h = ag::silu(l1_(ag::constant(in)));
    h = ag::silu(l2_(h));
    return l3_(h);
  }

  Tensor predict(const Tensor& x_t, int t, const std::vector<ConditionSet>&) override {
    ag::NoGradGuard guard;
    const int n = x_t.dim(0);
    return forward(x_t.reshaped({n, 2}), t)->value.reshaped({n, 1, 1, 2});
  }

  std::vector<int> sample_shape() const override { return {1, 1, 2}; }

  nn::ParamStore& params() { return ps_; }

 private:
  int T_;
  nn::ParamStore ps_;
  nn::Linear l1_, l2_, l3_;
};

}  // namespace

TEST_CASE("sampling: one-step determinism and toy distribution recovery") {
  const int T = 40;
  NoiseSchedule s = build_linear_schedule(T, 1e-3, 0.18);
  ToyDenoiser toy(T, 77);

  // T=1 with a zero denoiser: output is a deterministic function of the draw.
  {
    ToyDenoiser zero_toy(1, 1);
    for (auto& [name, v] : zero_toy.params().entries()) v->value.fill(0.0f);
    NoiseSchedule s1 = build_linear_schedule(1, 0.3, 0.3);
    Rng ra(10), rb(10);
    Tensor xa = sample(zero_toy, ConditionSet::null_condition(), 1.0, s1, ra);
    Tensor xb = sample(zero_toy, ConditionSet::null_condition(), 1.0, s1, rb);
    for (std::int64_t i = 0; i < xa.size(); ++i) CHECK(xa[i] == xb[i]);
    // value equals clamp(x_T / sqrt(alpha_1)) for eps_hat = 0
    Rng rc(10);
    Tensor draw = rc.normal_tensor({1, 1, 1, 2});
    for (std::int64_t i = 0; i < xa.size(); ++i) {
      const float want = std::clamp(draw[i] / std::sqrt(0.7f), -1.0f, 1.0f);
      CHECK(xa[i] == doctest::Approx(want).epsilon(1e-5));
    }
  }

  // Train on a balanced two-mode distribution.
  nn::AdamW opt(toy.params(), 0.0f);
  Rng data_rng(55);
  const int batch = 64;
  for (int iter = 0; iter < 1500; ++iter) {
    Tensor x0({batch, 2}), eps({batch, 2});
    const int t = data_rng.uniform_int(1, T);
    for (int i = 0; i < batch; ++i) {
      const float m = data_rng.bernoulli(0.5) ? 0.8f : -0.8f;
      x0.data()[i * 2 + 0] = m;
      x0.data()[i * 2 + 1] = m;
      eps.data()[i * 2 + 0] = static_cast<float>(data_rng.normal());
      eps.data()[i * 2 + 1] = static_cast<float>(data_rng.normal());
    }
    Tensor xt = forward_sample(x0, t, eps, s);
    toy.params().zero_grad();
    ag::Var loss = ag::mse(toy.forward(xt, t), ag::constant(eps));
    ag::backward(loss);
    opt.step(2e-3f);
  }

  // Sampled histogram vs training histogram within total variation 0.15.
  Rng sample_rng(321);
  std::vector<ConditionSet> conds(1000, ConditionSet::null_condition());
  Tensor out = sample_batch(toy, conds, 0.0, s, sample_rng);
  int pos = 0;
  for (int i = 0; i < 1000; ++i) {
    const float mean_px = 0.5f * (out.data()[i * 2] + out.data()[i * 2 + 1]);
    if (mean_px > 0.0f) ++pos;
  }
  const double p_pos = pos / 1000.0;
  const double tv = std::abs(p_pos - 0.5);  // two-bin TV distance
  CHECK(tv <= 0.15);

  // fixed seed, fixed weights -> bit-identical batch
  Rng r1(9), r2(9);
  Tensor s1t = sample_batch(toy, {ConditionSet::null_condition()}, 0.5, s, r1);
  Tensor s2t = sample_batch(toy, {ConditionSet::null_condition()}, 0.5, s, r2);
  for (std::int64_t i = 0; i < s1t.size(); ++i) CHECK(s1t[i] == s2t[i]);
}

TEST_CASE("angle normalization") {
  CHECK(normalize_angle_deg(0.0) == 0.0);
  CHECK(normalize_angle_deg(360.0) == 0.0);
  CHECK(normalize_angle_deg(-90.0) == 270.0);
  CHECK(normalize_angle_deg(725.0) == doctest::Approx(5.0));
}
