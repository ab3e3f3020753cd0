#include <cmath>
#include <functional>

#include "doctest.h"
#include "sardiff/autodiff.hpp"
#include "sardiff/tensor.hpp"

using namespace sardiff;
using ag::Var;

namespace {

// Central finite differences against reverse-mode gradients, every element.
void check_grad(const Var& leaf, const std::function<Var()>& scalar_fn, double h = 5e-3,
                double tol_rel = 3e-3, double tol_abs = 3e-4) {
  Var loss = scalar_fn();
  REQUIRE(loss->value.size() == 1);
  leaf->grad = Tensor();
  ag::backward(loss);
  Tensor ad = leaf->grad.clone();
  float* p = leaf->value.data();
  for (std::int64_t i = 0; i < leaf->value.size(); ++i) {
    const float keep = p[i];
    p[i] = keep + static_cast<float>(h);
    const double up = scalar_fn()->value.data()[0];
    p[i] = keep - static_cast<float>(h);
    const double dn = scalar_fn()->value.data()[0];
    p[i] = keep;
    const double fd = (up - dn) / (2 * h);
    const double got = ad.data()[i];
    const double err = std::abs(fd - got);
    const double scale = std::max(std::abs(fd), std::abs(got));
    INFO("element ", i, " fd=", fd, " ad=", got);
    CHECK(err <= tol_abs + tol_rel * scale);
  }
}

Var fresh(Rng& rng, std::vector<int> shape, bool rg = true, float scale = 1.0f) {
  return ag::leaf(rng.normal_tensor(std::move(shape), 0.0f, scale), rg);
}

}  // namespace

TEST_CASE("elementwise op gradients") {
  Rng rng(1);
  Var a = fresh(rng, {2, 3});
  Var b = fresh(rng, {2, 3});
  check_grad(a, [&] { return ag::mean_all(ag::mul(ag::add(a, b), ag::sub(a, b))); });
  check_grad(b, [&] { return ag::mean_all(ag::mul(ag::add(a, b), ag::sub(a, b))); });
  check_grad(a, [&] { return ag::mean_all(ag::silu(ag::mul_scalar(a, 1.7f))); });
  check_grad(a, [&] { return ag::mean_all(ag::sigmoid(ag::add_scalar(a, 0.3f))); });
  check_grad(a, [&] { return ag::sum_all(ag::clamp(a, -0.5f, 0.5f)); }, 5e-3, 3e-3, 2e-2);
}

TEST_CASE("matmul and linear gradients") {
  Rng rng(2);
  Var x = fresh(rng, {3, 4});
  Var w = fresh(rng, {4, 5});
  Var b = fresh(rng, {5});
  check_grad(x, [&] { return ag::mean_all(ag::matmul(x, w)); });
  check_grad(w, [&] { return ag::mean_all(ag::matmul(x, w)); });
  check_grad(x, [&] { return ag::mean_all(ag::silu(ag::linear(x, w, b))); });
  check_grad(w, [&] { return ag::mean_all(ag::silu(ag::linear(x, w, b))); });
  check_grad(b, [&] { return ag::mean_all(ag::silu(ag::linear(x, w, b))); });
}

TEST_CASE("bmm gradients, all transpose combinations") {
  Rng rng(3);
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      Var a = fresh(rng, ta ? std::vector<int>{2, 4, 3} : std::vector<int>{2, 3, 4});
      Var b = fresh(rng, tb ? std::vector<int>{2, 5, 4} : std::vector<int>{2, 4, 5});
      auto fn = [&] { return ag::mean_all(ag::bmm(a, b, ta, tb)); };
      check_grad(a, fn);
      check_grad(b, fn);
    }
}

TEST_CASE("bmm forward matches manual") {
  Rng rng(4);
  Var a = fresh(rng, {1, 2, 3});
  Var b = fresh(rng, {1, 3, 2});
  Var c = ag::bmm(a, b, false, false);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      double want = 0.0;
      for (int k = 0; k < 3; ++k)
        want += a->value[i * 3 + k] * b->value[k * 2 + j];
      CHECK(c->value[i * 2 + j] == doctest::Approx(want).epsilon(1e-5));
    }
}

TEST_CASE("conv2d gradients") {
  Rng rng(5);
  Var x = fresh(rng, {2, 3, 5, 5});
  Var w = fresh(rng, {4, 3, 3, 3}, true, 0.5f);
  Var b = fresh(rng, {4}, true, 0.1f);
  auto fn = [&] { return ag::mean_all(ag::conv2d(x, w, b, 1, 1)); };
  check_grad(x, fn);
  check_grad(w, fn);
  check_grad(b, fn);

  auto fn2 = [&] { return ag::mean_all(ag::silu(ag::conv2d(x, w, b, 2, 1))); };
  check_grad(x, fn2);
  check_grad(w, fn2);
}

TEST_CASE("conv2d forward against direct convolution") {
  Rng rng(6);
  Var x = fresh(rng, {1, 2, 4, 4});
  Var w = fresh(rng, {3, 2, 3, 3});
  Var b = fresh(rng, {3});
  Var y = ag::conv2d(x, w, b, 1, 1);
  REQUIRE(y->value.shape() == std::vector<int>{1, 3, 4, 4});
  for (int o = 0; o < 3; ++o)
    for (int oy = 0; oy < 4; ++oy)
      for (int ox = 0; ox < 4; ++ox) {
        double want = b->value[o];
        for (int c = 0; c < 2; ++c)
          for (int ki = 0; ki < 3; ++ki)
            for (int kj = 0; kj < 3; ++kj) {
              const int iy = oy + ki - 1, ix = ox + kj - 1;
              if (iy < 0 || iy >= 4 || ix < 0 || ix >= 4) continue;
              want += x->value.at(0, c, iy, ix) * w->value[((o * 2 + c) * 3 + ki) * 3 + kj];
            }
        CHECK(y->value.at(0, o, oy, ox) == doctest::Approx(want).epsilon(1e-4));
      }
}

TEST_CASE("group_norm forward stats and gradients") {
  Rng rng(7);
  Var x = fresh(rng, {2, 4, 3, 3});
  Var gamma = ag::leaf(Tensor::ones({4}), true);
  Var beta = ag::leaf(Tensor::zeros({4}), true);

  Var y = ag::group_norm(x, gamma, beta, 2);
  // Each (n, group) slab must be standardized.
  for (int n = 0; n < 2; ++n)
    for (int g = 0; g < 2; ++g) {
      double sum = 0.0, sq = 0.0;
      for (int c = 2 * g; c < 2 * g + 2; ++c)
        for (int h = 0; h < 3; ++h)
          for (int w = 0; w < 3; ++w) {
            const double v = y->value.at(n, c, h, w);
            sum += v;
            sq += v * v;
          }
      CHECK(sum / 18 == doctest::Approx(0.0).epsilon(1e-4));
      CHECK(sq / 18 == doctest::Approx(1.0).epsilon(1e-3));
    }

  auto fn = [&] {
    return ag::mse(ag::group_norm(x, gamma, beta, 2),
                   ag::constant(Tensor::full({2, 4, 3, 3}, 0.3f)));
  };
  check_grad(x, fn, 5e-3, 5e-3, 5e-4);
  check_grad(gamma, fn);
  check_grad(beta, fn);
}

TEST_CASE("film and add_channel gradients") {
  Rng rng(8);
  Var x = fresh(rng, {2, 3, 4, 4});
  Var gm = fresh(rng, {2, 3});
  Var bt = fresh(rng, {2, 3});
  auto fn = [&] { return ag::mean_all(ag::silu(ag::film(x, gm, bt))); };
  check_grad(x, fn);
  check_grad(gm, fn);
  check_grad(bt, fn);

  Var v = fresh(rng, {2, 3});
  auto fn2 = [&] { return ag::mean_all(ag::silu(ag::add_channel(x, v))); };
  check_grad(x, fn2);
  check_grad(v, fn2);
}

TEST_CASE("film identity when gamma=1 beta=0") {
  Rng rng(9);
  Var x = fresh(rng, {1, 2, 3, 3});
  Var gm = ag::leaf(Tensor::ones({1, 2}), false);
  Var bt = ag::leaf(Tensor::zeros({1, 2}), false);
  Var y = ag::film(x, gm, bt);
  for (std::int64_t i = 0; i < x->value.size(); ++i) CHECK(y->value[i] == x->value[i]);
}

TEST_CASE("embedding gradients scatter into used rows") {
  Rng rng(10);
  Var table = fresh(rng, {5, 3});
  std::vector<int> ids = {1, 3, 1};
  auto fn = [&] { return ag::mean_all(ag::mul(ag::embedding(table, ids), ag::embedding(table, ids))); };
  check_grad(table, fn);
  Var loss = fn();
  ag::backward(loss);
  // untouched rows keep zero gradient
  for (int c = 0; c < 3; ++c) {
    CHECK(table->grad[0 * 3 + c] == 0.0f);
    CHECK(table->grad[2 * 3 + c] == 0.0f);
    CHECK(table->grad[4 * 3 + c] == 0.0f);
  }
}

TEST_CASE("softmax rows normalize and differentiate") {
  Rng rng(11);
  Var x = fresh(rng, {3, 5});
  Var y = ag::softmax_rows(x);
  for (int r = 0; r < 3; ++r) {
    double s = 0.0;
    for (int c = 0; c < 5; ++c) s += y->value[r * 5 + c];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
  Var t = fresh(rng, {3, 5}, false);
  auto fn = [&] { return ag::mse(ag::softmax_rows(x), t); };
  check_grad(x, fn);
}

TEST_CASE("shape op gradients") {
  Rng rng(12);
  Var a = fresh(rng, {2, 2, 3, 3});
  Var b = fresh(rng, {2, 3, 3, 3});
  auto fn = [&] {
    Var cat = ag::concat_channels(a, b);
    Var s = ag::slice_channels(cat, 1, 4);
    return ag::mean_all(ag::mul(s, s));
  };
  check_grad(a, fn);
  check_grad(b, fn);

  auto fn2 = [&] { return ag::mean_all(ag::mul(ag::upsample_nearest2x(a), ag::upsample_nearest2x(a))); };
  check_grad(a, fn2);

  auto fn3 = [&] {
    Var r = ag::reshape(a, {2, 18});
    return ag::mean_all(ag::mul(r, r));
  };
  check_grad(a, fn3);

  Var pooled = ag::avg_pool_all(a);
  CHECK(pooled->value.shape() == std::vector<int>{2, 2});
  auto fn4 = [&] { return ag::mean_all(ag::mul(ag::avg_pool_all(a), ag::avg_pool_all(a))); };
  check_grad(a, fn4);
}

TEST_CASE("loss op gradients") {
  Rng rng(13);
  Var a = fresh(rng, {2, 3, 4, 4}, true, 0.6f);
  Var b = fresh(rng, {2, 3, 4, 4}, false, 0.6f);
  check_grad(a, [&] { return ag::mse(a, b); });
  check_grad(a, [&] { return ag::cosine_color_loss(a, b); });

  Var logits = fresh(rng, {3, 4});
  std::vector<int> ids = {0, 2, 3};
  check_grad(logits, [&] { return ag::nll_probs(ag::softmax_rows(logits), ids); });
}

TEST_CASE("cosine color loss known values") {
  // orthogonal channel vectors -> loss 1
  Tensor a({1, 3, 2, 2}), b({1, 3, 2, 2});
  for (int k = 0; k < 4; ++k) {
    a.data()[0 * 4 + k] = 1.0f;  // (1,0,0) everywhere
    b.data()[1 * 4 + k] = 1.0f;  // (0,1,0) everywhere
  }
  CHECK(ag::cosine_color_loss(ag::constant(a), ag::constant(b))->value[0] ==
        doctest::Approx(1.0).epsilon(1e-6));

  // (1,1,0) vs (1,0,0) -> 1 - 1/sqrt(2)
  Tensor c({1, 3, 1, 1}), d({1, 3, 1, 1});
  c.data()[0] = 1.0f;
  c.data()[1] = 1.0f;
  d.data()[0] = 1.0f;
  CHECK(ag::cosine_color_loss(ag::constant(c), ag::constant(d))->value[0] ==
        doctest::Approx(1.0 - 1.0 / std::sqrt(2.0)).epsilon(1e-6));

  // identical nonzero -> 0
  CHECK(ag::cosine_color_loss(ag::constant(c), ag::constant(c))->value[0] ==
        doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("nll_probs uniform over 4 classes gives ln 4") {
  Tensor probs({2, 4});
  probs.fill(0.25f);
  Var loss = ag::nll_probs(ag::constant(probs), {1, 3});
  CHECK(loss->value[0] == doctest::Approx(std::log(4.0)).epsilon(1e-6));
}

TEST_CASE("no-grad mode builds no graph") {
  Rng rng(14);
  Var x = fresh(rng, {2, 2});
  {
    ag::NoGradGuard guard;
    Var y = ag::mul(x, x);
    CHECK_FALSE(y->requires_grad);
    CHECK(y->parents.empty());
  }
  Var y = ag::mul(x, x);
  CHECK(y->requires_grad);
}

TEST_CASE("gradient accumulates across shared subexpressions") {
  Var x = ag::leaf(Tensor::full({1}, 3.0f), true);
  Var y = ag::add(ag::mul(x, x), ag::mul_scalar(x, 2.0f));  // x^2 + 2x
  ag::backward(y);
  CHECK(x->grad[0] == doctest::Approx(8.0f));  // 2*3 + 2
}

TEST_CASE("frozen leaf receives no gradient") {
  Rng rng(15);
  Var w = fresh(rng, {2, 2}, true);
  Var x = fresh(rng, {2, 2}, true);
  w->requires_grad = false;
  Var loss = ag::mean_all(ag::mul(w, x));
  ag::backward(loss);
  CHECK_FALSE(w->grad.defined());
  CHECK(x->grad.defined());
}
