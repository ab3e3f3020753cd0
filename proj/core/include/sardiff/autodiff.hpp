#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "sardiff/tensor.hpp"

namespace sardiff::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad();
};

/// Leaf wrapping a tensor; requires_grad marks trainable parameters.
Var leaf(Tensor value, bool requires_grad = false);
Var constant(Tensor value);

/// Scoped switch that disables graph construction (inference / sampling).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Reverse-mode sweep from a scalar (or any) root; seeds d(root)/d(root) = 1.
void backward(const Var& root);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_scalar(const Var& a, float s);
Var mul_scalar(const Var& a, float s);
Var silu(const Var& x);
Var sigmoid(const Var& x);
Var clamp(const Var& x, float lo, float hi);

// ---- shape ----
Var reshape(const Var& x, std::vector<int> shape);
Var concat_channels(const Var& a, const Var& b);             // NCHW on C
Var slice_channels(const Var& x, int c0, int c1);            // [c0, c1)
Var upsample_nearest2x(const Var& x);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);                       // [M,K]x[K,N]
Var linear(const Var& x, const Var& w, const Var& b);         // [N,D]x[D,M]+[M]
Var bmm(const Var& a, const Var& b, bool trans_a, bool trans_b);

// ---- convolution / normalization ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps = 1e-5f);

// ---- conditioning ----
/// Per-sample per-channel affine: y[n,c,:,:] = gamma[n,c] * x[n,c,:,:] + beta[n,c].
Var film(const Var& x, const Var& gamma, const Var& beta);
/// y[n,c,:,:] = x[n,c,:,:] + v[n,c].
Var add_channel(const Var& x, const Var& v);
Var embedding(const Var& table, const std::vector<int>& ids);

// ---- reductions / losses ----
Var softmax_rows(const Var& x);           // over last dimension
Var mean_all(const Var& x);               // scalar [1]
Var sum_all(const Var& x);                // scalar [1]
Var avg_pool_all(const Var& x);           // NCHW -> [N,C]
Var mse(const Var& a, const Var& b);      // scalar [1]
/// Mean over rows of -log(max(p[row, id], floor)).
Var nll_probs(const Var& probs, const std::vector<int>& ids, float floor = 1e-12f);
/// 1 - mean over pixels of the channel-vector cosine similarity.
Var cosine_color_loss(const Var& a, const Var& b, float eps = 1e-8f);

}  // namespace sardiff::ag
