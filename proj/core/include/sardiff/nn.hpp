#pragma once

#include <map>
#include <string>
#include <vector>

#include "sardiff/autodiff.hpp"
#include "sardiff/tensor.hpp"

namespace sardiff::nn {

using ag::Var;

/// Flat, name-addressed registry of trainable leaves. Layers register their
/// parameters here so checkpoints and optimizers see one namespace.
class ParamStore {
 public:
  Var add(const std::string& name, Tensor init);
  Var get(const std::string& name) const;
  bool has(const std::string& name) const { return params_.count(name) > 0; }
  const std::vector<std::pair<std::string, Var>>& entries() const { return ordered_; }

  std::int64_t parameter_count() const;
  void zero_grad();
  void set_requires_grad(bool flag);
  /// True when every parameter gradient is absent or exactly zero.
  bool all_grads_zero() const;

 private:
  std::map<std::string, Var> params_;
  std::vector<std::pair<std::string, Var>> ordered_;
};

struct Linear {
  Var w, b;
  Linear() = default;
  /// zero_init makes the layer an exact zero map (used for identity-at-init).
  Linear(ParamStore& ps, const std::string& prefix, int in, int out, Rng& rng,
         bool zero_init = false, bool bias = true);
  Var operator()(const Var& x) const { return ag::linear(x, w, b); }
};

struct Conv2d {
  Var w, b;
  int stride = 1, pad = 1;
  Conv2d() = default;
  Conv2d(ParamStore& ps, const std::string& prefix, int in, int out, int kernel, int stride,
         int pad, Rng& rng, bool zero_init = false);
  Var operator()(const Var& x) const { return ag::conv2d(x, w, b, stride, pad); }
};

struct GroupNorm {
  Var gamma, beta;
  int groups = 8;
  GroupNorm() = default;
  GroupNorm(ParamStore& ps, const std::string& prefix, int channels, int groups);
  Var operator()(const Var& x) const { return ag::group_norm(x, gamma, beta, groups); }
};

/// AdamW with decoupled weight decay.
class AdamW {
 public:
  AdamW(ParamStore& params, float weight_decay, float beta1 = 0.9f, float beta2 = 0.999f,
        float eps = 1e-8f);

  void step(float lr);
  long step_count() const { return step_count_; }

  // Checkpoint access: moment tensors keyed by parameter name.
  std::vector<std::pair<std::string, Tensor>> state_tensors() const;
  void load_state(const std::map<std::string, Tensor>& state, long step_count);

 private:
  ParamStore& params_;
  float weight_decay_, beta1_, beta2_, eps_;
  long step_count_ = 0;
  std::vector<Tensor> m_, v_;
};

/// Sinusoidal position features for integer timesteps, [N, dim].
Tensor timestep_features(const std::vector<int>& ts, int dim, int max_period = 10000);

}  // namespace sardiff::nn
