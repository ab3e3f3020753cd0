#include "sardiff/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace sardiff::nn {

Var ParamStore::add(const std::string& name, Tensor init) {
  if (params_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
  Var v = ag::leaf(std::move(init), true);
  params_[name] = v;
  ordered_.emplace_back(name, v);
  return v;
}

Var ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

std::int64_t ParamStore::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, v] : ordered_) n += v->value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, v] : ordered_) v->grad = Tensor();
}

void ParamStore::set_requires_grad(bool flag) {
  for (auto& [name, v] : ordered_) v->requires_grad = flag;
}

bool ParamStore::all_grads_zero() const {
  for (const auto& [name, v] : ordered_) {
    if (!v->grad.defined()) continue;
    const float* g = v->grad.data();
    for (std::int64_t i = 0; i < v->grad.size(); ++i)
      if (g[i] != 0.0f) return false;
  }
  return true;
}

Linear::Linear(ParamStore& ps, const std::string& prefix, int in, int out, Rng& rng,
               bool zero_init, bool bias) {
  Tensor wt({in, out});
  if (!zero_init) {
    const float std = std::sqrt(2.0f / static_cast<float>(in));
    float* p = wt.data();
    for (std::int64_t i = 0; i < wt.size(); ++i)
      p[i] = static_cast<float>(rng.normal()) * std;
  }
  w = ps.add(prefix + ".weight", std::move(wt));
  if (bias) b = ps.add(prefix + ".bias", Tensor::zeros({out}));
}

Conv2d::Conv2d(ParamStore& ps, const std::string& prefix, int in, int out, int kernel,
               int stride_, int pad_, Rng& rng, bool zero_init)
    : stride(stride_), pad(pad_) {
  Tensor wt({out, in, kernel, kernel});
  if (!zero_init) {
    const float std = std::sqrt(2.0f / static_cast<float>(in * kernel * kernel));
    float* p = wt.data();
    for (std::int64_t i = 0; i < wt.size(); ++i)
      p[i] = static_cast<float>(rng.normal()) * std;
  }
  w = ps.add(prefix + ".weight", std::move(wt));
  b = ps.add(prefix + ".bias", Tensor::zeros({out}));
}

GroupNorm::GroupNorm(ParamStore& ps, const std::string& prefix, int channels, int groups_)
    : groups(groups_) {
  gamma = ps.add(prefix + ".gamma", Tensor::ones({channels}));
  beta = ps.add(prefix + ".beta", Tensor::zeros({channels}));
}

AdamW::AdamW(ParamStore& params, float weight_decay, float beta1, float beta2, float eps)
    : params_(params), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [name, v] : params_.entries()) {
    m_.push_back(Tensor::zeros(v->value.shape()));
    v_.push_back(Tensor::zeros(v->value.shape()));
  }
}

void AdamW::step(float lr) {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1_, step_count_);
  const double bc2 = 1.0 - std::pow(beta2_, step_count_);
  const auto& entries = params_.entries();
  for (size_t i = 0; i < entries.size(); ++i) {
    Var param = entries[i].second;
    if (!param->requires_grad || !param->grad.defined()) continue;
    float* p = param->value.data();
    const float* g = param->grad.data();
    float* m = m_[i].data();
    float* v = v_[i].data();
    for (std::int64_t k = 0; k < param->value.size(); ++k) {
      m[k] = beta1_ * m[k] + (1.0f - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0f - beta2_) * g[k] * g[k];
      const float mhat = static_cast<float>(m[k] / bc1);
      const float vhat = static_cast<float>(v[k] / bc2);
      // Decoupled decay: applied to the weights directly, not via the gradient.
      p[k] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * p[k]);
    }
  }
}

std::vector<std::pair<std::string, Tensor>> AdamW::state_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  const auto& entries = params_.entries();
  for (size_t i = 0; i < entries.size(); ++i) {
    out.emplace_back("adam.m." + entries[i].first, m_[i]);
    out.emplace_back("adam.v." + entries[i].first, v_[i]);
  }
  return out;
}

void AdamW::load_state(const std::map<std::string, Tensor>& state, long step_count) {
  step_count_ = step_count;
  const auto& entries = params_.entries();
  for (size_t i = 0; i < entries.size(); ++i) {
    auto im = state.find("adam.m." + entries[i].first);
    auto iv = state.find("adam.v." + entries[i].first);
    if (im == state.end() || iv == state.end())
      throw std::runtime_error("optimizer state missing for " + entries[i].first);
    if (!im->second.same_shape(m_[i]) || !iv->second.same_shape(v_[i]))
      throw std::runtime_error("optimizer state shape mismatch for " + entries[i].first);
    m_[i] = im->second.clone();
    v_[i] = iv->second.clone();
  }
}

Tensor timestep_features(const std::vector<int>& ts, int dim, int max_period) {
  const int half = dim / 2;
  Tensor out({static_cast<int>(ts.size()), dim});
  for (size_t n = 0; n < ts.size(); ++n) {
    float* row = out.data() + n * dim;
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(static_cast<double>(max_period)) * i / half);
      row[i] = static_cast<float>(std::cos(ts[n] * freq));
      row[half + i] = static_cast<float>(std::sin(ts[n] * freq));
    }
    if (dim % 2) row[dim - 1] = 0.0f;
  }
  return out;
}

}  // namespace sardiff::nn
