#include "sardiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace sardiff {

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape");
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  size_ = shape_numel(shape_);
  data_ = std::shared_ptr<float[]>(new float[size_]());
}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, float value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<float> values) {
  Tensor t(std::move(shape));
  if (static_cast<std::int64_t>(values.size()) != t.size())
    throw std::invalid_argument("value count does not match shape");
  std::memcpy(t.data(), values.data(), values.size() * sizeof(float));
  return t;
}

int Tensor::dim(int i) const {
  if (i < 0) i += ndim();
  return shape_.at(static_cast<size_t>(i));
}

float& Tensor::at(int n, int c, int h, int w) {
  const int C = shape_[1], H = shape_[2], W = shape_[3];
  return data_.get()[((static_cast<std::int64_t>(n) * C + c) * H + h) * W + w];
}

float Tensor::at(int n, int c, int h, int w) const {
  const int C = shape_[1], H = shape_[2], W = shape_[3];
  return data_.get()[((static_cast<std::int64_t>(n) * C + c) * H + h) * W + w];
}

Tensor Tensor::clone() const {
  Tensor t(shape_);
  std::memcpy(t.data(), data(), static_cast<size_t>(size_) * sizeof(float));
  return t;
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
  if (shape_numel(shape) != size_) throw std::invalid_argument("reshape changes element count");
  Tensor t;
  t.shape_ = std::move(shape);
  t.size_ = size_;
  t.data_ = data_;
  return t;
}

void Tensor::fill(float value) { std::fill_n(data(), size_, value); }

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
  os << ']';
  return os.str();
}

double Tensor::sum() const {
  double s = 0.0;
  const float* p = data();
  for (std::int64_t i = 0; i < size_; ++i) s += p[i];
  return s;
}

double Tensor::mean() const { return size_ ? sum() / static_cast<double>(size_) : 0.0; }

float Tensor::max() const {
  const float* p = data();
  float m = p[0];
  for (std::int64_t i = 1; i < size_; ++i) m = std::max(m, p[i]);
  return m;
}

float Tensor::min() const {
  const float* p = data();
  float m = p[0];
  for (std::int64_t i = 1; i < size_; ++i) m = std::min(m, p[i]);
  return m;
}

Rng::Rng(std::uint64_t seed) : engine_(seed) {}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() {
  // 53-bit mantissa from the top bits.
  return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) throw std::invalid_argument("uniform_int: hi < lo");
  const std::uint64_t span = static_cast<std::uint64_t>(hi) - static_cast<std::uint64_t>(lo) + 1;
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t r;
  do {
    r = engine_();
  } while (r >= limit);
  return lo + static_cast<int>(r % span);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1, u2;
  do {
    u1 = uniform();
  } while (u1 <= 1e-300);
  u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

double Rng::normal(double mean, double stddev) { return mean + stddev * normal(); }

double Rng::gamma(double shape, double scale) {
  if (shape < 0.05) throw std::invalid_argument("gamma: shape too small");
  if (shape < 1.0) {
    // Boost via Gamma(shape+1) and a power of a uniform.
    const double u = std::max(uniform(), 1e-300);
    return gamma(shape + 1.0, scale) * std::pow(u, 1.0 / shape);
  }
  // Marsaglia-Tsang squeeze method.
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v * scale;
    if (u > 1e-300 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v * scale;
  }
}

bool Rng::bernoulli(double p) { return uniform() < p; }

Tensor Rng::normal_tensor(std::vector<int> shape, float mean, float stddev) {
  Tensor t(std::move(shape));
  float* p = t.data();
  for (std::int64_t i = 0; i < t.size(); ++i)
    p[i] = static_cast<float>(mean + stddev * normal());
  return t;
}

Tensor Rng::uniform_tensor(std::vector<int> shape, float lo, float hi) {
  Tensor t(std::move(shape));
  float* p = t.data();
  for (std::int64_t i = 0; i < t.size(); ++i) p[i] = static_cast<float>(uniform(lo, hi));
  return t;
}

std::vector<int> Rng::permutation(int n) {
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = n - 1; i > 0; --i) std::swap(perm[i], perm[uniform_int(0, i)]);
  return perm;
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
  os.precision(17);
  os << spare_;
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  int spare_flag = 0;
  is >> engine_ >> spare_flag >> spare_;
  if (!is) throw std::runtime_error("bad rng state string");
  has_spare_ = spare_flag != 0;
}

std::uint64_t mix_seed(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
  return mix_seed(mix_seed(base ^ (stream * 0xd1342543de82ef95ULL)) ^ index);
}

}  // namespace sardiff
