#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace sardiff {

/// Dense row-major float tensor with shared storage. Copies are shallow;
/// use clone() when an independent buffer is needed.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, float value);
  static Tensor ones(std::vector<int> shape) { return full(std::move(shape), 1.0f); }
  static Tensor from(std::vector<int> shape, std::vector<float> values);

  bool defined() const { return data_ != nullptr; }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const;
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::int64_t size() const { return size_; }

  float* data() { return data_.get(); }
  const float* data() const { return data_.get(); }
  float& operator[](std::int64_t i) { return data_.get()[i]; }
  float operator[](std::int64_t i) const { return data_.get()[i]; }

  // NCHW accessor; no bounds checking in release builds.
  float& at(int n, int c, int h, int w);
  float at(int n, int c, int h, int w) const;

  Tensor clone() const;
  Tensor reshaped(std::vector<int> shape) const;  // shares storage
  void fill(float value);

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_str() const;

  // Accumulated in double to keep reductions stable.
  double sum() const;
  double mean() const;
  float max() const;
  float min() const;

 private:
  std::vector<int> shape_;
  std::int64_t size_ = 0;
  std::shared_ptr<float[]> data_;
};

std::int64_t shape_numel(const std::vector<int>& shape);

/// Deterministic RNG: mt19937_64 core with explicit Box-Muller normals and
/// Marsaglia-Tsang gamma draws, so sequences do not depend on the standard
/// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  int uniform_int(int lo, int hi);       // inclusive bounds
  double normal();
  double normal(double mean, double stddev);
  /// Gamma(shape, scale) with shape >= 0.05.
  double gamma(double shape, double scale);
  bool bernoulli(double p);

  Tensor normal_tensor(std::vector<int> shape, float mean = 0.0f, float stddev = 1.0f);
  Tensor uniform_tensor(std::vector<int> shape, float lo, float hi);
  std::vector<int> permutation(int n);

  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// splitmix64 mix, used to derive independent per-record seeds.
std::uint64_t mix_seed(std::uint64_t seed);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index);

}  // namespace sardiff
