#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ettk {

// Thrown when an operation produces or detects a non-finite value.
// Validation problems (bad shapes, bad configs) use std::invalid_argument.
class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Global switch for post-op finite-value scans. Off by default (bench mode);
// tests and the CLI turn it on.
inline std::atomic<bool>& finite_checks_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}
inline void set_finite_checks(bool on) { finite_checks_flag().store(on); }
inline bool finite_checks_enabled() { return finite_checks_flag().load(std::memory_order_relaxed); }

inline std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<std::int64_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major tensor. The one carrier for feature maps, kernels and
// parameters. T is float for inference/bench and double for gradient checks.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> shape)
      : shape_(std::move(shape)), data_(check_shape(shape_), T(0)) {}

  Tensor(std::vector<std::int64_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != check_shape(shape_)) {
      throw std::invalid_argument("tensor: data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor full(std::vector<std::int64_t> shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  T& operator()(std::int64_t i, std::int64_t j) { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  const T& operator()(std::int64_t i, std::int64_t j) const {
    return data_[static_cast<std::size_t>(i * shape_[1] + j)];
  }
  T& operator()(std::int64_t i, std::int64_t j, std::int64_t k) {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  const T& operator()(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  T& operator()(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) {
    return data_[static_cast<std::size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }
  const T& operator()(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) const {
    return data_[static_cast<std::size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }
  T& operator()(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l, std::int64_t m) {
    return data_[static_cast<std::size_t>((((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l) * shape_[4] + m)];
  }
  const T& operator()(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l, std::int64_t m) const {
    return data_[static_cast<std::size_t>((((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l) * shape_[4] + m)];
  }

  // Same buffer, new shape; numel must match.
  Tensor reshaped(std::vector<std::int64_t> new_shape) const {
    if (shape_numel(new_shape) != numel()) {
      throw std::invalid_argument("reshape: numel mismatch, " + shape_str(shape_) + " -> " + shape_str(new_shape));
    }
    return Tensor(std::move(new_shape), data_);
  }

 private:
  static std::int64_t check_shape(const std::vector<std::int64_t>& shape) {
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (shape[i] < 1) {
        throw std::invalid_argument("tensor: dimension " + std::to_string(i) + " of " + shape_str(shape) +
                                    " must be >= 1");
      }
    }
    return shape_numel(shape);
  }

  std::vector<std::int64_t> shape_;
  std::vector<T> data_;
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (auto v : t.vec()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!finite_checks_enabled()) return;
  if (!all_finite(t)) {
    throw numeric_error(std::string(op) + ": non-finite value in output of shape " + shape_str(t.shape()));
  }
}

template <typename T>
T max_abs(const Tensor<T>& t) {
  T m = 0;
  for (auto v : t.vec()) m = std::max(m, std::abs(v));
  return m;
}

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  std::vector<To> out(t.vec().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(t.vec()[i]);
  return Tensor<To>(t.shape(), std::move(out));
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("max_abs_diff: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  T m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// max over elements of |a-b| / max(|a|,|b|,floor)
template <typename T>
T max_rel_diff(const Tensor<T>& a, const Tensor<T>& b, T floor = T(1e-8)) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("max_rel_diff: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  T m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    T den = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    m = std::max(m, std::abs(a[i] - b[i]) / den);
  }
  return m;
}

template <typename T>
void fill_uniform(Tensor<T>& t, std::mt19937& rng, T lo, T hi) {
  std::uniform_real_distribution<T> dist(lo, hi);
  for (auto& v : t.vec()) v = dist(rng);
}

template <typename T>
void fill_normal(Tensor<T>& t, std::mt19937& rng, T mean, T stddev) {
  std::normal_distribution<T> dist(mean, stddev);
  for (auto& v : t.vec()) v = dist(rng);
}

template <typename T>
Tensor<T> random_uniform(std::vector<std::int64_t> shape, std::mt19937& rng, T lo = T(-1), T hi = T(1)) {
  Tensor<T> t(std::move(shape));
  fill_uniform(t, rng, lo, hi);
  return t;
}

template <typename T>
Tensor<T> random_normal(std::vector<std::int64_t> shape, std::mt19937& rng, T mean = T(0), T stddev = T(1)) {
  Tensor<T> t(std::move(shape));
  fill_normal(t, rng, mean, stddev);
  return t;
}

}  // namespace ettk
