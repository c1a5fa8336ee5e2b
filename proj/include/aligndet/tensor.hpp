#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace aligndet {

// Dense row-major N-d array. Immutable shape; values are plain scalars.
template <typename T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(numel_of(shape_), T(0)) {}

  TensorT(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel_of(shape_) != data_.size())
      throw std::invalid_argument("tensor: shape/data size mismatch");
  }

  static TensorT from_values(std::vector<std::size_t> shape,
                             std::initializer_list<T> values) {
    return TensorT(std::move(shape), std::vector<T>(values));
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  const T* data() const { return data_.data(); }
  T* data() { return data_.data(); }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t linear_index(const std::vector<std::size_t>& coord) const {
    if (coord.size() != shape_.size())
      throw std::invalid_argument("tensor: coordinate rank mismatch");
    std::size_t idx = 0;
    for (std::size_t i = 0; i < coord.size(); ++i) {
      if (coord[i] >= shape_[i])
        throw std::out_of_range("tensor: coordinate out of range");
      idx = idx * shape_[i] + coord[i];
    }
    return idx;
  }

  std::vector<std::size_t> coordinate(std::size_t linear) const {
    if (linear >= std::max<std::size_t>(numel(), 1))
      throw std::out_of_range("tensor: linear index out of range");
    std::vector<std::size_t> coord(shape_.size(), 0);
    for (std::size_t i = shape_.size(); i-- > 0;) {
      coord[i] = linear % shape_[i];
      linear /= shape_[i];
    }
    return coord;
  }

  T& at(const std::vector<std::size_t>& coord) { return data_[linear_index(coord)]; }
  const T& at(const std::vector<std::size_t>& coord) const {
    return data_[linear_index(coord)];
  }

  // 2-D / 3-D accessors for the common cases.
  T& at2(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& at2(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  T& at3(std::size_t c, std::size_t h, std::size_t w) {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }
  const T& at3(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }

  TensorT reshaped(std::vector<std::size_t> new_shape) const {
    if (numel_of(new_shape) != numel())
      throw std::invalid_argument("tensor: reshape changes element count");
    return TensorT(std::move(new_shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  static std::size_t numel_of(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

// Counter-based splitmix64 generator. Identical seeds give bit-identical
// streams on every platform, which the golden fixtures rely on.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D49BBB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return lo + std::int64_t(next_u64() % std::uint64_t(hi - lo + 1));
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return mean + stddev * mag * std::cos(2.0 * M_PI * u2);
  }

  template <typename T>
  void fill_uniform(TensorT<T>& t, double lo, double hi) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = T(uniform(lo, hi));
  }

  template <typename T>
  void fill_normal(TensorT<T>& t, double mean, double stddev) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = T(normal(mean, stddev));
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// C[m x n] = A[m x k] * B[k x n]. Blocked loops, fixed accumulation order.
template <typename T>
TensorT<T> gemm(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("gemm: operands must be 2-D");
  if (a.dim(1) != b.dim(0))
    throw std::invalid_argument("gemm: inner dimensions disagree");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  TensorT<T> c({m, n});
  constexpr std::size_t kBlock = 64;
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
  for (std::size_t i0 = 0; i0 < m; i0 += kBlock) {
    const std::size_t i1 = std::min(i0 + kBlock, m);
    for (std::size_t l0 = 0; l0 < k; l0 += kBlock) {
      const std::size_t l1 = std::min(l0 + kBlock, k);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t l = l0; l < l1; ++l) {
          const T av = pa[i * k + l];
          const T* brow = pb + l * n;
          T* crow = pc + i * n;
          for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
  return c;
}

enum class UnaryOp { kRelu, kSigmoid, kExp, kLog };
enum class BinaryOp { kAdd, kSub, kMul };

template <typename T>
TensorT<T> elementwise(UnaryOp op, const TensorT<T>& x) {
  TensorT<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T v = x[i];
    switch (op) {
      case UnaryOp::kRelu: out[i] = v > T(0) ? v : T(0); break;
      case UnaryOp::kSigmoid: out[i] = T(1) / (T(1) + std::exp(-v)); break;
      case UnaryOp::kExp: out[i] = std::exp(v); break;
      case UnaryOp::kLog:
        if (v <= T(0)) throw std::domain_error("elementwise: log of non-positive input");
        out[i] = std::log(v);
        break;
    }
  }
  return out;
}

template <typename T>
TensorT<T> elementwise(BinaryOp op, const TensorT<T>& x, const TensorT<T>& y) {
  if (x.shape() != y.shape())
    throw std::invalid_argument("elementwise: operand shapes differ");
  TensorT<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    switch (op) {
      case BinaryOp::kAdd: out[i] = x[i] + y[i]; break;
      case BinaryOp::kSub: out[i] = x[i] - y[i]; break;
      case BinaryOp::kMul: out[i] = x[i] * y[i]; break;
    }
  }
  return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& x, T s) {
  TensorT<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * s;
  return out;
}

enum class ReduceOp { kSum, kMean, kMax };

template <typename T>
T reduce_all(const TensorT<T>& x, ReduceOp op) {
  if (x.numel() == 0) {
    if (op == ReduceOp::kSum) return T(0);
    throw std::domain_error("reduce: empty selection");
  }
  switch (op) {
    case ReduceOp::kSum:
    case ReduceOp::kMean: {
      T acc = T(0);
      for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
      return op == ReduceOp::kMean ? acc / T(x.numel()) : acc;
    }
    case ReduceOp::kMax: {
      T best = x[0];
      for (std::size_t i = 1; i < x.numel(); ++i) best = std::max(best, x[i]);
      return best;
    }
  }
  throw std::invalid_argument("reduce: unknown mode");
}

// Reduces over one axis; that axis is removed from the output shape.
template <typename T>
TensorT<T> reduce_axis(const TensorT<T>& x, ReduceOp op, std::size_t axis) {
  if (axis >= x.rank()) throw std::invalid_argument("reduce: axis out of range");
  if (x.dim(axis) == 0 && op != ReduceOp::kSum)
    throw std::domain_error("reduce: empty selection");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t extent = x.dim(axis);

  std::vector<std::size_t> out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.dim(i));
  if (out_shape.empty()) out_shape.push_back(1);
  TensorT<T> out(out_shape);

  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      T acc = (op == ReduceOp::kMax) ? -std::numeric_limits<T>::infinity() : T(0);
      for (std::size_t e = 0; e < extent; ++e) {
        const T v = x[(o * extent + e) * inner + in];
        acc = (op == ReduceOp::kMax) ? std::max(acc, v) : acc + v;
      }
      if (op == ReduceOp::kMean) acc /= T(extent);
      out[o * inner + in] = acc;
    }
  }
  return out;
}

}  // namespace aligndet
