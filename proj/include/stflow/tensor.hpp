#pragma once

// Dense row-major arrays and the deterministic random generator used across
// the engine.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace stflow {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes are incompatible for an operation.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const std::string& detail);
};

/// Dense n-dimensional array, row-major, last axis fastest.
///
/// The shape is fixed for the lifetime of the object; `reshaped` returns a new
/// tensor over a copy of the same elements. Activations use the axis order
/// (batch, [time,] height, width, channels).
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T{1}); }
  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* raw() noexcept { return data_.data(); }
  const T* raw() const noexcept { return data_.data(); }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Multi-index access with bounds checking.
  T& at(std::initializer_list<std::size_t> index);
  const T& at(std::initializer_list<std::size_t> index) const;

  Tensor reshaped(Shape shape) const;
  void fill(T value);

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<T> data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

/// Seeded pseudo-random stream.
///
/// Engine: std::mt19937_64, whose output sequence is fixed by the C++
/// standard. The uniform, normal and shuffle transforms below are written out
/// explicitly (the standard distributions are implementation-defined), so a
/// seed yields the same stream on every conforming platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  /// Stream derived from (seed, label) via crc32 of the label and a
  /// SplitMix64 finalizer; used to give each parameter its own stream.
  static Rng derived(std::uint64_t seed, std::string_view label);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n), rejection-sampled (unbiased).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (one draw per call, no caching).
  double normal();

  template <typename V>
  void shuffle(std::vector<V>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace stflow
