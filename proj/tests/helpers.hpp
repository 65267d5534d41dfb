#pragma once

// Conversions between library tensors and the oracle buffers, plus input
// generators shared by the unit tests.

#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "stflow/blocks.hpp"
#include "stflow/nnops.hpp"

namespace testing {

using namespace stflow;

template <typename T>
Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
oracle::Grid to_grid(const Tensor<T>& t) {
  oracle::Grid g(t.dim(0), t.dim(1), t.dim(2), t.dim(3));
  for (std::size_t i = 0; i < t.size(); ++i) g.v[i] = static_cast<double>(t[i]);
  return g;
}

template <typename T>
oracle::Kernel to_kernel(const Tensor<T>& t) {
  oracle::Kernel k{t.dim(0), t.dim(1), t.dim(2), t.dim(3), {}};
  for (auto v : t.values()) k.v.push_back(static_cast<double>(v));
  return k;
}

template <typename T>
std::vector<double> to_vec(const Tensor<T>& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

inline oracle::Pads to_pads(const ConvGeometry& g) {
  return {g.stride_h, g.stride_w, g.pad_top, g.pad_bottom, g.pad_left, g.pad_right};
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < b.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

// Evenly spaced distinct values in random order: max-pool winners are
// separated by more than the finite-difference step.
inline Tensor<double> distinct_tensor(Rng& rng, Shape shape) {
  Tensor<double> t(std::move(shape));
  std::vector<std::size_t> order(t.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  for (std::size_t i = 0; i < order.size(); ++i) {
    t[i] = -1.0 + 2.0 * (static_cast<double>(order[i]) + 0.5) / static_cast<double>(order.size());
  }
  return t;
}

inline ConvGeometry random_geometry(Rng& rng) {
  ConvGeometry g;
  g.kernel_h = 1 + rng.below(4);
  g.kernel_w = 1 + rng.below(4);
  g.stride_h = 1 + rng.below(2);
  g.stride_w = 1 + rng.below(2);
  g.pad_top = rng.below(g.kernel_h);
  g.pad_bottom = rng.below(g.kernel_h);
  g.pad_left = rng.below(g.kernel_w);
  g.pad_right = rng.below(g.kernel_w);
  return g;
}

template <typename T>
void randomize(ParamStore<T>& store, Rng& rng, double scale = 0.5) {
  for (auto& p : store.trainable()) {
    for (auto& v : p.value.data()) v = static_cast<T>(rng.uniform(-scale, scale));
  }
}

template <typename T>
oracle::Conv to_oracle(const Conv<T>& c) {
  return {to_kernel(c.weight->value), to_vec(c.bias->value), to_pads(c.geometry)};
}

template <typename T>
std::array<oracle::Conv, 4> to_oracle(const MU<T>& m) {
  return {to_oracle(m.w1), to_oracle(m.w2), to_oracle(m.w3), to_oracle(m.w4)};
}

template <typename T>
oracle::Cmu to_oracle(const CMU<T>& c) {
  return {to_oracle(c.older), to_oracle(c.recent), to_oracle(c.wo), to_oracle(c.wh)};
}

template <typename T>
oracle::DenseLayer to_oracle(const Dense<T>& d) {
  return {to_vec(d.weight->value), to_vec(d.bias->value)};
}

}  // namespace testing
