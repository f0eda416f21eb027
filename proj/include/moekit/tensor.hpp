// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <vector>

#include "moekit/error.hpp"
#include "moekit/rng.hpp"

namespace moekit {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline Shape strides_of(const Shape& shape) {
  Shape st(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    st[i] = st[i + 1] * shape[i + 1];
  }
  return st;
}

// Row-major dense tensor. Data is always contiguous; grad is lazily
// allocated and, when present, matches data in shape and type.
template <typename T>
struct TensorT {
  Shape shape;
  std::vector<T> data;
  std::optional<std::vector<T>> grad;

  TensorT() = default;

  explicit TensorT(Shape s) : shape(std::move(s)) {
    validate_shape();
    data.assign(static_cast<std::size_t>(numel_of(shape)), T(0));
  }

  TensorT(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    validate_shape();
    require(static_cast<std::int64_t>(data.size()) == numel_of(shape), Err::ShapeMismatch,
            "tensor data length does not match shape product");
  }

  static TensorT zeros(Shape s) { return TensorT(std::move(s)); }

  static TensorT full(Shape s, T v) {
    TensorT t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }

  static TensorT randn(Shape s, Rng& rng, double stdev = 1.0, double mean = 0.0) {
    TensorT t(std::move(s));
    for (auto& x : t.data) x = static_cast<T>(mean + stdev * rng.normal());
    return t;
  }

  static TensorT of(Shape s, std::initializer_list<T> values) {
    return TensorT(std::move(s), std::vector<T>(values));
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  std::int64_t dim(int i) const {
    const int r = rank();
    if (i < 0) i += r;
    require(i >= 0 && i < r, Err::IndexOutOfRange, "tensor axis out of range");
    return shape[i];
  }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& at(std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  T at(std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }
  T& at(std::int64_t i, std::int64_t j) {
    assert(rank() == 2);
    return data[static_cast<std::size_t>(i * shape[1] + j)];
  }
  T at(std::int64_t i, std::int64_t j) const {
    assert(rank() == 2);
    return data[static_cast<std::size_t>(i * shape[1] + j)];
  }
  T& at(std::int64_t i, std::int64_t j, std::int64_t k) {
    assert(rank() == 3);
    return data[static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k)];
  }
  T at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    assert(rank() == 3);
    return data[static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k)];
  }
  T& at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) {
    assert(rank() == 4);
    return data[static_cast<std::size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
  }
  T at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) const {
    assert(rank() == 4);
    return data[static_cast<std::size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
  }

  bool same_shape(const TensorT& other) const { return shape == other.shape; }

  void ensure_grad() {
    if (!grad) grad.emplace(data.size(), T(0));
  }

  void zero_grad() {
    ensure_grad();
    std::fill(grad->begin(), grad->end(), T(0));
  }

  std::vector<T>& g() {
    ensure_grad();
    return *grad;
  }

  bool all_finite() const {
    for (T v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out(shape);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

 private:
  void validate_shape() const {
    for (auto d : shape) {
      require(d > 0, Err::ShapeMismatch, "tensor dimensions must be positive");
    }
  }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// Same data, new shape (element count must match).
template <typename T>
TensorT<T> reshaped(const TensorT<T>& t, Shape shape) {
  require(numel_of(shape) == t.numel(), Err::ShapeMismatch, "reshape changes element count");
  return TensorT<T>(std::move(shape), t.data);
}

}  // namespace moekit
