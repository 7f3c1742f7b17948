/* Copyright 2026 The kwsnas Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#ifndef KWSNAS_TENSOR_HPP_
#define KWSNAS_TENSOR_HPP_

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "kwsnas/error.hpp"
#include "kwsnas/rng.hpp"

namespace kwsnas {

/// Dense row-major N-d array, N <= 4. Feature maps use the layout
/// [batch, channels, height, width]. Instantiated with float for normal
/// training and with double for finite-difference gradient checks.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), T(0));
  }

  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::size_t>(numel_of(shape)) != data.size())
      throw ShapeError("tensor: shape does not match data length");
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int> s, T v) {
    Tensor t(std::move(s));
    for (T& x : t.data) x = v;
    return t;
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    if (s.size() > 4) throw ShapeError("tensor: rank > 4");
    std::size_t n = 1;
    for (int e : s) {
      if (e < 0) throw ShapeError("tensor: negative extent");
      n *= static_cast<std::size_t>(e);
    }
    return n;
  }

  std::size_t numel() const { return data.size(); }
  int ndim() const { return static_cast<int>(shape.size()); }
  bool empty() const { return data.empty(); }

  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  // 2-d and 4-d index helpers; hot loops index flat via data pointers.
  T& at2(int a, int b) { return data[static_cast<std::size_t>(a) * shape[1] + b]; }
  const T& at2(int a, int b) const { return data[static_cast<std::size_t>(a) * shape[1] + b]; }

  T& at4(int b, int c, int h, int w) {
    return data[((static_cast<std::size_t>(b) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  const T& at4(int b, int c, int h, int w) const {
    return data[((static_cast<std::size_t>(b) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  void zero() { std::fill(data.begin(), data.end(), T(0)); }

  void fill_normal(Rng& rng, double mean, double stddev) {
    for (T& x : data) x = static_cast<T>(rng.normal(mean, stddev));
  }

  void fill_uniform(Rng& rng, double lo, double hi) {
    for (T& x : data) x = static_cast<T>(rng.uniform(lo, hi));
  }

  bool all_finite() const {
    for (T x : data)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  /// NaN/Inf anywhere is a hard error; `where` names the producing layer.
  void check_finite(const std::string& where) const {
    if (!all_finite()) throw NumericError("non-finite value in " + where);
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

template <typename T>
std::string shape_str(const std::vector<int>& s) = delete;

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// out = a * b  for row-major a[m x k], b[k x n]. Plain blocked loop; the
/// inner j loop is contiguous so the compiler can vectorize it.
template <typename T>
void matmul(const T* a, const T* b, T* out, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* orow = out + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) orow[j] = T(0);
    const T* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

/// out += a^T * b  for a[k x m], b[k x n] (used for weight gradients).
template <typename T>
void matmul_at_b_acc(const T* a, const T* b, T* out, int k, int m, int n) {
  for (int p = 0; p < k; ++p) {
    const T* arow = a + static_cast<std::size_t>(p) * m;
    const T* brow = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* orow = out + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

/// out = a^T * b with a[k x m], b[k x n], overwriting out[m x n].
template <typename T>
void matmul_at_b(const T* a, const T* b, T* out, int k, int m, int n) {
  std::fill(out, out + static_cast<std::size_t>(m) * n, T(0));
  matmul_at_b_acc(a, b, out, k, m, n);
}

/// out += a * b^T with a[m x k], b[n x k]; row-dot-row, both contiguous.
template <typename T>
void matmul_a_bt_acc(const T* a, const T* b, T* out, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* orow = out + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      orow[j] += acc;
    }
  }
}

/// out = a * b^T with a[m x k], b[n x k], overwriting out[m x n].
template <typename T>
void matmul_a_bt(const T* a, const T* b, T* out, int m, int k, int n) {
  std::fill(out, out + static_cast<std::size_t>(m) * n, T(0));
  matmul_a_bt_acc(a, b, out, m, k, n);
}

}  // namespace kwsnas

#endif  // KWSNAS_TENSOR_HPP_
