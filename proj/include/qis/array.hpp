#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace qis {

// Dense row-major array of doubles. Rank 1 or 2 is all the pipeline needs.
struct Array {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Array() = default;

  explicit Array(std::vector<std::size_t> s) : shape(std::move(s)) {
    data.assign(count(shape), 0.0);
  }

  Array(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (count(shape) != data.size())
      throw std::invalid_argument("Array: shape/data size mismatch");
  }

  static std::size_t count(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  static Array zeros(std::size_t r, std::size_t c) { return Array({r, c}); }
  static Array zeros(std::size_t n) { return Array({n}); }

  static Array full(std::size_t r, std::size_t c, double v) {
    Array a({r, c});
    std::fill(a.data.begin(), a.data.end(), v);
    return a;
  }

  static Array identity(std::size_t n) {
    Array a({n, n});
    for (std::size_t i = 0; i < n; ++i) a.data[i * n + i] = 1.0;
    return a;
  }

  static Array row(std::vector<double> d) {
    std::size_t n = d.size();
    return Array({1, n}, std::move(d));
  }

  static Array scalar(double v) { return Array({1, 1}, {v}); }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool same_shape(const Array& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

inline void require_shape(const Array& a, const Array& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

// C[R x T] = A[R x S] * B[S x T], accumulating into C.
inline void matmul_acc(const double* a, const double* b, double* c, std::size_t r,
                       std::size_t s, std::size_t t) {
  for (std::size_t i = 0; i < r; ++i) {
    const double* ai = a + i * s;
    double* ci = c + i * t;
    for (std::size_t k = 0; k < s; ++k) {
      double av = ai[k];
      if (av == 0.0) continue;
      const double* bk = b + k * t;
      for (std::size_t j = 0; j < t; ++j) ci[j] += av * bk[j];
    }
  }
}

// C[R x T] = A[R x S] * B[T x S]^T, accumulating.
inline void matmul_nt_acc(const double* a, const double* b, double* c, std::size_t r,
                          std::size_t s, std::size_t t) {
  for (std::size_t i = 0; i < r; ++i) {
    const double* ai = a + i * s;
    double* ci = c + i * t;
    for (std::size_t j = 0; j < t; ++j) {
      const double* bj = b + j * s;
      double acc = 0.0;
      for (std::size_t k = 0; k < s; ++k) acc += ai[k] * bj[k];
      ci[j] += acc;
    }
  }
}

// C[S x T] = A[R x S]^T * B[R x T], accumulating.
inline void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t r,
                          std::size_t s, std::size_t t) {
  for (std::size_t i = 0; i < r; ++i) {
    const double* ai = a + i * s;
    const double* bi = b + i * t;
    for (std::size_t k = 0; k < s; ++k) {
      double av = ai[k];
      if (av == 0.0) continue;
      double* ck = c + k * t;
      for (std::size_t j = 0; j < t; ++j) ck[j] += av * bi[j];
    }
  }
}

}  // namespace qis
