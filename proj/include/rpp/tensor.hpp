// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rpp/errors.hpp"

namespace rpp {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major tensor of 64-bit floats. Rank 0..3 is what the encoder
// needs; nothing here assumes a maximum rank.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    values_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
  }

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    validate_shape();
    if (shape_numel(shape_) != static_cast<int64_t>(values_.size())) {
      throw RuntimeFailure("tensor: " + shape_str(shape_) + " does not hold " +
                           std::to_string(values_.size()) + " values");
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.values_) x = v;
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(values_.size()); }
  bool is_scalar() const { return numel() == 1; }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  double& operator[](int64_t i) { return values_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return values_[static_cast<size_t>(i)]; }

  double& at2(int64_t i, int64_t j) { return values_[static_cast<size_t>(i * shape_[1] + j)]; }
  double at2(int64_t i, int64_t j) const { return values_[static_cast<size_t>(i * shape_[1] + j)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  // Leading dimensions collapsed, i.e. numel / last_dim.
  int64_t leading_rows() const {
    return shape_.empty() ? 1 : numel() / shape_.back();
  }
  int64_t last_dim() const { return shape_.empty() ? 1 : shape_.back(); }

 private:
  void validate_shape() const {
    if (shape_.empty()) throw RuntimeFailure("tensor: empty shape");
    for (int64_t d : shape_) {
      if (d <= 0) throw RuntimeFailure("tensor: non-positive dimension in " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<double> values_;
};

namespace detail {

// C[m,n] += A[m,k] * B[k,n], ikj order so the inner loop streams rows.
inline void gemm_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double av = arow[p];
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T (rows of both operands are contiguous).
inline void gemm_nt_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n].
inline void gemm_tn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      double av = arow[i];
      double* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// Matrix product. Accepts [m,k]x[k,n], batched [B,m,k]x[B,k,n], and the
// mixed case [B,m,k]x[k,n] (the batched operand flattened over leading dims).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() == 2 && b.rank() == 2) {
    if (a.dim(1) != b.dim(0)) {
      throw RuntimeFailure("matmul: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Tensor c({a.dim(0), b.dim(1)});
    detail::gemm_acc(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
    return c;
  }
  if (a.rank() == 3 && b.rank() == 2) {
    if (a.dim(2) != b.dim(0)) {
      throw RuntimeFailure("matmul: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Tensor c({a.dim(0), a.dim(1), b.dim(1)});
    detail::gemm_acc(a.data(), b.data(), c.data(), a.dim(0) * a.dim(1), a.dim(2), b.dim(1));
    return c;
  }
  if (a.rank() == 3 && b.rank() == 3) {
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
      throw RuntimeFailure("matmul: batched shapes differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Tensor c({a.dim(0), a.dim(1), b.dim(2)});
    int64_t m = a.dim(1), k = a.dim(2), n = b.dim(2);
    for (int64_t bt = 0; bt < a.dim(0); ++bt) {
      detail::gemm_acc(a.data() + bt * m * k, b.data() + bt * k * n, c.data() + bt * m * n, m, k, n);
    }
    return c;
  }
  throw RuntimeFailure("matmul: unsupported ranks " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
}

// Swap the last two axes (materialized).
inline Tensor transpose_last2(const Tensor& t) {
  if (t.rank() == 2) {
    Tensor out({t.dim(1), t.dim(0)});
    for (int64_t i = 0; i < t.dim(0); ++i)
      for (int64_t j = 0; j < t.dim(1); ++j) out[j * t.dim(0) + i] = t[i * t.dim(1) + j];
    return out;
  }
  if (t.rank() == 3) {
    int64_t b = t.dim(0), m = t.dim(1), n = t.dim(2);
    Tensor out({b, n, m});
    for (int64_t bt = 0; bt < b; ++bt) {
      const double* src = t.data() + bt * m * n;
      double* dst = out.data() + bt * m * n;
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    }
    return out;
  }
  throw RuntimeFailure("transpose: rank must be 2 or 3, got " + shape_str(t.shape()));
}

// True when b's shape is a strict suffix of a's (bias-style broadcast).
inline bool is_suffix_shape(const Shape& a, const Shape& b) {
  if (b.size() >= a.size()) return false;
  size_t off = a.size() - b.size();
  for (size_t i = 0; i < b.size(); ++i) {
    if (a[off + i] != b[i]) return false;
  }
  return true;
}

inline Tensor softmax_last_axis(const Tensor& x) {
  Tensor y(x.shape());
  int64_t rows = x.leading_rows(), cols = x.last_dim();
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * cols;
    double* out = y.data() + r * cols;
    double mx = in[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      out[j] = std::exp(in[j] - mx);
      sum += out[j];
    }
    for (int64_t j = 0; j < cols; ++j) out[j] /= sum;
  }
  return y;
}

}  // namespace rpp
