#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "apgcl/rng.hpp"

namespace apgcl {

// Dense row-major matrix. The only value container in the library.
template <class T>
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<T> v;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, T(0)) {}
  Mat(int r, int c, std::vector<T> data) : rows(r), cols(c), v(std::move(data)) {
    if (v.size() != static_cast<std::size_t>(r) * c)
      throw std::invalid_argument("Mat: data size does not match shape");
  }

  T& operator()(int i, int j) { return v[static_cast<std::size_t>(i) * cols + j]; }
  const T& operator()(int i, int j) const { return v[static_cast<std::size_t>(i) * cols + j]; }

  std::size_t size() const { return v.size(); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (const T& x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  static Mat identity(int n) {
    Mat m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  static Mat gaussian(int r, int c, T stddev, Rng& rng) {
    Mat m(r, c);
    for (auto& x : m.v) x = static_cast<T>(rng.gaussian()) * stddev;
    return m;
  }

  static Mat row(std::vector<T> data) {
    int c = static_cast<int>(data.size());
    return Mat(1, c, std::move(data));
  }
};

template <class T>
inline std::string shape_str(const Mat<T>& m) {
  std::ostringstream os;
  os << m.rows << "x" << m.cols;
  return os.str();
}

template <class T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
  if (a.cols != b.rows)
    throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a) +
                                " vs " + shape_str(b));
  Mat<T> c(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i) {
    for (int k = 0; k < a.cols; ++k) {
      T aik = a(i, k);
      if (aik == T(0)) continue;
      const T* brow = &b.v[static_cast<std::size_t>(k) * b.cols];
      T* crow = &c.v[static_cast<std::size_t>(i) * c.cols];
      for (int j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

template <class T>
Mat<T> transpose(const Mat<T>& a) {
  Mat<T> t(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

template <class T>
Mat<T> operator+(const Mat<T>& a, const Mat<T>& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("add: shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
  Mat<T> c = a;
  for (std::size_t i = 0; i < c.v.size(); ++i) c.v[i] += b.v[i];
  return c;
}

template <class T>
Mat<T> operator-(const Mat<T>& a, const Mat<T>& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("sub: shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
  Mat<T> c = a;
  for (std::size_t i = 0; i < c.v.size(); ++i) c.v[i] -= b.v[i];
  return c;
}

template <class T>
Mat<T> operator*(const Mat<T>& a, T s) {
  Mat<T> c = a;
  for (auto& x : c.v) x *= s;
  return c;
}

// y = X W (+ b broadcast over rows). The workhorse behind every projection.
template <class T>
Mat<T> linear(const Mat<T>& x, const Mat<T>& w, const Mat<T>* bias = nullptr) {
  Mat<T> y = matmul(x, w);
  if (bias) {
    if (bias->rows != 1 || bias->cols != y.cols)
      throw std::invalid_argument("linear: bias shape " + shape_str(*bias) +
                                  " incompatible with output " + shape_str(y));
    for (int i = 0; i < y.rows; ++i)
      for (int j = 0; j < y.cols; ++j) y(i, j) += (*bias)(0, j);
  }
  return y;
}

// Numerically stable softmax of a vector (max-subtraction).
template <class T>
std::vector<T> softmax(const std::vector<T>& v) {
  if (v.empty()) throw std::invalid_argument("softmax: empty input");
  T mx = v[0];
  for (T x : v) {
    if (!std::isfinite(static_cast<double>(x)))
      throw std::invalid_argument("softmax: non-finite input entry");
    if (x > mx) mx = x;
  }
  std::vector<T> out(v.size());
  T sum = T(0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (auto& x : out) x /= sum;
  return out;
}

}  // namespace apgcl
