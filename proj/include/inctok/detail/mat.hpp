#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <vector>

#include "inctok/error.hpp"

namespace inctok {

// Dense row-major matrix of doubles. Everything in the toolkit runs in
// double precision; shapes are small enough that a flat vector is fine.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(int r, int c, double fill = 0.0)
      : rows(r), cols(c), v(static_cast<size_t>(r) * static_cast<size_t>(c), fill) {
    require(r >= 0 && c >= 0, Errc::contract, "matrix dimensions must be non-negative");
  }

  static Mat from_row(std::vector<double> vals) {
    Mat m;
    m.rows = 1;
    m.cols = static_cast<int>(vals.size());
    m.v = std::move(vals);
    return m;
  }

  static Mat from_rows(int r, int c, std::initializer_list<double> vals) {
    Mat m(r, c);
    require(vals.size() == m.v.size(), Errc::contract, "initializer size mismatch");
    std::copy(vals.begin(), vals.end(), m.v.begin());
    return m;
  }

  double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }

  size_t size() const { return v.size(); }
  bool empty() const { return v.empty(); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

  void fill(double x) { std::fill(v.begin(), v.end(), x); }
};

inline bool all_finite(const Mat& m) {
  for (double x : m.v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  require(a.same_shape(b), Errc::contract, "shape mismatch in max_abs_diff");
  double d = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i) d = std::max(d, std::abs(a.v[i] - b.v[i]));
  return d;
}

inline bool bit_identical(const Mat& a, const Mat& b) {
  return a.same_shape(b) && a.v == b.v;
}

inline double frobenius_norm(const Mat& m) {
  double s = 0.0;
  for (double x : m.v) s += x * x;
  return std::sqrt(s);
}

// Plain (non-autodiff) helpers used by schedulers, metrics and tests.
inline Mat matmul_plain(const Mat& a, const Mat& b) {
  require(a.cols == b.rows, Errc::contract, "matmul shape mismatch");
  Mat c(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i)
    for (int k = 0; k < a.cols; ++k) {
      double aik = a.at(i, k);
      if (aik == 0.0) continue;
      for (int j = 0; j < b.cols; ++j) c.at(i, j) += aik * b.at(k, j);
    }
  return c;
}

inline Mat transpose_plain(const Mat& a) {
  Mat t(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

inline Mat add_plain(const Mat& a, const Mat& b) {
  require(a.same_shape(b), Errc::contract, "add shape mismatch");
  Mat c = a;
  for (size_t i = 0; i < c.v.size(); ++i) c.v[i] += b.v[i];
  return c;
}

inline Mat sub_plain(const Mat& a, const Mat& b) {
  require(a.same_shape(b), Errc::contract, "sub shape mismatch");
  Mat c = a;
  for (size_t i = 0; i < c.v.size(); ++i) c.v[i] -= b.v[i];
  return c;
}

inline Mat scale_plain(const Mat& a, double s) {
  Mat c = a;
  for (double& x : c.v) x *= s;
  return c;
}

}  // namespace inctok
