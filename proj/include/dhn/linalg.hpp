#pragma once

#include <cassert>
#include <cstring>
#include <vector>

#include "dhn/common.hpp"

namespace dhn {

/// Dense row-major matrix of doubles. All model math is 64-bit.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

  double& operator()(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }

  double* row(int i) { return a.data() + static_cast<size_t>(i) * cols; }
  const double* row(int i) const { return a.data() + static_cast<size_t>(i) * cols; }

  size_t size() const { return a.size(); }
  void set_zero() { std::memset(a.data(), 0, a.size() * sizeof(double)); }

  void resize(int r, int c) {
    rows = r;
    cols = c;
    a.assign(static_cast<size_t>(r) * c, 0.0);
  }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (double v : a)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// C (+)= A * B   with A [m x k], B [k x n]
inline void mm_nn(Mat& C, const Mat& A, const Mat& B, bool accumulate) {
  assert(A.cols == B.rows && C.rows == A.rows && C.cols == B.cols);
  if (!accumulate) C.set_zero();
  for (int i = 0; i < A.rows; ++i) {
    const double* ai = A.row(i);
    double* ci = C.row(i);
    for (int k = 0; k < A.cols; ++k) {
      const double aik = ai[k];
      const double* bk = B.row(k);
      for (int j = 0; j < B.cols; ++j) ci[j] += aik * bk[j];
    }
  }
}

// C (+)= A * B^T   with A [m x k], B [n x k]
inline void mm_nt(Mat& C, const Mat& A, const Mat& B, bool accumulate) {
  assert(A.cols == B.cols && C.rows == A.rows && C.cols == B.rows);
  for (int i = 0; i < A.rows; ++i) {
    const double* ai = A.row(i);
    double* ci = C.row(i);
    for (int j = 0; j < B.rows; ++j) {
      const double* bj = B.row(j);
      double s = 0.0;
      for (int k = 0; k < A.cols; ++k) s += ai[k] * bj[k];
      ci[j] = accumulate ? ci[j] + s : s;
    }
  }
}

// C (+)= A^T * B   with A [m x k], B [m x n], C [k x n]
inline void mm_tn(Mat& C, const Mat& A, const Mat& B, bool accumulate) {
  assert(A.rows == B.rows && C.rows == A.cols && C.cols == B.cols);
  if (!accumulate) C.set_zero();
  for (int i = 0; i < A.rows; ++i) {
    const double* ai = A.row(i);
    const double* bi = B.row(i);
    for (int p = 0; p < A.cols; ++p) {
      const double aip = ai[p];
      double* cp = C.row(p);
      for (int j = 0; j < B.cols; ++j) cp[j] += aip * bi[j];
    }
  }
}

/// Copy of the [rows x cols] window of x anchored at (row_start, col_start).
inline Mat slice(const Mat& x, int row_start, int rows, int col_start,
                 int cols) {
  assert(row_start >= 0 && row_start + rows <= x.rows);
  assert(col_start >= 0 && col_start + cols <= x.cols);
  Mat out(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int c = 0; c < cols; ++c) {
      out(i, c) = x(row_start + i, col_start + c);
    }
  }
  return out;
}

inline void axpy(Mat& y, double alpha, const Mat& x) {
  assert(y.same_shape(x));
  for (size_t i = 0; i < y.a.size(); ++i) y.a[i] += alpha * x.a[i];
}

inline double dot(const Mat& x, const Mat& y) {
  assert(x.same_shape(y));
  double s = 0.0;
  for (size_t i = 0; i < x.a.size(); ++i) s += x.a[i] * y.a[i];
  return s;
}

}  // namespace dhn
