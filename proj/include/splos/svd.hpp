#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "splos/errors.hpp"

namespace splos {

/// Thin SVD of a rows x cols matrix, A = U diag(s) V^T with k = cols.
/// U is rows x k (column j zero when s[j] is zero), V is cols x k; both row-major.
struct ThinSvd {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> u;
  std::vector<double> singular_values;
  std::vector<double> v;
  int sweeps = 0;
};

struct JacobiOptions {
  double tolerance = 1e-12;
  int max_sweeps = 100;
};

/// One-sided (Hestenes) Jacobi SVD.
///
/// Rotates column pairs of a working copy of A until every pair is orthogonal
/// to within `tolerance` relative to the product of their norms. Singular values
/// are returned unsorted, in column order. Throws NumericError on non-finite
/// input or when `max_sweeps` is exhausted.
inline ThinSvd jacobi_svd(std::span<const double> a, std::size_t rows, std::size_t cols,
                          JacobiOptions opt = {}) {
  detail::require(a.size() == rows * cols, "jacobi_svd: data size does not match shape");
  for (double x : a) {
    if (!std::isfinite(x)) throw NumericError("jacobi_svd: non-finite matrix entry");
  }

  // Column-major working copies: w holds A V, v accumulates the rotations.
  std::vector<double> w(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) w[c * rows + r] = a[r * cols + c];
  std::vector<double> v(cols * cols, 0.0);
  for (std::size_t c = 0; c < cols; ++c) v[c * cols + c] = 1.0;

  auto col = [&](std::vector<double>& m, std::size_t n, std::size_t j) { return m.data() + j * n; };

  ThinSvd out;
  out.rows = rows;
  out.cols = cols;
  bool converged = cols < 2;
  int sweep = 0;
  while (!converged && sweep < opt.max_sweeps) {
    ++sweep;
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < cols; ++p) {
      for (std::size_t q = p + 1; q < cols; ++q) {
        double* wp = col(w, rows, p);
        double* wq = col(w, rows, q);
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t i = 0; i < rows; ++i) {
          alpha += wp[i] * wp[i];
          beta += wq[i] * wq[i];
          gamma += wp[i] * wq[i];
        }
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= opt.tolerance * std::sqrt(alpha * beta)) continue;
        rotated = true;
        double zeta = (beta - alpha) / (2.0 * gamma);
        double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        double cs = 1.0 / std::sqrt(1.0 + t * t);
        double sn = cs * t;
        for (std::size_t i = 0; i < rows; ++i) {
          double x = wp[i], y = wq[i];
          wp[i] = cs * x - sn * y;
          wq[i] = sn * x + cs * y;
        }
        double* vp = col(v, cols, p);
        double* vq = col(v, cols, q);
        for (std::size_t i = 0; i < cols; ++i) {
          double x = vp[i], y = vq[i];
          vp[i] = cs * x - sn * y;
          vq[i] = sn * x + cs * y;
        }
      }
    }
    converged = !rotated;
  }
  if (!converged) {
    throw NumericError("jacobi_svd: no convergence after " + std::to_string(opt.max_sweeps) +
                       " sweeps");
  }
  out.sweeps = sweep;

  out.singular_values.resize(cols);
  out.u.assign(rows * cols, 0.0);
  out.v.assign(cols * cols, 0.0);
  for (std::size_t j = 0; j < cols; ++j) {
    const double* wj = col(w, rows, j);
    double norm = 0;
    for (std::size_t i = 0; i < rows; ++i) norm += wj[i] * wj[i];
    norm = std::sqrt(norm);
    out.singular_values[j] = norm;
    if (norm > 0.0) {
      for (std::size_t i = 0; i < rows; ++i) out.u[i * cols + j] = wj[i] / norm;
    }
    for (std::size_t i = 0; i < cols; ++i) out.v[i * cols + j] = v[j * cols + i];
  }
  return out;
}

}  // namespace splos
