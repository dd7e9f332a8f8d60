#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "splos/svd.hpp"
#include "splos/tensor.hpp"

// Differentiable operations. Every function records a graph node when any
// input requires grad; backward closures accumulate into parent grads.
namespace splos {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

inline void require_matrix(const Tensor& a, const char* op) {
  require(a.rank() == 2, std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

template <class F>
Tensor unary(const Tensor& a, const char* op, F&& fwd, std::function<void(Node&)> bwd) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a[i]);
  return Tensor::make_result(a.shape(), std::move(out), op, {a}, std::move(bwd));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::make_result(a.shape(), std::move(out), "add", {a, b}, [](detail::Node& s) {
    for (auto& p : s.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < s.grad.size(); ++i) p->grad[i] += s.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::make_result(a.shape(), std::move(out), "sub", {a, b}, [](detail::Node& s) {
    auto& pa = s.parents[0];
    auto& pb = s.parents[1];
    for (std::size_t i = 0; i < s.grad.size(); ++i) {
      if (pa->requires_grad) pa->grad[i] += s.grad[i];
      if (pb->requires_grad) pb->grad[i] -= s.grad[i];
    }
  });
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::make_result(a.shape(), std::move(out), "mul", {a, b}, [](detail::Node& s) {
    auto& pa = s.parents[0];
    auto& pb = s.parents[1];
    for (std::size_t i = 0; i < s.grad.size(); ++i) {
      if (pa->requires_grad) pa->grad[i] += s.grad[i] * pb->data[i];
      if (pb->requires_grad) pb->grad[i] += s.grad[i] * pa->data[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double k) {
  return detail::unary(a, "scale", [k](double x) { return k * x; }, [k](detail::Node& s) {
    auto& p = s.parents[0];
    for (std::size_t i = 0; i < s.grad.size(); ++i) p->grad[i] += k * s.grad[i];
  });
}

inline Tensor add_scalar(const Tensor& a, double k) {
  return detail::unary(a, "add_scalar", [k](double x) { return x + k; }, [](detail::Node& s) {
    auto& p = s.parents[0];
    for (std::size_t i = 0; i < s.grad.size(); ++i) p->grad[i] += s.grad[i];
  });
}

/// 1 - a, used for complementary probabilities.
inline Tensor one_minus(const Tensor& a) { return add_scalar(scale(a, -1.0), 1.0); }

inline Tensor relu(const Tensor& a) {
  return detail::unary(a, "relu", [](double x) { return x > 0 ? x : 0.0; }, [](detail::Node& s) {
    auto& p = s.parents[0];
    for (std::size_t i = 0; i < s.grad.size(); ++i)
      if (p->data[i] > 0) p->grad[i] += s.grad[i];
  });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(a, "exp", [](double x) { return std::exp(x); }, [](detail::Node& s) {
    auto& p = s.parents[0];
    for (std::size_t i = 0; i < s.grad.size(); ++i) p->grad[i] += s.grad[i] * s.data[i];
  });
}

inline Tensor log(const Tensor& a) {
  for (double x : a.data()) {
    if (!(x > 0)) throw NumericError("log: non-positive argument " + std::to_string(x));
  }
  return detail::unary(a, "log", [](double x) { return std::log(x); }, [](detail::Node& s) {
    auto& p = s.parents[0];
    for (std::size_t i = 0; i < s.grad.size(); ++i) p->grad[i] += s.grad[i] / p->data[i];
  });
}

/// Clamp into [lo, hi]; gradient passes only where the input is strictly inside.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary(
      a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](detail::Node& s) {
        auto& p = s.parents[0];
        for (std::size_t i = 0; i < s.grad.size(); ++i) {
          double x = p->data[i];
          if (x > lo && x < hi) p->grad[i] += s.grad[i];
        }
      });
}

inline Tensor sum(const Tensor& a) {
  double total = 0;
  for (double x : a.data()) total += x;
  return Tensor::make_result({}, {total}, "sum", {a}, [](detail::Node& s) {
    auto& p = s.parents[0];
    for (double& g : p->grad) g += s.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  detail::require(a.size() > 0, "mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

/// [n x k] * [k x m] -> [n x m].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  detail::require(b.rows() == k, "matmul: inner dimension mismatch " + shape_str(a.shape()) +
                                     " x " + shape_str(b.shape()));
  std::vector<double> out(n * m, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < k; ++t) {
      double x = A[i * k + t];
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += x * B[t * m + j];
    }
  return Tensor::make_result({n, m}, std::move(out), "matmul", {a, b}, [n, k, m](detail::Node& s) {
    auto& pa = s.parents[0];
    auto& pb = s.parents[1];
    const auto& G = s.grad;
    if (pa->requires_grad) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < k; ++t) {
          double acc = 0;
          for (std::size_t j = 0; j < m; ++j) acc += G[i * m + j] * pb->data[t * m + j];
          pa->grad[i * k + t] += acc;
        }
    }
    if (pb->requires_grad) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < k; ++t) {
          double x = pa->data[i * k + t];
          for (std::size_t j = 0; j < m; ++j) pb->grad[t * m + j] += x * G[i * m + j];
        }
    }
  });
}

/// Adds a length-m vector to every row of an [n x m] matrix.
inline Tensor add_row_vector(const Tensor& a, const Tensor& bias) {
  detail::require_matrix(a, "add_row_vector");
  detail::require(bias.size() == a.cols(), "add_row_vector: bias length mismatch");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bias[j];
  return Tensor::make_result(a.shape(), std::move(out), "add_row_vector", {a, bias},
                             [n, m](detail::Node& s) {
                               auto& pa = s.parents[0];
                               auto& pb = s.parents[1];
                               for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t j = 0; j < m; ++j) {
                                   double g = s.grad[i * m + j];
                                   if (pa->requires_grad) pa->grad[i * m + j] += g;
                                   if (pb->requires_grad) pb->grad[j] += g;
                                 }
                             });
}

/// Columns [begin, end) of an [n x m] matrix.
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_matrix(a, "slice_cols");
  const std::size_t n = a.rows(), m = a.cols();
  detail::require(begin < end && end <= m, "slice_cols: bad column range");
  const std::size_t w = end - begin;
  std::vector<double> out(n * w);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a[i * m + begin + j];
  return Tensor::make_result({n, w}, std::move(out), "slice_cols", {a},
                             [n, m, w, begin](detail::Node& s) {
                               auto& p = s.parents[0];
                               for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t j = 0; j < w; ++j)
                                   p->grad[i * m + begin + j] += s.grad[i * w + j];
                             });
}

/// Column j of an [n x m] matrix as a length-n vector.
inline Tensor column(const Tensor& a, std::size_t j) {
  auto c = slice_cols(a, j, j + 1);
  return Tensor::make_result({c.size()}, std::vector<double>(c.data().begin(), c.data().end()),
                             "column", {c}, [](detail::Node& s) {
                               auto& p = s.parents[0];
                               for (std::size_t i = 0; i < s.grad.size(); ++i)
                                 p->grad[i] += s.grad[i];
                             });
}

/// Row sums of an [n x m] matrix -> length n.
inline Tensor row_sum(const Tensor& a) {
  detail::require_matrix(a, "row_sum");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i] += a[i * m + j];
  return Tensor::make_result({n}, std::move(out), "row_sum", {a}, [n, m](detail::Node& s) {
    auto& p = s.parents[0];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) p->grad[i * m + j] += s.grad[i];
  });
}

/// out[i] = a[i, index[i]].
inline Tensor pick(const Tensor& a, std::span<const int> index) {
  detail::require_matrix(a, "pick");
  const std::size_t n = a.rows(), m = a.cols();
  detail::require(index.size() == n, "pick: index length mismatch");
  std::vector<std::size_t> idx(n);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    detail::require(index[i] >= 0 && static_cast<std::size_t>(index[i]) < m,
                    "pick: index " + std::to_string(index[i]) + " out of range [0, " +
                        std::to_string(m) + ")");
    idx[i] = static_cast<std::size_t>(index[i]);
    out[i] = a[i * m + idx[i]];
  }
  return Tensor::make_result({n}, std::move(out), "pick", {a}, [m, idx](detail::Node& s) {
    auto& p = s.parents[0];
    for (std::size_t i = 0; i < idx.size(); ++i) p->grad[i * m + idx[i]] += s.grad[i];
  });
}

namespace detail {

// Shared Jacobian of softmax and leaky-softmax: g_in = p * (g_out - <g_out, p>).
inline void softmax_backward(Node& s, std::size_t n, std::size_t m) {
  auto& p = s.parents[0];
  for (std::size_t i = 0; i < n; ++i) {
    const double* pr = s.data.data() + i * m;
    const double* gr = s.grad.data() + i * m;
    double dot = 0;
    for (std::size_t j = 0; j < m; ++j) dot += gr[j] * pr[j];
    for (std::size_t j = 0; j < m; ++j) p->grad[i * m + j] += pr[j] * (gr[j] - dot);
  }
}

}  // namespace detail

/// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(const Tensor& a) {
  detail::require_matrix(a, "softmax_rows");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = a[i * m];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, a[i * m + j]);
    double z = 0;
    for (std::size_t j = 0; j < m; ++j) z += out[i * m + j] = std::exp(a[i * m + j] - mx);
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= z;
  }
  return Tensor::make_result(a.shape(), std::move(out), "softmax", {a},
                             [n, m](detail::Node& s) { detail::softmax_backward(s, n, m); });
}

/// Row-wise log-softmax (log-sum-exp form).
inline Tensor log_softmax_rows(const Tensor& a) {
  detail::require_matrix(a, "log_softmax_rows");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = a[i * m];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, a[i * m + j]);
    double z = 0;
    for (std::size_t j = 0; j < m; ++j) z += std::exp(a[i * m + j] - mx);
    double lse = mx + std::log(z);
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = a[i * m + j] - lse;
  }
  return Tensor::make_result(a.shape(), std::move(out), "log_softmax", {a},
                             [n, m](detail::Node& s) {
                               auto& p = s.parents[0];
                               for (std::size_t i = 0; i < n; ++i) {
                                 double gsum = 0;
                                 for (std::size_t j = 0; j < m; ++j) gsum += s.grad[i * m + j];
                                 for (std::size_t j = 0; j < m; ++j)
                                   p->grad[i * m + j] +=
                                       s.grad[i * m + j] - std::exp(s.data[i * m + j]) * gsum;
                               }
                             });
}

/// Row-wise leaky softmax: p_c = exp(l_c) / (m + sum_j exp(l_j)), m = row width.
/// The implicit m extra unit terms keep every row sum strictly below one.
inline Tensor leaky_softmax_rows(const Tensor& a) {
  detail::require_matrix(a, "leaky_softmax_rows");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = 0.0;  // the implicit zero logits take part in the max
    for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, a[i * m + j]);
    double z = static_cast<double>(m) * std::exp(-mx);
    for (std::size_t j = 0; j < m; ++j) z += out[i * m + j] = std::exp(a[i * m + j] - mx);
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= z;
  }
  return Tensor::make_result(a.shape(), std::move(out), "leaky_softmax", {a},
                             [n, m](detail::Node& s) { detail::softmax_backward(s, n, m); });
}

/// Identity forward; backward multiplies the upstream gradient by -coeff.
inline Tensor gradient_reversal(const Tensor& x, double coeff = 1.0) {
  detail::require(coeff > 0, "gradient_reversal: coefficient must be positive");
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::make_result(x.shape(), std::move(out), "gradient_reversal", {x},
                             [coeff](detail::Node& s) {
                               auto& p = s.parents[0];
                               for (std::size_t i = 0; i < s.grad.size(); ++i)
                                 p->grad[i] -= coeff * s.grad[i];
                             });
}

/// Identity forward; nothing flows back to x.
inline Tensor stop_gradient(const Tensor& x) {
  Tensor out = x.detach();
  out.node()->op = "stop_gradient";
  return out;
}

/// Sum of singular values of a matrix. Backward applies the subgradient U V^T
/// of the thin SVD, dropping directions whose singular value is negligible.
inline Tensor nuclear_norm(const Tensor& a, JacobiOptions opt = {}) {
  detail::require_matrix(a, "nuclear_norm");
  const std::size_t n = a.rows(), m = a.cols();
  detail::require(n >= 1 && m >= 1, "nuclear_norm: empty matrix");
  ThinSvd svd = jacobi_svd(a.data(), n, m, opt);
  double total = 0, smax = 0;
  for (double s : svd.singular_values) {
    total += s;
    smax = std::max(smax, s);
  }
  return Tensor::make_result(
      {}, {total}, "nuclear_norm", {a}, [svd = std::move(svd), smax, n, m](detail::Node& s) {
        auto& p = s.parents[0];
        const double g = s.grad[0];
        const double cutoff = 1e-12 * smax;
        for (std::size_t k = 0; k < m; ++k) {
          if (svd.singular_values[k] <= cutoff) continue;
          for (std::size_t i = 0; i < n; ++i) {
            double uik = svd.u[i * m + k];
            for (std::size_t j = 0; j < m; ++j) p->grad[i * m + j] += g * uik * svd.v[j * m + k];
          }
        }
      });
}

}  // namespace splos
