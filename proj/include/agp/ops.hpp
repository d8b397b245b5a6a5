/*
 * Copyright 2026 The AGP-MIL Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

/** @file ops.hpp Differentiable operations on Tensor.
 *
 * Every function here computes its result eagerly and, when an input takes
 * part in the gradient graph, registers a closure that maps the output
 * gradient to input gradients. Matrices are row-major rank-2 tensors.
 */

#pragma once

#include <agp/error.hpp>
#include <agp/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

namespace agp {

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_string(t.shape()));
  }
}

inline void require_square(const Tensor& t, const char* op) {
  require_rank(t, 2, op);
  if (t.dim(0) != t.dim(1)) {
    throw DimensionError(std::string(op) + ": expected a square matrix, got " +
                         shape_string(t.shape()));
  }
}

/// Dot product with four independent partial sums.
inline double dot(const double* x, const double* y, std::size_t k) {
  double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
  std::size_t p = 0;
  for (; p + 4 <= k; p += 4) {
    a0 += x[p] * y[p];
    a1 += x[p + 1] * y[p + 1];
    a2 += x[p + 2] * y[p + 2];
    a3 += x[p + 3] * y[p + 3];
  }
  for (; p < k; ++p) a0 += x[p] * y[p];
  return (a0 + a1) + (a2 + a3);
}

/// C[m x n] += op(A) * op(B) with op(A) of size m x k. Fixed loop order.
inline void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, bool trans_a,
                 const double* b, bool trans_b, double* c) {
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      double* ci = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[i * k + p];
        if (av == 0.0) continue;
        const double* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* ai = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        c[i * n + j] += dot(ai, b + j * k, k);
      }
    }
  } else if (trans_a && !trans_b) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* ap = a + p * m;
      const double* bp = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = ap[i];
        if (av == 0.0) continue;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] += acc;
      }
  }
}

/// Solves op(T) X = X in place for an n x n triangular T and n x m X.
/// `lower` describes T itself; `trans` selects op(T) = T^T.
inline void tri_solve_in_place(const double* t, std::size_t n, bool lower, bool trans, double* x,
                               std::size_t m) {
  auto elem = [&](std::size_t i, std::size_t k) { return trans ? t[k * n + i] : t[i * n + k]; };
  const bool forward = (lower != trans);
  for (std::size_t step = 0; step < n; ++step) {
    const std::size_t i = forward ? step : n - 1 - step;
    const double d = elem(i, i);
    if (d == 0.0) {
      throw SingularMatrixError("triangular solve: zero diagonal element at index " +
                                std::to_string(i));
    }
    double* xi = x + i * m;
    if (forward) {
      for (std::size_t k = 0; k < i; ++k) {
        const double e = elem(i, k);
        if (e == 0.0) continue;
        const double* xk = x + k * m;
        for (std::size_t j = 0; j < m; ++j) xi[j] -= e * xk[j];
      }
    } else {
      for (std::size_t k = i + 1; k < n; ++k) {
        const double e = elem(i, k);
        if (e == 0.0) continue;
        const double* xk = x + k * m;
        for (std::size_t j = 0; j < m; ++j) xi[j] -= e * xk[j];
      }
    }
    for (std::size_t j = 0; j < m; ++j) xi[j] /= d;
  }
}

/// Lower Cholesky factor of the lower triangle of `a`.
inline std::vector<double> cholesky_lower(const std::vector<double>& a, std::size_t n) {
  std::vector<double> l(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= l[j * n + k] * l[j * n + k];
    if (!(d > 0.0) || !std::isfinite(d)) throw NotPositiveDefiniteError(j, d);
    const double ljj = std::sqrt(d);
    l[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      const double* li = &l[i * n];
      const double* lj = &l[j * n];
      for (std::size_t k = 0; k < j; ++k) s -= li[k] * lj[k];
      l[i * n + j] = s / ljj;
    }
  }
  return l;
}

template <typename Forward, typename Derivative>
Tensor unary(const Tensor& x, Forward f, Derivative dfdx) {
  std::vector<double> y(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return make_result(x.shape(), std::move(y), {x}, [dfdx](Node& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < self.value.size(); ++i)
      (*gx)[i] += self.grad[i] * dfdx(xv[i], self.value[i]);
  });
}

enum class BinaryKind { kAdd, kSub, kMul };

inline Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  const bool a_scalar = a.rank() == 0;
  const bool b_scalar = b.rank() == 0;
  if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
    throw DimensionError(std::string(name) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  const Shape shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto ai = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
  auto bi = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (kind) {
      case BinaryKind::kAdd: y[i] = ai(i) + bi(i); break;
      case BinaryKind::kSub: y[i] = ai(i) - bi(i); break;
      case BinaryKind::kMul: y[i] = ai(i) * bi(i); break;
    }
  }
  return make_result(shape, std::move(y), {a, b}, [kind, a_scalar, b_scalar](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const std::size_t n = self.value.size();
    if (auto* ga = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        const double g = self.grad[i];
        const double d = kind == BinaryKind::kMul ? g * (b_scalar ? bv[0] : bv[i]) : g;
        (*ga)[a_scalar ? 0 : i] += d;
      }
    }
    if (auto* gb = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) {
        const double g = self.grad[i];
        double d = g;
        if (kind == BinaryKind::kSub) d = -g;
        if (kind == BinaryKind::kMul) d = g * (a_scalar ? av[0] : av[i]);
        (*gb)[b_scalar ? 0 : i] += d;
      }
    }
  });
}

inline double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

/// Binary ops accept equal shapes, or a rank-0 scalar on either side.
inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, detail::BinaryKind::kAdd, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, detail::BinaryKind::kSub, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, detail::BinaryKind::kMul, "mul");
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(x, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary(x, detail::stable_softplus,
                       [](double v, double) { return detail::stable_sigmoid(v); });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }
inline Tensor operator*(const Tensor& x, double c) { return scale(x, c); }
inline Tensor operator+(const Tensor& x, double c) { return add_scalar(x, c); }
inline Tensor operator-(const Tensor& x, double c) { return add_scalar(x, -c); }
inline Tensor operator-(const Tensor& x) { return neg(x); }

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return detail::make_result({}, {s}, {x}, [](detail::Node& self) {
    if (auto* gx = detail::parent_grad(self, 0))
      for (double& g : *gx) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + detail::shape_string(x.shape()) + " as " +
                         detail::shape_string(shape));
  }
  return detail::make_result(std::move(shape), x.values(), {x}, [](detail::Node& self) {
    if (auto* gx = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
  });
}

inline Tensor transpose(const Tensor& x) {
  detail::require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> y(r * c);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = xv[i * c + j];
  return detail::make_result({c, r}, std::move(y), {x}, [r, c](detail::Node& self) {
    if (auto* gx = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += self.grad[j * r + i];
  });
}

/// Rows of `x` (first axis) in the order given by `index`.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& index) {
  if (x.rank() == 0) throw DimensionError("gather_rows on a scalar");
  const std::size_t rows = x.dim(0);
  const std::size_t width = rows ? x.numel() / rows : 0;
  Shape shape = x.shape();
  shape[0] = index.size();
  std::vector<double> y(index.size() * width);
  const auto& xv = x.values();
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= rows) throw DimensionError("gather_rows: index out of range");
    std::copy_n(xv.begin() + index[r] * width, width, y.begin() + r * width);
  }
  return detail::make_result(std::move(shape), std::move(y), {x},
                             [index, width](detail::Node& self) {
                               auto* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t r = 0; r < index.size(); ++r)
                                 for (std::size_t k = 0; k < width; ++k)
                                   (*gx)[index[r] * width + k] += self.grad[r * width + k];
                             });
}

/// Column `col` of a matrix as a vector.
inline Tensor pick_column(const Tensor& x, std::size_t col) {
  detail::require_rank(x, 2, "pick_column");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (col >= c) throw DimensionError("pick_column: column out of range");
  std::vector<double> y(r);
  for (std::size_t i = 0; i < r; ++i) y[i] = x.values()[i * c + col];
  return detail::make_result({r}, std::move(y), {x}, [c, col](detail::Node& self) {
    if (auto* gx = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i * c + col] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree, " + detail::shape_string(a.shape()) +
                         " x " + detail::shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n, 0.0);
  detail::gemm(m, n, k, a.values().data(), false, b.values().data(), false, c.data());
  return detail::make_result({m, n}, std::move(c), {a, b}, [m, n, k](detail::Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* ga = detail::parent_grad(self, 0))  // dA = dC B^T
      detail::gemm(m, k, n, self.grad.data(), false, bv.data(), true, ga->data());
    if (auto* gb = detail::parent_grad(self, 1))  // dB = A^T dC
      detail::gemm(k, n, m, av.data(), true, self.grad.data(), false, gb->data());
  });
}

/// Dense layer: x[N x in] * W^T + b with W[out x in], b[out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  detail::require_rank(x, 2, "linear");
  detail::require_rank(w, 2, "linear");
  detail::require_rank(b, 1, "linear");
  if (x.dim(1) != w.dim(1) || b.dim(0) != w.dim(0)) {
    throw DimensionError("linear: input " + detail::shape_string(x.shape()) + ", weight " +
                         detail::shape_string(w.shape()) + ", bias " +
                         detail::shape_string(b.shape()));
  }
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  std::vector<double> y(n * out);
  for (std::size_t i = 0; i < n; ++i) std::copy(b.values().begin(), b.values().end(), y.begin() + i * out);
  detail::gemm(n, out, in, x.values().data(), false, w.values().data(), true, y.data());
  return detail::make_result({n, out}, std::move(y), {x, w, b}, [n, in, out](detail::Node& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    if (auto* gx = detail::parent_grad(self, 0))
      detail::gemm(n, in, out, self.grad.data(), false, wv.data(), false, gx->data());
    if (auto* gw = detail::parent_grad(self, 1))
      detail::gemm(out, in, n, self.grad.data(), true, xv.data(), false, gw->data());
    if (auto* gb = detail::parent_grad(self, 2))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < out; ++o) (*gb)[o] += self.grad[i * out + o];
  });
}

/// x[R x C] + v[C] broadcast over rows.
inline Tensor add_row_vector(const Tensor& x, const Tensor& v) {
  detail::require_rank(x, 2, "add_row_vector");
  detail::require_rank(v, 1, "add_row_vector");
  if (x.dim(1) != v.dim(0)) {
    throw DimensionError("add_row_vector: " + detail::shape_string(x.shape()) + " + " +
                         detail::shape_string(v.shape()));
  }
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> y = x.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] += v.values()[j];
  return detail::make_result(x.shape(), std::move(y), {x, v}, [r, c](detail::Node& self) {
    if (auto* gx = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < r * c; ++i) (*gx)[i] += self.grad[i];
    if (auto* gv = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gv)[j] += self.grad[i * c + j];
  });
}

inline Tensor diag(const Tensor& a) {
  detail::require_square(a, "diag");
  const std::size_t n = a.dim(0);
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a.values()[i * n + i];
  return detail::make_result({n}, std::move(d), {a}, [n](detail::Node& self) {
    if (auto* ga = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) (*ga)[i * n + i] += self.grad[i];
  });
}

/// a + c * I.
inline Tensor add_diag(const Tensor& a, double c) {
  detail::require_square(a, "add_diag");
  const std::size_t n = a.dim(0);
  std::vector<double> y = a.values();
  for (std::size_t i = 0; i < n; ++i) y[i * n + i] += c;
  return detail::make_result(a.shape(), std::move(y), {a}, [](detail::Node& self) {
    if (auto* ga = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
  });
}

/// Lower-triangular factor from an unconstrained square matrix: the strict
/// lower triangle is copied and the diagonal passes through softplus.
inline Tensor tril_softplus_diag(const Tensor& raw) {
  detail::require_square(raw, "tril_softplus_diag");
  const std::size_t n = raw.dim(0);
  std::vector<double> l(n * n, 0.0);
  const auto& rv = raw.values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) l[i * n + j] = rv[i * n + j];
    l[i * n + i] = detail::stable_softplus(rv[i * n + i]);
  }
  return detail::make_result(raw.shape(), std::move(l), {raw}, [n](detail::Node& self) {
    auto* gr = detail::parent_grad(self, 0);
    if (!gr) return;
    const auto& rv = self.parents[0]->value;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < i; ++j) (*gr)[i * n + j] += self.grad[i * n + j];
      (*gr)[i * n + i] += self.grad[i * n + i] * detail::stable_sigmoid(rv[i * n + i]);
    }
  });
}

/// Lower Cholesky factor L with L L^T = a. Only the lower triangle of `a`
/// is read, so gradients land on the lower triangle.
inline Tensor cholesky(const Tensor& a) {
  detail::require_square(a, "cholesky");
  const std::size_t n = a.dim(0);
  std::vector<double> l = detail::cholesky_lower(a.values(), n);
  return detail::make_result(a.shape(), std::move(l), {a}, [n](detail::Node& self) {
    auto* ga = detail::parent_grad(self, 0);
    if (!ga) return;
    const auto& l = self.value;
    // P = Phi(L^T Lbar), Phi keeps the lower triangle and halves the diagonal.
    std::vector<double> lbar(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) lbar[i * n + j] = self.grad[i * n + j];
    std::vector<double> p(n * n, 0.0);
    detail::gemm(n, n, n, l.data(), true, lbar.data(), false, p.data());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) p[i * n + j] = 0.0;
      p[i * n + i] *= 0.5;
    }
    // S = L^-T P L^-1 via two triangular solves.
    detail::tri_solve_in_place(l.data(), n, true, true, p.data(), n);
    std::vector<double> st(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) st[j * n + i] = p[i * n + j];
    detail::tri_solve_in_place(l.data(), n, true, true, st.data(), n);
    // st now holds S^T.
    for (std::size_t i = 0; i < n; ++i) {
      (*ga)[i * n + i] += st[i * n + i];
      for (std::size_t j = 0; j < i; ++j) (*ga)[i * n + j] += st[i * n + j] + st[j * n + i];
    }
  });
}

enum class Triangle { kLower, kUpper };

/// Solves t * x = b for triangular t. `b` may be a matrix [n x m] or a
/// vector [n]; only the named triangle of t is read.
inline Tensor tri_solve(const Tensor& t, const Tensor& b, Triangle tri) {
  detail::require_square(t, "tri_solve");
  const std::size_t n = t.dim(0);
  if (b.rank() < 1 || b.rank() > 2 || b.dim(0) != n) {
    throw DimensionError("tri_solve: triangle " + detail::shape_string(t.shape()) +
                         " incompatible with right-hand side " + detail::shape_string(b.shape()));
  }
  const std::size_t m = b.rank() == 2 ? b.dim(1) : 1;
  const bool lower = tri == Triangle::kLower;
  std::vector<double> x = b.values();
  detail::tri_solve_in_place(t.values().data(), n, lower, false, x.data(), m);
  return detail::make_result(b.shape(), std::move(x), {t, b}, [n, m, lower](detail::Node& self) {
    const auto& tv = self.parents[0]->value;
    // bbar = T^-T xbar; Tbar = -bbar x^T on the triangle.
    std::vector<double> bbar = self.grad;
    detail::tri_solve_in_place(tv.data(), n, lower, true, bbar.data(), m);
    if (auto* gb = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < bbar.size(); ++i) (*gb)[i] += bbar[i];
    if (auto* gt = detail::parent_grad(self, 0)) {
      const auto& x = self.value;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j0 = lower ? 0 : i;
        const std::size_t j1 = lower ? i + 1 : n;
        for (std::size_t j = j0; j < j1; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < m; ++c) acc += bbar[i * m + c] * x[j * m + c];
          (*gt)[i * n + j] -= acc;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax family

namespace detail {

inline void softmax_row(const double* x, double* y, std::size_t n) {
  const double mx = *std::max_element(x, x + n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - mx);
    z += y[i];
  }
  for (std::size_t i = 0; i < n; ++i) y[i] /= z;
}

inline Tensor softmax_rows_impl(const Tensor& x, std::size_t rows, std::size_t cols) {
  std::vector<double> y(x.numel());
  for (std::size_t r = 0; r < rows; ++r) softmax_row(&x.values()[r * cols], &y[r * cols], cols);
  return make_result(x.shape(), std::move(y), {x}, [rows, cols](Node& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = &self.value[r * cols];
      const double* g = &self.grad[r * cols];
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
      for (std::size_t c = 0; c < cols; ++c) (*gx)[r * cols + c] += y[c] * (g[c] - dot);
    }
  });
}

}  // namespace detail

inline Tensor softmax(const Tensor& logits) {
  detail::require_rank(logits, 1, "softmax");
  if (logits.numel() == 0) throw DimensionError("softmax of an empty vector");
  return detail::softmax_rows_impl(logits, 1, logits.numel());
}

/// Softmax applied independently to every row of a matrix.
inline Tensor softmax_rows(const Tensor& logits) {
  detail::require_rank(logits, 2, "softmax_rows");
  if (logits.dim(1) == 0) throw DimensionError("softmax_rows: rows are empty");
  return detail::softmax_rows_impl(logits, logits.dim(0), logits.dim(1));
}

inline Tensor log_softmax_rows(const Tensor& logits) {
  detail::require_rank(logits, 2, "log_softmax_rows");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (cols == 0) throw DimensionError("log_softmax_rows: rows are empty");
  std::vector<double> y(logits.numel());
  const auto& xv = logits.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = &xv[r * cols];
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(x[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = x[c] - lse;
  }
  return detail::make_result(logits.shape(), std::move(y), {logits},
                             [rows, cols](detail::Node& self) {
                               auto* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double gs = 0.0;
                                 for (std::size_t c = 0; c < cols; ++c) gs += self.grad[r * cols + c];
                                 for (std::size_t c = 0; c < cols; ++c) {
                                   const double p = std::exp(self.value[r * cols + c]);
                                   (*gx)[r * cols + c] += self.grad[r * cols + c] - p * gs;
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Convolution and pooling (NCHW)

/// 3x3 cross-correlation, stride 1, no padding: [N,C,H,W] * [F,C,3,3] -> [N,F,H-2,W-2].
inline Tensor conv2d(const Tensor& input, const Tensor& filters) {
  detail::require_rank(input, 4, "conv2d");
  detail::require_rank(filters, 4, "conv2d");
  if (filters.dim(2) != 3 || filters.dim(3) != 3) {
    throw DimensionError("conv2d: only 3x3 filters are supported, got " +
                         detail::shape_string(filters.shape()));
  }
  if (input.dim(1) != filters.dim(1)) {
    throw DimensionError("conv2d: input channels " + detail::shape_string(input.shape()) +
                         " do not match filters " + detail::shape_string(filters.shape()));
  }
  if (input.dim(2) < 3 || input.dim(3) < 3) {
    throw DimensionError("conv2d: spatial extent smaller than the kernel in " +
                         detail::shape_string(input.shape()));
  }
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t f = filters.dim(0), oh = h - 2, ow = w - 2;
  std::vector<double> out(n * f * oh * ow, 0.0);
  const auto& in = input.values();
  const auto& k = filters.values();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t fi = 0; fi < f; ++fi) {
      double* o = &out[((b * f) + fi) * oh * ow];
      for (std::size_t ci = 0; ci < c; ++ci) {
        const double* src = &in[((b * c) + ci) * h * w];
        const double* kk = &k[((fi * c) + ci) * 9];
        for (std::size_t ky = 0; ky < 3; ++ky)
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const double wv = kk[ky * 3 + kx];
            for (std::size_t y = 0; y < oh; ++y) {
              const double* row = src + (y + ky) * w + kx;
              double* orow = o + y * ow;
              for (std::size_t x = 0; x < ow; ++x) orow[x] += wv * row[x];
            }
          }
      }
    }
  return detail::make_result(
      {n, f, oh, ow}, std::move(out), {input, filters},
      [n, c, h, w, f, oh, ow](detail::Node& self) {
        const auto& in = self.parents[0]->value;
        const auto& k = self.parents[1]->value;
        auto* gin = detail::parent_grad(self, 0);
        auto* gk = detail::parent_grad(self, 1);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t fi = 0; fi < f; ++fi) {
            const double* g = &self.grad[((b * f) + fi) * oh * ow];
            for (std::size_t ci = 0; ci < c; ++ci) {
              const std::size_t src_off = ((b * c) + ci) * h * w;
              const std::size_t k_off = ((fi * c) + ci) * 9;
              for (std::size_t ky = 0; ky < 3; ++ky)
                for (std::size_t kx = 0; kx < 3; ++kx) {
                  if (gk) {
                    double acc = 0.0;
                    for (std::size_t y = 0; y < oh; ++y) {
                      const double* row = &in[src_off + (y + ky) * w + kx];
                      const double* grow = g + y * ow;
                      for (std::size_t x = 0; x < ow; ++x) acc += grow[x] * row[x];
                    }
                    (*gk)[k_off + ky * 3 + kx] += acc;
                  }
                  if (gin) {
                    const double wv = k[k_off + ky * 3 + kx];
                    for (std::size_t y = 0; y < oh; ++y) {
                      double* row = &(*gin)[src_off + (y + ky) * w + kx];
                      const double* grow = g + y * ow;
                      for (std::size_t x = 0; x < ow; ++x) row[x] += wv * grow[x];
                    }
                  }
                }
            }
          }
      });
}

/// x[N,F,H,W] + b[F] broadcast over batch and space.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  detail::require_rank(x, 4, "add_channel_bias");
  detail::require_rank(b, 1, "add_channel_bias");
  if (x.dim(1) != b.dim(0)) {
    throw DimensionError("add_channel_bias: " + detail::shape_string(x.shape()) + " + " +
                         detail::shape_string(b.shape()));
  }
  const std::size_t n = x.dim(0), f = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> y = x.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < f; ++c)
      for (std::size_t p = 0; p < hw; ++p) y[(i * f + c) * hw + p] += b.values()[c];
  return detail::make_result(x.shape(), std::move(y), {x, b}, [n, f, hw](detail::Node& self) {
    if (auto* gx = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
    if (auto* gb = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < f; ++c)
          for (std::size_t p = 0; p < hw; ++p) (*gb)[c] += self.grad[(i * f + c) * hw + p];
  });
}

/// 2x2 max pooling with stride 2. Odd extents keep the partial border
/// window, so the output is ceil(H/2) x ceil(W/2).
inline Tensor maxpool2x2(const Tensor& x) {
  detail::require_rank(x, 4, "maxpool2x2");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  std::vector<double> y(n * c * oh * ow);
  std::vector<std::size_t> arg(y.size());
  const auto& xv = x.values();
  for (std::size_t plane = 0; plane < n * c; ++plane)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = plane * h * w + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t yy = 2 * oy + dy, xx = 2 * ox + dx;
            if (yy >= h || xx >= w) continue;
            const std::size_t idx = plane * h * w + yy * w + xx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = plane * oh * ow + oy * ow + ox;
        y[o] = xv[best];
        arg[o] = best;
      }
  return detail::make_result({n, c, oh, ow}, std::move(y), {x},
                             [arg = std::move(arg)](detail::Node& self) {
                               if (auto* gx = detail::parent_grad(self, 0))
                                 for (std::size_t o = 0; o < arg.size(); ++o)
                                   (*gx)[arg[o]] += self.grad[o];
                             });
}

}  // namespace agp
