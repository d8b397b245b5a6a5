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

/** @file gp.hpp Sparse variational Gaussian process layer.
 *
 * Prior p(U) = N(0, K_ZZ) on M inducing outputs, variational posterior
 * q(U) = N(mu_u, L_u L_u^T), and the induced marginal q(F) at N inputs:
 *
 *   mean = K_XZ K_ZZ^-1 mu_u
 *   cov  = K_XX - K_XZ K_ZZ^-1 (K_ZZ - Sigma_u) K_ZZ^-1 K_ZX
 *
 * Everything goes through the Cholesky factor of K_ZZ + jitter I and
 * triangular solves; no matrix is ever inverted explicitly.
 */

#pragma once

#include <agp/error.hpp>
#include <agp/ops.hpp>
#include <agp/rng.hpp>
#include <agp/tensor.hpp>

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace agp {

/// Squared-exponential kernel hyperparameters, stored in log space.
struct RbfKernelParams {
  Parameter log_lengthscale;
  Parameter log_variance;

  static RbfKernelParams make(const std::string& prefix, double lengthscale = 1.0,
                              double variance = 1.0) {
    return {Parameter(prefix + "log_lengthscale", {}, {std::log(lengthscale)}),
            Parameter(prefix + "log_variance", {}, {std::log(variance)})};
  }

  double lengthscale() const { return std::exp(log_lengthscale.data()[0]); }
  double variance() const { return std::exp(log_variance.data()[0]); }
};

struct SvgpParams {
  Parameter inducing;   // Z [M x D]
  Parameter mean;       // mu_u [M]
  Parameter chol_raw;   // unconstrained; L_u = tril_softplus_diag(chol_raw)
  RbfKernelParams kernel;
  double jitter = 1e-6;

  std::size_t num_inducing() const { return inducing.shape()[0]; }
  std::size_t input_dim() const { return inducing.shape()[1]; }

  /// Z ~ U[0.3, 0.7], mu_u = 0, Sigma_u = 0.05 I, unit lengthscale and variance.
  static SvgpParams initialize(std::size_t num_inducing, std::size_t input_dim, Rng& rng,
                               double jitter = 1e-6, const std::string& prefix = "gp.") {
    std::vector<double> z(num_inducing * input_dim);
    for (double& v : z) v = rng.uniform(0.3, 0.7);
    std::vector<double> raw(num_inducing * num_inducing, 0.0);
    const double diag = inverse_softplus(std::sqrt(0.05));
    for (std::size_t i = 0; i < num_inducing; ++i) raw[i * num_inducing + i] = diag;
    return {Parameter(prefix + "inducing", {num_inducing, input_dim}, std::move(z)),
            Parameter(prefix + "mean", {num_inducing}, std::vector<double>(num_inducing, 0.0)),
            Parameter(prefix + "chol_raw", {num_inducing, num_inducing}, std::move(raw)),
            RbfKernelParams::make(prefix), jitter};
  }

  static double inverse_softplus(double y) { return std::log(std::expm1(y)); }

  /// L_u, lower triangular with a positive diagonal.
  Tensor chol_factor() const { return tril_softplus_diag(chol_raw.value()); }

  std::vector<Parameter> parameters() const {
    return {inducing, mean, chol_raw, kernel.log_lengthscale, kernel.log_variance};
  }
};

/// Marginal q(F) over a batch of inputs.
struct GaussianBatch {
  Tensor mean;     // [N]
  Tensor cov;      // [N x N]
  Tensor samples;  // [S x N], filled by sample_f
};

/// K[i,j] = s2 * exp(-|a_i - b_j|^2 / (2 l^2)), differentiable in a, b and
/// both hyperparameters.
inline Tensor kernel_matrix(const Tensor& a, const Tensor& b, const RbfKernelParams& theta) {
  detail::require_rank(a, 2, "kernel_matrix");
  detail::require_rank(b, 2, "kernel_matrix");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("kernel_matrix: input dimensions differ, " +
                         detail::shape_string(a.shape()) + " vs " +
                         detail::shape_string(b.shape()));
  }
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  const Tensor& log_ls = theta.log_lengthscale.value();
  const Tensor& log_var = theta.log_variance.value();
  const double inv_l2 = std::exp(-2.0 * log_ls.item());
  const double s2 = std::exp(log_var.item());
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> k(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = av[i * d + c] - bv[j * d + c];
        d2 += diff * diff;
      }
      k[i * m + j] = s2 * std::exp(-0.5 * d2 * inv_l2);
    }
  return detail::make_result(
      {n, m}, std::move(k), {a, b, log_ls, log_var}, [n, m, d, inv_l2](detail::Node& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        auto* ga = detail::parent_grad(self, 0);
        auto* gb = detail::parent_grad(self, 1);
        auto* gl = detail::parent_grad(self, 2);
        auto* gv = detail::parent_grad(self, 3);
        double dl = 0.0, dv = 0.0;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            const double gk = self.grad[i * m + j] * self.value[i * m + j];
            if (gk == 0.0) continue;
            dv += gk;
            double d2 = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double diff = av[i * d + c] - bv[j * d + c];
              d2 += diff * diff;
              const double g = gk * diff * inv_l2;
              if (ga) (*ga)[i * d + c] -= g;
              if (gb) (*gb)[j * d + c] += g;
            }
            dl += gk * d2 * inv_l2;
          }
        if (gl) (*gl)[0] += dl;
        if (gv) (*gv)[0] += dv;
      });
}

namespace detail {

inline std::vector<double> jitter_ladder(double base) {
  constexpr double kEscalated = 1e-4;
  if (base < kEscalated) return {base, kEscalated};
  return {base};
}

/// Cholesky of m + jitter I with one escalation step.
inline Tensor jittered_cholesky(const Tensor& m, double base_jitter, const char* what) {
  double last_jitter = base_jitter;
  std::size_t last_pivot = 0;
  for (double j : jitter_ladder(base_jitter)) {
    try {
      return cholesky(add_diag(m, j));
    } catch (const NotPositiveDefiniteError& e) {
      last_pivot = e.pivot();
      last_jitter = j;
    }
  }
  throw ModelStateError(std::string(what) + " is not positive definite (pivot " +
                        std::to_string(last_pivot) + ") even with jitter " +
                        std::to_string(last_jitter));
}

}  // namespace detail

/// Cholesky factor of K_ZZ + jitter I, shared by q_f and kl_u within a step.
struct PriorFactor {
  Tensor chol;  // [M x M]
};

inline PriorFactor prior_factor(const SvgpParams& p) {
  const Tensor& z = p.inducing.value();
  return {detail::jittered_cholesky(kernel_matrix(z, z, p.kernel), p.jitter, "K_ZZ")};
}

inline GaussianBatch q_f(const SvgpParams& p, const Tensor& x, const PriorFactor& prior) {
  detail::require_rank(x, 2, "q_f");
  if (x.dim(0) == 0) throw DimensionError("q_f: empty input batch");
  if (x.dim(1) != p.input_dim()) {
    throw DimensionError("q_f: inputs " + detail::shape_string(x.shape()) +
                         " do not match inducing locations " +
                         detail::shape_string(p.inducing.shape()));
  }
  const std::size_t m = p.num_inducing(), n = x.dim(0);
  const Tensor& z = p.inducing.value();
  const Tensor kzx = kernel_matrix(z, x, p.kernel);
  const Tensor a = tri_solve(prior.chol, kzx, Triangle::kLower);         // Lz^-1 K_ZX
  const Tensor b = tri_solve(transpose(prior.chol), a, Triangle::kUpper);  // K_ZZ^-1 K_ZX
  const Tensor mean_col = matmul(transpose(b), reshape(p.mean.value(), {m, 1}));
  const Tensor c = matmul(transpose(p.chol_factor()), b);  // L_u^T K_ZZ^-1 K_ZX
  const Tensor cov = kernel_matrix(x, x, p.kernel) - matmul(transpose(a), a) +
                     matmul(transpose(c), c);
  return {reshape(mean_col, {n}), cov, Tensor::zeros({0, n})};
}

inline GaussianBatch q_f(const SvgpParams& p, const Tensor& x) {
  return q_f(p, x, prior_factor(p));
}

/// KL(q(U) || p(U)) in closed form.
inline Tensor kl_u(const SvgpParams& p, const PriorFactor& prior) {
  const std::size_t m = p.num_inducing();
  const Tensor lu = p.chol_factor();
  const Tensor trace = sum(square(tri_solve(prior.chol, lu, Triangle::kLower)));
  const Tensor maha = sum(square(tri_solve(prior.chol, p.mean.value(), Triangle::kLower)));
  const Tensor logdet_k = 2.0 * sum(log(diag(prior.chol)));
  const Tensor logdet_s = 2.0 * sum(log(diag(lu)));
  return 0.5 * ((trace + maha - static_cast<double>(m)) + (logdet_k - logdet_s));
}

inline Tensor kl_u(const SvgpParams& p) { return kl_u(p, prior_factor(p)); }

/// Reparametrized draws mean + L eps with L L^T = cov + jitter I. The noise
/// is drawn row by row (sample-major, then input index) and carries no
/// gradient.
inline Tensor sample_f(const GaussianBatch& q, std::size_t num_samples, Rng& rng,
                       double jitter = 1e-6) {
  const std::size_t n = q.mean.numel();
  const Tensor l = detail::jittered_cholesky(q.cov, jitter, "q(F) covariance");
  std::vector<double> eps(num_samples * n);
  for (double& e : eps) e = rng.normal();
  const Tensor noise = Tensor::matrix(num_samples, n, std::move(eps));
  return add_row_vector(matmul(noise, transpose(l)), q.mean);
}

}  // namespace agp
