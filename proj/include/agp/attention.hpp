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

/** @file attention.hpp MIL aggregation: instance features H[N x P] -> bag embedding.
 *
 * Four mechanisms share one output type:
 *  - GP attention: a sparse GP regresses one logit per instance from a
 *    squashed 32-d projection of h; S reparametrized draws give S weight
 *    vectors and S embeddings.
 *  - Deterministic attention: logits w^T tanh(V h).
 *  - Gated attention: logits w^T (tanh(V h) * sigmoid(U h)).
 *  - Mean aggregation: uniform weights.
 */

#pragma once

#include <agp/error.hpp>
#include <agp/gp.hpp>
#include <agp/ops.hpp>
#include <agp/rng.hpp>
#include <agp/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace agp {

struct AttentionOutput {
  Tensor weights;        // [S x N], rows sum to one
  Tensor bag_embedding;  // [S x P]
  std::vector<double> weight_mean;  // [N]
  std::vector<double> weight_std;   // [N], population std over S
  std::optional<GaussianBatch> gp;  // GP attention only, in canonical instance order
  std::vector<std::size_t> canonical_order;
};

enum class Activation { kSigmoid, kTanh, kRelu };

inline Tensor apply_activation(const Tensor& x, Activation act) {
  switch (act) {
    case Activation::kSigmoid: return sigmoid(x);
    case Activation::kTanh: return tanh(x);
    case Activation::kRelu: return relu(x);
  }
  return x;
}

inline std::string to_string(Activation act) {
  switch (act) {
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kTanh: return "tanh";
    case Activation::kRelu: return "relu";
  }
  return "?";
}

inline std::optional<Activation> parse_activation(const std::string& s) {
  if (s == "sigmoid") return Activation::kSigmoid;
  if (s == "tanh") return Activation::kTanh;
  if (s == "relu") return Activation::kRelu;
  return std::nullopt;
}

/// Projection in front of the GP: x = act(h W^T + b).
struct GpProjection {
  Parameter weight;  // [D x P]
  Parameter bias;    // [D]
  Activation activation = Activation::kSigmoid;
};

struct DetAttentionParams {
  Parameter v;                     // [L x P]
  Parameter w;                     // [L]
  std::optional<Parameter> gate;   // U_g [L x P], gated variant only
};

namespace detail {

inline void require_bag(const Tensor& h, const char* op) {
  require_rank(h, 2, op);
  if (h.dim(0) == 0) throw DimensionError(std::string(op) + ": empty bag");
}

inline void summarize_weights(AttentionOutput& out) {
  const std::size_t s = out.weights.dim(0), n = out.weights.dim(1);
  const auto& w = out.weights.values();
  out.weight_mean.assign(n, 0.0);
  out.weight_std.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double m = 0.0;
    for (std::size_t r = 0; r < s; ++r) m += w[r * n + i];
    m /= static_cast<double>(s);
    double v = 0.0;
    for (std::size_t r = 0; r < s; ++r) v += (w[r * n + i] - m) * (w[r * n + i] - m);
    out.weight_mean[i] = m;
    out.weight_std[i] = std::sqrt(v / static_cast<double>(s));
  }
}

/// Lexicographic order of the rows of x, ties broken by index.
inline std::vector<std::size_t> canonical_row_order(const Tensor& x) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  const auto& v = x.values();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(v.begin() + a * d, v.begin() + (a + 1) * d,
                                        v.begin() + b * d, v.begin() + (b + 1) * d);
  });
  return order;
}

inline AttentionOutput deterministic_output(const Tensor& logits_row, const Tensor& h) {
  AttentionOutput out;
  out.weights = softmax_rows(logits_row);
  out.bag_embedding = matmul(out.weights, h);
  summarize_weights(out);
  std::fill(out.weight_std.begin(), out.weight_std.end(), 0.0);
  return out;
}

}  // namespace detail

/// GP attention. Instances are processed in a canonical order (sorted by
/// their GP inputs) so the noise assigned to each instance does not depend
/// on the order instances arrive in; weights are reported in input order.
inline AttentionOutput agp_attention(const Tensor& h, const GpProjection& fc,
                                     const SvgpParams& svgp, std::size_t num_samples, Rng& rng,
                                     const PriorFactor* prior = nullptr) {
  detail::require_bag(h, "agp_attention");
  if (num_samples == 0) throw DimensionError("agp_attention: need at least one sample");
  const std::size_t n = h.dim(0);
  const Tensor x = apply_activation(linear(h, fc.weight, fc.bias), fc.activation);
  const std::vector<std::size_t> order = detail::canonical_row_order(x);
  const Tensor xs = gather_rows(x, order);
  const Tensor hs = gather_rows(h, order);

  GaussianBatch q = prior ? q_f(svgp, xs, *prior) : q_f(svgp, xs);
  q.samples = sample_f(q, num_samples, rng, svgp.jitter);
  const Tensor sorted_weights = softmax_rows(q.samples);

  std::vector<std::size_t> inverse(n);
  for (std::size_t k = 0; k < n; ++k) inverse[order[k]] = k;

  AttentionOutput out;
  out.bag_embedding = matmul(sorted_weights, hs);
  out.weights = transpose(gather_rows(transpose(sorted_weights), inverse));
  out.gp = std::move(q);
  out.canonical_order = order;
  detail::summarize_weights(out);
  return out;
}

/// logits_i = w^T tanh(V h_i).
inline AttentionOutput det_attention(const Tensor& h, const DetAttentionParams& p) {
  detail::require_bag(h, "det_attention");
  const std::size_t n = h.dim(0), l = p.w.numel();
  const Tensor hidden = tanh(matmul(h, transpose(p.v)));
  const Tensor logits = matmul(hidden, reshape(p.w.value(), {l, 1}));
  return detail::deterministic_output(reshape(logits, {1, n}), h);
}

/// logits_i = w^T (tanh(V h_i) * sigmoid(U_g h_i)).
inline AttentionOutput gated_attention(const Tensor& h, const DetAttentionParams& p) {
  detail::require_bag(h, "gated_attention");
  if (!p.gate) throw DimensionError("gated_attention: parameters carry no gate matrix");
  const std::size_t n = h.dim(0), l = p.w.numel();
  const Tensor hidden = tanh(matmul(h, transpose(p.v))) *
                        sigmoid(matmul(h, transpose(p.gate->value())));
  const Tensor logits = matmul(hidden, reshape(p.w.value(), {l, 1}));
  return detail::deterministic_output(reshape(logits, {1, n}), h);
}

inline AttentionOutput mean_aggregation(const Tensor& h) {
  detail::require_bag(h, "mean_aggregation");
  const std::size_t n = h.dim(0);
  AttentionOutput out;
  out.weights = Tensor::full({1, n}, 1.0 / static_cast<double>(n));
  out.bag_embedding = matmul(out.weights, h);
  out.weight_mean.assign(n, 1.0 / static_cast<double>(n));
  out.weight_std.assign(n, 0.0);
  return out;
}

}  // namespace agp
