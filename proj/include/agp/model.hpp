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

/** @file model.hpp Bag classifier: feature extractor -> aggregation -> classifier.
 *
 * The training objective for GP attention is the negative ELBO of one bag,
 *
 *   loss = -(1/S) sum_s log p^(s)[T] + kl_weight * KL(q(U) || p(U)),
 *
 * where each p^(s) comes from one reparametrized draw of the GP outputs.
 * Deterministic aggregations reduce to plain cross-entropy.
 */

#pragma once

#include <agp/attention.hpp>
#include <agp/data.hpp>
#include <agp/error.hpp>
#include <agp/gp.hpp>
#include <agp/ops.hpp>
#include <agp/rng.hpp>
#include <agp/tensor.hpp>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace agp {

enum class BackboneKind { kMnistSmall, kCifarCnn };
enum class AttentionKind { kAgp, kADet, kADetGated, kMeanAgg };

inline std::string to_string(BackboneKind b) {
  return b == BackboneKind::kMnistSmall ? "mnist_small" : "cifar_cnn";
}

inline std::string to_string(AttentionKind a) {
  switch (a) {
    case AttentionKind::kAgp: return "agp";
    case AttentionKind::kADet: return "a_det";
    case AttentionKind::kADetGated: return "a_det_gated";
    case AttentionKind::kMeanAgg: return "mean_agg";
  }
  return "?";
}

inline std::optional<BackboneKind> parse_backbone(const std::string& s) {
  if (s == "mnist_small") return BackboneKind::kMnistSmall;
  if (s == "cifar_cnn") return BackboneKind::kCifarCnn;
  return std::nullopt;
}

inline std::optional<AttentionKind> parse_attention(const std::string& s) {
  if (s == "agp") return AttentionKind::kAgp;
  if (s == "a_det") return AttentionKind::kADet;
  if (s == "a_det_gated") return AttentionKind::kADetGated;
  if (s == "mean_agg") return AttentionKind::kMeanAgg;
  return std::nullopt;
}

struct ModelConfig {
  BackboneKind backbone = BackboneKind::kMnistSmall;
  std::size_t feature_dim = 64;     // P
  AttentionKind attention = AttentionKind::kAgp;
  std::size_t num_classes = 2;      // K
  std::size_t inducing_count = 64;  // M
  std::size_t gp_input_dim = 32;    // D
  std::size_t mc_samples = 20;      // S
  std::size_t attention_dim = 32;   // L, deterministic attention hidden width
  Activation gp_activation = Activation::kSigmoid;
  double jitter = 1e-6;
  std::uint64_t seed = 1;

  std::vector<std::string> validate() const {
    std::vector<std::string> problems;
    if (num_classes < 2) problems.push_back("num_classes must be >= 2");
    if (inducing_count < 1) problems.push_back("inducing_count must be >= 1");
    if (mc_samples < 1) problems.push_back("mc_samples must be >= 1");
    if (feature_dim < 1) problems.push_back("feature_dim must be >= 1");
    if (gp_input_dim < 1) problems.push_back("gp_input_dim must be >= 1");
    if (attention_dim < 1) problems.push_back("attention_dim must be >= 1");
    if (!(jitter >= 0.0)) problems.push_back("jitter must be >= 0");
    return problems;
  }

  bool probabilistic() const { return attention == AttentionKind::kAgp; }
};

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  return {{"backbone", to_string(c.backbone)},
          {"feature_dim", c.feature_dim},
          {"attention", to_string(c.attention)},
          {"num_classes", c.num_classes},
          {"inducing_count", c.inducing_count},
          {"gp_input_dim", c.gp_input_dim},
          {"mc_samples", c.mc_samples},
          {"attention_dim", c.attention_dim},
          {"gp_activation", to_string(c.gp_activation)},
          {"jitter", c.jitter},
          {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::ordered_json& j) {
  ModelConfig c;
  const auto backbone = parse_backbone(j.at("backbone").get<std::string>());
  const auto attention = parse_attention(j.at("attention").get<std::string>());
  const auto act = parse_activation(j.at("gp_activation").get<std::string>());
  if (!backbone || !attention || !act) throw FormatError("model config holds an unknown enum value");
  c.backbone = *backbone;
  c.attention = *attention;
  c.gp_activation = *act;
  c.feature_dim = j.at("feature_dim").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.inducing_count = j.at("inducing_count").get<std::size_t>();
  c.gp_input_dim = j.at("gp_input_dim").get<std::size_t>();
  c.mc_samples = j.at("mc_samples").get<std::size_t>();
  c.attention_dim = j.at("attention_dim").get<std::size_t>();
  c.jitter = j.at("jitter").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

struct ConvLayer {
  Parameter weight;  // [F x C x 3 x 3]
  Parameter bias;    // [F]
};

struct DenseLayer {
  Parameter weight;  // [out x in]
  Parameter bias;    // [out]
};

struct BagPrediction {
  std::string bag_id;
  int true_label = -1;
  std::vector<double> class_prob_mean;
  std::vector<double> class_prob_std;
  double total_uncertainty = 0.0;
  std::size_t predicted_class = 0;
  AttentionOutput attention;
};

struct LossOptions {
  double kl_weight = 1.0;
  std::vector<double> class_weights;  // empty: unweighted
};

struct LossTerms {
  Tensor loss;
  double nll = 0.0;
  double kl = 0.0;
  std::vector<double> class_prob_mean;  // MC mean of the training-time draws
};

class MilModel {
 public:
  explicit MilModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    if (auto problems = cfg_.validate(); !problems.empty()) throw ConfigError(problems);
    const Rng init = Rng(cfg_.seed).split("init");
    build(init);
  }

  const ModelConfig& config() const noexcept { return cfg_; }

  /// Every trainable tensor, in a fixed order.
  const std::vector<Parameter>& parameters() const noexcept { return params_; }

  const SvgpParams& svgp() const { return *svgp_; }
  const GpProjection& gp_projection() const { return *projection_; }
  const DetAttentionParams& det_attention_params() const { return *det_; }
  const DenseLayer& classifier() const { return classifier_; }

  /// Expected shape of one instance.
  Shape instance_shape() const {
    return cfg_.backbone == BackboneKind::kMnistSmall ? Shape{1, 28, 28} : Shape{3, 32, 32};
  }

  /// H = f_fe(instances): [N x C x H x W] -> [N x P], ReLU throughout.
  Tensor features(const Tensor& instances) const {
    const Shape want = instance_shape();
    if (instances.rank() != 4 || !std::equal(want.begin(), want.end(), instances.shape().begin() + 1)) {
      throw DimensionError("feature extractor " + to_string(cfg_.backbone) + " expects [N x " +
                           detail::shape_string(want) + "] instances, got " +
                           detail::shape_string(instances.shape()));
    }
    const std::size_t n = instances.dim(0);
    Tensor x = instances;
    if (cfg_.backbone == BackboneKind::kMnistSmall) {
      x = relu(add_channel_bias(conv2d(x, convs_[0].weight), convs_[0].bias));
    } else {
      for (std::size_t i = 0; i < convs_.size(); ++i) {
        x = relu(add_channel_bias(conv2d(x, convs_[i].weight), convs_[i].bias));
        if (i % 2 == 1) x = maxpool2x2(x);
      }
    }
    x = reshape(x, {n, x.numel() / n});
    for (const auto& layer : dense_) x = relu(linear(x, layer.weight, layer.bias));
    return x;
  }

  AttentionOutput attend(const Tensor& h, std::size_t num_samples, Rng& rng,
                         const PriorFactor* prior = nullptr) const {
    switch (cfg_.attention) {
      case AttentionKind::kAgp: return agp_attention(h, *projection_, *svgp_, num_samples, rng, prior);
      case AttentionKind::kADet: return det_attention(h, *det_);
      case AttentionKind::kADetGated: return gated_attention(h, *det_);
      case AttentionKind::kMeanAgg: return mean_aggregation(h);
    }
    throw std::logic_error("unknown attention kind");
  }

  /// Classifier logits for each embedding row: [S x P] -> [S x K].
  Tensor logits(const Tensor& embeddings) const {
    return linear(embeddings, classifier_.weight, classifier_.bias);
  }

 private:
  static std::vector<double> glorot(Rng rng, std::size_t count, std::size_t fan_in,
                                    std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> v(count);
    for (double& x : v) x = rng.uniform(-limit, limit);
    return v;
  }

  Parameter add(Parameter p) {
    params_.push_back(p);
    return p;
  }

  ConvLayer conv(const Rng& rng, const std::string& name, std::size_t in, std::size_t out) {
    const std::string w = "backbone." + name + ".weight";
    return {add(Parameter(w, {out, in, 3, 3}, glorot(rng.split(w), out * in * 9, in * 9, out * 9))),
            add(Parameter("backbone." + name + ".bias", {out}, std::vector<double>(out, 0.0)))};
  }

  DenseLayer dense(const Rng& rng, const std::string& name, std::size_t in, std::size_t out) {
    const std::string w = name + ".weight";
    return {add(Parameter(w, {out, in}, glorot(rng.split(w), out * in, in, out))),
            add(Parameter(name + ".bias", {out}, std::vector<double>(out, 0.0)))};
  }

  void build(const Rng& rng) {
    std::size_t flat = 0;
    if (cfg_.backbone == BackboneKind::kMnistSmall) {
      convs_.push_back(conv(rng, "conv1", 1, 4));
      flat = 4 * 26 * 26;
      dense_.push_back(dense(rng, "backbone.fc1", flat, cfg_.feature_dim));
    } else {
      const std::size_t widths[] = {32, 32, 64, 64, 128, 128};
      std::size_t in = 3;
      for (std::size_t i = 0; i < 6; ++i) {
        convs_.push_back(conv(rng, "conv" + std::to_string(i + 1), in, widths[i]));
        in = widths[i];
      }
      // 32 -> 30 -> 28 -> 14 -> 12 -> 10 -> 5 -> 3 -> 1 -> 1
      flat = 128;
      dense_.push_back(dense(rng, "backbone.fc1", flat, 128));
      dense_.push_back(dense(rng, "backbone.fc2", 128, cfg_.feature_dim));
    }

    const std::size_t p = cfg_.feature_dim;
    switch (cfg_.attention) {
      case AttentionKind::kAgp: {
        DenseLayer fc = dense(rng, "attention.fc", p, cfg_.gp_input_dim);
        projection_ = GpProjection{fc.weight, fc.bias, cfg_.gp_activation};
        Rng gp_rng = rng.split("gp.inducing");
        svgp_ = SvgpParams::initialize(cfg_.inducing_count, cfg_.gp_input_dim, gp_rng, cfg_.jitter);
        for (const auto& gp : svgp_->parameters()) add(gp);
        break;
      }
      case AttentionKind::kADet:
      case AttentionKind::kADetGated: {
        const std::size_t l = cfg_.attention_dim;
        DetAttentionParams d;
        d.v = add(Parameter("attention.v", {l, p}, glorot(rng.split("attention.v"), l * p, p, l)));
        d.w = add(Parameter("attention.w", {l}, glorot(rng.split("attention.w"), l, l, 1)));
        if (cfg_.attention == AttentionKind::kADetGated) {
          d.gate = add(Parameter("attention.gate", {l, p},
                                 glorot(rng.split("attention.gate"), l * p, p, l)));
        }
        det_ = d;
        break;
      }
      case AttentionKind::kMeanAgg: break;
    }
    classifier_ = dense(rng, "classifier", p, cfg_.num_classes);
  }

  ModelConfig cfg_;
  std::vector<Parameter> params_;
  std::vector<ConvLayer> convs_;
  std::vector<DenseLayer> dense_;
  std::optional<GpProjection> projection_;
  std::optional<SvgpParams> svgp_;
  std::optional<DetAttentionParams> det_;
  DenseLayer classifier_;
};

inline Tensor feature_extract(const Bag& bag, const MilModel& model) {
  return model.features(bag.stack());
}

/// Row-wise class probabilities for each embedding sample.
inline Tensor classify_bag(const Tensor& embedding_samples, const MilModel& model) {
  return softmax_rows(model.logits(embedding_samples));
}

namespace detail {

struct ForwardPass {
  AttentionOutput attention;
  Tensor logits;  // [S x K]
  std::optional<PriorFactor> prior;
};

inline ForwardPass forward(const Tensor& instances, const MilModel& model, std::size_t num_samples,
                           Rng& rng) {
  ForwardPass out;
  const Tensor h = model.features(instances);
  if (model.config().probabilistic()) out.prior = prior_factor(model.svgp());
  out.attention = model.attend(h, num_samples, rng, out.prior ? &*out.prior : nullptr);
  out.logits = model.logits(out.attention.bag_embedding);
  return out;
}

inline std::vector<double> column_means(const Tensor& m) {
  const std::size_t r = m.dim(0), c = m.dim(1);
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += m.values()[i * c + j];
  for (double& v : out) v /= static_cast<double>(r);
  return out;
}

}  // namespace detail

/// Per-bag objective and its parts. Uses the model's configured sample count.
inline LossTerms elbo_terms(const Bag& bag, const MilModel& model, Rng& rng,
                            const LossOptions& opts = {}) {
  const auto k = model.config().num_classes;
  if (bag.label < 0 || static_cast<std::size_t>(bag.label) >= k) {
    throw std::invalid_argument("bag " + bag.id + " has label " + std::to_string(bag.label) +
                                " outside [0, " + std::to_string(k) + ")");
  }
  const std::size_t label = static_cast<std::size_t>(bag.label);
  detail::ForwardPass pass = detail::forward(bag.stack(), model, model.config().mc_samples, rng);
  Tensor nll = -mean(pick_column(log_softmax_rows(pass.logits), label));
  if (!opts.class_weights.empty()) nll = nll * opts.class_weights.at(label);

  LossTerms terms;
  terms.nll = nll.item();
  terms.loss = nll;
  if (pass.prior) {
    const Tensor kl = kl_u(model.svgp(), *pass.prior);
    terms.kl = kl.item();
    terms.loss = nll + kl * opts.kl_weight;
  }
  terms.class_prob_mean = detail::column_means(softmax_rows(pass.logits.detach()));
  return terms;
}

inline Tensor elbo_loss(const Bag& bag, const MilModel& model, Rng& rng, const LossOptions& opts = {}) {
  return elbo_terms(bag, model, rng, opts).loss;
}

/// Monte Carlo predictive summary of one bag. Deterministic aggregations
/// use a single pass and report zero spread.
inline BagPrediction predict(const Bag& bag, const MilModel& model, std::size_t num_samples, Rng& rng) {
  if (num_samples == 0) throw std::invalid_argument("predict: need at least one sample");
  NoGradGuard no_grad;
  const std::size_t s = model.config().probabilistic() ? num_samples : 1;
  detail::ForwardPass pass = detail::forward(bag.stack(), model, s, rng);
  const Tensor probs = softmax_rows(pass.logits);
  const std::size_t k = probs.dim(1);

  BagPrediction pred;
  pred.bag_id = bag.id;
  pred.true_label = bag.label;
  pred.class_prob_mean = detail::column_means(probs);
  pred.class_prob_std.assign(k, 0.0);
  if (s > 1) {
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t j = 0; j < k; ++j) {
        const double d = probs.at(r, j) - pred.class_prob_mean[j];
        pred.class_prob_std[j] += d * d;
      }
    for (double& v : pred.class_prob_std) v = std::sqrt(v / static_cast<double>(s));
  }
  double total = 0.0;
  for (double v : pred.class_prob_std) total += v;
  pred.total_uncertainty = total / static_cast<double>(k);
  pred.predicted_class = static_cast<std::size_t>(
      std::max_element(pred.class_prob_mean.begin(), pred.class_prob_mean.end()) -
      pred.class_prob_mean.begin());
  pred.attention = std::move(pass.attention);
  return pred;
}

/// Noise stream used for predicting one bag; depends only on the seed and
/// the bag id.
inline Rng prediction_rng(std::uint64_t seed, const std::string& bag_id) {
  return Rng(seed).split("predict").split(bag_id);
}

}  // namespace agp
