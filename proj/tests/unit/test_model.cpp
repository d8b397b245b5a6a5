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

#include <agp/model.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "bags.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using agp::Tensor;

namespace {

using fixture::random_bag;
using fixture::tiny_config;

/// Moves the variational parameters away from their initial values so the
/// checks exercise a non-trivial posterior.
void perturb_gp(const agp::MilModel& model, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  const auto& gp = model.svgp();
  for (double& v : gp.mean.data()) v = 2.0 * u(gen);
  const std::size_t m = gp.num_inducing();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j <= i; ++j) gp.chol_raw.data()[i * m + j] = u(gen) - (i == j ? 1.0 : 0.0);
  for (double& v : gp.inducing.data()) v = 0.5 + u(gen);
  gp.kernel.log_lengthscale.data()[0] = std::log(0.8);
  gp.kernel.log_variance.data()[0] = std::log(1.3);
}

oracle::Mat to_mat(const agp::Parameter& p) {
  return oracle::Mat(p.shape()[0], p.shape().size() > 1 ? p.shape()[1] : 1, p.data());
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Straight-line forward pass of the MNIST model with GP attention, written
/// against the raw parameter arrays.
double reference_loss(const agp::MilModel& model, const agp::Bag& bag, agp::Rng rng, double kl_weight) {
  const auto& cfg = model.config();
  const auto& params = model.parameters();
  auto find = [&](const std::string& name) -> const agp::Parameter& {
    for (const auto& p : params)
      if (p.name() == name) return p;
    throw std::runtime_error("missing " + name);
  };
  const auto& cw = find("backbone.conv1.weight").data();
  const auto& cb = find("backbone.conv1.bias").data();
  const auto& fw = find("backbone.fc1.weight").data();
  const auto& fb = find("backbone.fc1.bias").data();
  const auto& aw = find("attention.fc.weight").data();
  const auto& ab = find("attention.fc.bias").data();
  const auto& kw = find("classifier.weight").data();
  const auto& kb = find("classifier.bias").data();
  const std::size_t n = bag.size(), p = cfg.feature_dim, d = cfg.gp_input_dim, k = cfg.num_classes;
  const std::size_t s = cfg.mc_samples;

  // Features.
  std::vector<std::vector<double>> h(n, std::vector<double>(p, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor img = bag.instances[i].pixels();
    std::vector<double> flat;
    for (std::size_t f = 0; f < 4; ++f)
      for (std::size_t r = 0; r < 26; ++r)
        for (std::size_t c = 0; c < 26; ++c) {
          double acc = cb[f];
          for (std::size_t a = 0; a < 3; ++a)
            for (std::size_t b = 0; b < 3; ++b) acc += cw[f * 9 + a * 3 + b] * img[(r + a) * 28 + c + b];
          flat.push_back(std::max(0.0, acc));
        }
    for (std::size_t o = 0; o < p; ++o) {
      double acc = fb[o];
      for (std::size_t q = 0; q < flat.size(); ++q) acc += fw[o * flat.size() + q] * flat[q];
      h[i][o] = std::max(0.0, acc);
    }
  }
  // GP inputs, sorted lexicographically.
  std::vector<std::vector<double>> x(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double acc = ab[j];
      for (std::size_t q = 0; q < p; ++q) acc += aw[j * p + q] * h[i][q];
      x[i][j] = sigmoid(acc);
    }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });

  const auto& gp = model.svgp();
  oracle::DenseGp g;
  g.z = to_mat(gp.inducing);
  g.mu = gp.mean.data();
  g.lu = oracle::tril_softplus(to_mat(gp.chol_raw));
  g.lengthscale = gp.kernel.lengthscale();
  g.variance = gp.kernel.variance();
  g.jitter = gp.jitter;
  oracle::Mat xs(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) xs(i, j) = x[order[i]][j];
  auto [mean, cov] = oracle::posterior(g, xs);
  for (std::size_t i = 0; i < n; ++i) cov(i, i) += gp.jitter;
  const oracle::Mat l = oracle::chol(cov);

  double nll = 0.0;
  for (std::size_t t = 0; t < s; ++t) {
    std::vector<double> eps(n), f(n);
    for (double& e : eps) e = rng.normal();
    double fmax = -1e300;
    for (std::size_t i = 0; i < n; ++i) {
      f[i] = mean[i];
      for (std::size_t j = 0; j <= i; ++j) f[i] += l(i, j) * eps[j];
      fmax = std::max(fmax, f[i]);
    }
    double z = 0.0;
    for (double v : f) z += std::exp(v - fmax);
    std::vector<double> emb(p, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t q = 0; q < p; ++q) emb[q] += std::exp(f[i] - fmax) / z * h[order[i]][q];
    std::vector<double> logit(k);
    for (std::size_t c = 0; c < k; ++c) {
      logit[c] = kb[c];
      for (std::size_t q = 0; q < p; ++q) logit[c] += kw[c * p + q] * emb[q];
    }
    const double lmax = *std::max_element(logit.begin(), logit.end());
    double lz = 0.0;
    for (double v : logit) lz += std::exp(v - lmax);
    nll -= logit[static_cast<std::size_t>(bag.label)] - lmax - std::log(lz);
  }
  return nll / static_cast<double>(s) + kl_weight * oracle::kl_dense(g);
}

}  // namespace

TEST(Model, FeatureShapes) {
  agp::MilModel mnist(tiny_config());
  const auto bag = random_bag(3, 0, 1);
  const Tensor h = agp::feature_extract(bag, mnist);
  EXPECT_EQ(h.shape(), (agp::Shape{3, 8}));

  auto cfg = tiny_config();
  cfg.backbone = agp::BackboneKind::kCifarCnn;
  cfg.num_classes = 3;
  agp::MilModel cifar(cfg);
  const auto cbag = random_bag(2, 2, 2, 3, 32);
  EXPECT_EQ(agp::feature_extract(cbag, cifar).shape(), (agp::Shape{2, 8}));
  EXPECT_THROW(agp::feature_extract(bag, cifar), agp::DimensionError);
}

TEST(Model, ParameterNamesAreUnique) {
  for (auto kind : {agp::AttentionKind::kAgp, agp::AttentionKind::kADet, agp::AttentionKind::kADetGated,
                    agp::AttentionKind::kMeanAgg}) {
    agp::MilModel model(tiny_config(kind));
    std::set<std::string> names;
    for (const auto& p : model.parameters()) EXPECT_TRUE(names.insert(p.name()).second) << p.name();
  }
}

TEST(Model, InitIsSeeded) {
  agp::MilModel a(tiny_config()), b(tiny_config());
  auto cfg = tiny_config();
  cfg.seed = 4;
  agp::MilModel c(cfg);
  EXPECT_EQ(a.parameters()[0].data(), b.parameters()[0].data());
  EXPECT_NE(a.parameters()[0].data(), c.parameters()[0].data());
}

TEST(Model, ZeroImageGivesZeroFeaturesAndUniformClasses) {
  agp::MilModel model(tiny_config(agp::AttentionKind::kADet));
  auto bag = random_bag(2, 1, 5);
  auto blank = std::make_shared<agp::ImageSet>(*bag.instances[0].source);
  std::fill(blank->pixels.begin(), blank->pixels.end(), 0);
  for (auto& inst : bag.instances) inst.source = blank;
  const Tensor h = agp::feature_extract(bag, model);
  for (double v : h.values()) EXPECT_EQ(v, 0.0);
  const Tensor probs = agp::classify_bag(Tensor::zeros({1, 8}), model);
  EXPECT_DOUBLE_EQ(probs.at(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(probs.at(0, 1), 0.5);
}

TEST(Model, LossMatchesStraightLineReference) {
  agp::MilModel model(tiny_config());
  perturb_gp(model, 17);
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto bag = random_bag(3, static_cast<int>(seed % 2), 100 + seed);
    agp::LossOptions opts;
    opts.kl_weight = 0.25;
    agp::Rng rng(seed);
    const double got = agp::elbo_loss(bag, model, rng, opts).item();
    const double want = reference_loss(model, bag, agp::Rng(seed), 0.25);
    EXPECT_NEAR(got, want, 1e-10 * std::max(1.0, std::abs(want))) << "seed " << seed;
  }
}

TEST(Model, LossGradientMatchesFiniteDifferences) {
  auto cfg = tiny_config();
  cfg.inducing_count = 2;
  cfg.mc_samples = 3;
  agp::MilModel model(cfg);
  perturb_gp(model, 5);
  const auto bag = random_bag(2, 1, 9);
  agp::LossOptions opts;
  opts.kl_weight = 0.5;
  auto loss = [&] {
    agp::Rng rng(21);
    return agp::elbo_loss(bag, model, rng, opts);
  };
  std::string worst;
  const double err = gradcheck::parameter_relative_error(loss, model.parameters(), 25, 1e-6, &worst);
  EXPECT_LT(err, 1e-3) << worst;
}

TEST(Model, DeterministicLossGradients) {
  for (auto kind : {agp::AttentionKind::kADet, agp::AttentionKind::kADetGated, agp::AttentionKind::kMeanAgg}) {
    agp::MilModel model(tiny_config(kind));
    const auto bag = random_bag(3, 0, 12);
    auto loss = [&] {
      agp::Rng rng(1);
      return agp::elbo_loss(bag, model, rng);
    };
    std::string worst;
    EXPECT_LT(gradcheck::parameter_relative_error(loss, model.parameters(), 25, 1e-6, &worst), 1e-3)
        << agp::to_string(kind) << " " << worst;
  }
}

TEST(Model, PredictionIsPermutationInvariant) {
  agp::MilModel model(tiny_config());
  perturb_gp(model, 2);
  const auto bag = random_bag(5, 1, 33);
  auto reversed = bag;
  std::reverse(reversed.instances.begin(), reversed.instances.end());
  agp::Rng r1(8), r2(8);
  const auto a = agp::predict(bag, model, 10, r1);
  const auto b = agp::predict(reversed, model, 10, r2);
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_NEAR(a.class_prob_mean[c], b.class_prob_mean[c], 1e-10);
    EXPECT_NEAR(a.class_prob_std[c], b.class_prob_std[c], 1e-10);
  }
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_NEAR(a.attention.weight_mean[i], b.attention.weight_mean[4 - i], 1e-10);
    EXPECT_NEAR(a.attention.weight_std[i], b.attention.weight_std[4 - i], 1e-10);
  }
}

TEST(Model, PredictionSummaries) {
  agp::MilModel model(tiny_config());
  perturb_gp(model, 4);
  const auto bag = random_bag(4, 0, 44);
  agp::Rng rng(1);
  const auto p = agp::predict(bag, model, 20, rng);
  EXPECT_NEAR(p.class_prob_mean[0] + p.class_prob_mean[1], 1.0, 1e-12);
  EXPECT_NEAR(p.class_prob_std[0], p.class_prob_std[1], 1e-12);
  EXPECT_GT(p.total_uncertainty, 0.0);
  EXPECT_NEAR(p.total_uncertainty, p.class_prob_std[0], 1e-12);
  EXPECT_EQ(p.attention.weights.shape(), (agp::Shape{20, 4}));
  EXPECT_EQ(p.predicted_class, p.class_prob_mean[1] > p.class_prob_mean[0] ? 1u : 0u);
  EXPECT_EQ(p.true_label, 0);
}

TEST(Model, DeterministicVariantsReportNoSpread) {
  for (auto kind : {agp::AttentionKind::kADet, agp::AttentionKind::kADetGated, agp::AttentionKind::kMeanAgg}) {
    agp::MilModel model(tiny_config(kind));
    const auto bag = random_bag(3, 1, 7);
    agp::Rng rng(1);
    const auto p = agp::predict(bag, model, 20, rng);
    EXPECT_EQ(p.total_uncertainty, 0.0);
    EXPECT_EQ(p.attention.weights.dim(0), 1u);
    for (double v : p.attention.weight_std) EXPECT_EQ(v, 0.0);
  }
}

TEST(Model, UniformClassifierGivesLogK) {
  auto cfg = tiny_config(agp::AttentionKind::kADet);
  cfg.num_classes = 3;
  agp::MilModel model(cfg);
  std::fill(model.classifier().weight.data().begin(), model.classifier().weight.data().end(), 0.0);
  std::fill(model.classifier().bias.data().begin(), model.classifier().bias.data().end(), 0.0);
  const auto bag = random_bag(2, 2, 3);
  agp::Rng rng(1);
  EXPECT_NEAR(agp::elbo_loss(bag, model, rng).item(), std::log(3.0), 1e-12);
}

TEST(Model, PosteriorEqualToPriorHasZeroKl) {
  agp::MilModel model(tiny_config());
  const auto& gp = model.svgp();
  const agp::PriorFactor prior = agp::prior_factor(gp);
  const std::size_t m = gp.num_inducing();
  std::fill(gp.mean.data().begin(), gp.mean.data().end(), 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      const double v = prior.chol.at(i, j);
      gp.chol_raw.data()[i * m + j] = i == j ? agp::SvgpParams::inverse_softplus(v) : v;
    }
  EXPECT_NEAR(agp::kl_u(gp).item(), 0.0, 1e-8);
  // The objective then reduces to the likelihood term.
  const auto bag = random_bag(2, 1, 8);
  agp::Rng rng(2);
  const auto terms = agp::elbo_terms(bag, model, rng);
  EXPECT_NEAR(terms.loss.item(), terms.nll, 1e-8);
}

TEST(Model, ClassWeightsScaleLikelihood) {
  agp::MilModel model(tiny_config(agp::AttentionKind::kADet));
  const auto bag = random_bag(2, 1, 8);
  agp::Rng r1(1), r2(1);
  agp::LossOptions weighted;
  weighted.class_weights = {1.0, 2.5};
  EXPECT_NEAR(agp::elbo_loss(bag, model, r2, weighted).item(), 2.5 * agp::elbo_loss(bag, model, r1).item(),
              1e-12);
}

TEST(Model, RejectsBadLabel) {
  agp::MilModel model(tiny_config());
  const auto bag = random_bag(2, 2, 8);
  agp::Rng rng(1);
  EXPECT_THROW(agp::elbo_loss(bag, model, rng), std::invalid_argument);
}

TEST(Model, ConfigRoundTrip) {
  auto cfg = tiny_config(agp::AttentionKind::kADetGated);
  cfg.gp_activation = agp::Activation::kTanh;
  cfg.jitter = 1e-5;
  const auto back = agp::model_config_from_json(agp::to_json(cfg));
  EXPECT_EQ(agp::to_json(back), agp::to_json(cfg));
  auto bad = cfg;
  bad.mc_samples = 0;
  EXPECT_THROW(agp::MilModel{bad}, agp::ConfigError);
}
