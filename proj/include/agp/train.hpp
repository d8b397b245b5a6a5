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

/** @file train.hpp Adam, learning-rate schedule and the epoch loop.
 *
 * Every optimizer step sees exactly one bag. The data order of an epoch
 * comes from its own RNG stream and the Monte Carlo noise of each step from
 * another, so changing the number of samples never reshuffles the data.
 */

#pragma once

#include <agp/data.hpp>
#include <agp/error.hpp>
#include <agp/model.hpp>
#include <agp/rng.hpp>

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace agp {

enum class LrDecay { kNone, kExp };

struct TrainConfig {
  double lr = 1e-4;
  std::size_t epochs = 5;
  LrDecay lr_decay = LrDecay::kNone;
  double decay_rate = 0.1;
  std::size_t decay_start = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 1;
  std::size_t log_every = 0;     // bags between progress callbacks, 0 = never
  double grad_clip = 0.0;        // global L2 norm bound, 0 = off
  bool class_balanced = false;
  std::size_t eval_threads = 1;  // read-only prediction fan-out

  std::vector<std::string> validate() const {
    std::vector<std::string> problems;
    if (!(lr > 0.0) || !std::isfinite(lr)) problems.push_back("lr must be > 0");
    if (!(beta1 > 0.0 && beta1 < 1.0)) problems.push_back("beta1 must lie in (0, 1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) problems.push_back("beta2 must lie in (0, 1)");
    if (!(eps > 0.0)) problems.push_back("eps must be > 0");
    if (!(decay_rate >= 0.0)) problems.push_back("decay_rate must be >= 0");
    if (!(grad_clip >= 0.0)) problems.push_back("grad_clip must be >= 0");
    if (eval_threads < 1) problems.push_back("eval_threads must be >= 1");
    return problems;
  }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"epochs", c.epochs},
          {"lr_decay", c.lr_decay == LrDecay::kNone ? "none" : "exp"},
          {"decay_rate", c.decay_rate},
          {"decay_start", c.decay_start},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"seed", c.seed},
          {"grad_clip", c.grad_clip},
          {"class_balanced", c.class_balanced}};
}

/// Learning rate for a zero-based epoch.
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  if (cfg.lr_decay == LrDecay::kNone || epoch < cfg.decay_start) return cfg.lr;
  return cfg.lr * std::exp(-cfg.decay_rate * static_cast<double>(epoch - cfg.decay_start + 1));
}

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
};

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient. Gradients are zeroed afterwards.
inline void adam_step(const std::vector<Parameter>& params, AdamState& state, double lr,
                      const TrainConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ModelStateError("adam state does not match parameter list");

  double norm2 = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p.name());
      norm2 += g * g;
    }
  }
  double clip = 1.0;
  if (cfg.grad_clip > 0.0 && norm2 > cfg.grad_clip * cfg.grad_clip) clip = cfg.grad_clip / std::sqrt(norm2);

  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].data();
    auto& g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k] * clip;
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.eps);
    }
    std::fill(g.begin(), g.end(), 0.0);
  }
}

struct EpochRecord {
  std::size_t epoch = 0;  // one-based
  double lr = 0.0;
  double mean_loss = 0.0;
  double mean_kl = 0.0;
  double train_acc = 0.0;
  std::optional<double> val_acc;
  double wall_time = 0.0;  // seconds
};

inline nlohmann::ordered_json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"lr", r.lr},
          {"mean_loss", r.mean_loss},
          {"mean_kl", r.mean_kl},
          {"train_acc", r.train_acc},
          {"val_acc", r.val_acc ? nlohmann::ordered_json(*r.val_acc) : nlohmann::ordered_json(nullptr)},
          {"wall_time", r.wall_time}};
}

struct TrainingReport {
  std::vector<EpochRecord> epochs;
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(std::size_t epoch, std::size_t step, double running_loss)> on_progress;
};

/// Class weights B / (K * B_k); a class with no bags gets weight 0.
inline std::vector<double> balanced_class_weights(const BagDataset& data) {
  const auto counts = data.class_counts();
  const double b = static_cast<double>(data.size()), k = static_cast<double>(counts.size());
  std::vector<double> w(counts.size(), 0.0);
  for (std::size_t c = 0; c < counts.size(); ++c)
    if (counts[c] > 0) w[c] = b / (k * static_cast<double>(counts[c]));
  return w;
}

/// Predictions for every bag of a dataset. Each bag's noise depends only on
/// (seed, bag id), so the result does not depend on the thread count.
inline std::vector<BagPrediction> predict_all(const BagDataset& data, const MilModel& model,
                                              std::size_t num_samples, std::uint64_t seed,
                                              std::size_t threads = 1) {
  std::vector<BagPrediction> out(data.size());
  auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < data.size(); i += step) {
      Rng rng = prediction_rng(seed, data.bags[i].id);
      out[i] = predict(data.bags[i], model, num_samples, rng);
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, data.size()));
  if (threads == 1) {
    work(0, 1);
    return out;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        work(t, threads);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

inline double accuracy(const std::vector<BagPrediction>& preds) {
  if (preds.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& p : preds) hit += static_cast<int>(p.predicted_class) == p.true_label;
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

/// Algorithm: for each epoch, shuffle the bags, take one Adam step per bag
/// on the per-bag negative ELBO, then optionally score `val`.
inline TrainingReport train_epochs(MilModel& model, const BagDataset& train, const TrainConfig& cfg,
                                   const BagDataset* val = nullptr, const TrainHooks& hooks = {}) {
  if (auto problems = cfg.validate(); !problems.empty()) throw ConfigError(problems);
  if (static_cast<std::size_t>(train.num_classes) != model.config().num_classes) {
    throw ConfigError({"dataset has " + std::to_string(train.num_classes) + " classes, model has " +
                       std::to_string(model.config().num_classes)});
  }
  TrainingReport report;
  if (cfg.epochs == 0 || train.size() == 0) return report;

  LossOptions opts;
  opts.kl_weight = 1.0 / static_cast<double>(train.size());
  if (cfg.class_balanced) opts.class_weights = balanced_class_weights(train);

  const Rng root(cfg.seed);
  const Rng shuffle_root = root.split("shuffle");
  const Rng noise_root = root.split("noise");
  AdamState adam;
  for (const auto& p : model.parameters()) p.zero_grad();

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto start = std::chrono::steady_clock::now();
    const double lr = lr_at(e, cfg);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle = shuffle_root.split(e);
    shuffle.shuffle(std::span<std::size_t>(order));

    const Rng epoch_noise = noise_root.split(e);
    double loss_sum = 0.0, kl_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t step = 0; step < order.size(); ++step) {
      const Bag& bag = train.bags[order[step]];
      Rng noise = epoch_noise.split(step);
      LossTerms terms = elbo_terms(bag, model, noise, opts);
      const double loss = terms.loss.item();
      if (!std::isfinite(loss)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(e + 1) + ", step " +
                           std::to_string(step) + " (bag " + bag.id + ")");
      }
      backward(terms.loss);
      loss_sum += loss;
      kl_sum += terms.kl;
      const auto& pm = terms.class_prob_mean;
      const auto guess = std::max_element(pm.begin(), pm.end()) - pm.begin();
      hits += guess == bag.label;
      terms = LossTerms{};  // release the graph before updating weights
      adam_step(model.parameters(), adam, lr, cfg);
      if (hooks.on_progress && cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) {
        hooks.on_progress(e + 1, step + 1, loss_sum / static_cast<double>(step + 1));
      }
    }
    const double b = static_cast<double>(order.size());
    EpochRecord rec;
    rec.epoch = e + 1;
    rec.lr = lr;
    rec.mean_loss = loss_sum / b;
    rec.mean_kl = kl_sum / b;
    rec.train_acc = static_cast<double>(hits) / b;
    if (val != nullptr && val->size() > 0) {
      rec.val_acc = accuracy(predict_all(*val, model, model.config().mc_samples,
                                         cfg.seed, cfg.eval_threads));
    }
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report.epochs.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  return report;
}

}  // namespace agp
