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

/** @file metrics.hpp Bag-level scores, uncertainty summaries and CSV export. */

#pragma once

#include <agp/model.hpp>

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace agp {

namespace detail {

inline void check_labels(const std::vector<int>& t, const std::vector<int>& p, int k, const char* op) {
  if (t.size() != p.size()) {
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(t.size()) + " true labels vs " +
                                std::to_string(p.size()) + " predictions");
  }
  if (t.empty()) throw std::invalid_argument(std::string(op) + ": empty input");
  if (k < 1) throw std::invalid_argument(std::string(op) + ": need k >= 1");
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] < 0 || t[i] >= k || p[i] < 0 || p[i] >= k) {
      throw std::invalid_argument(std::string(op) + ": label outside [0, " + std::to_string(k) + ")");
    }
  }
}

}  // namespace detail

/// counts[t][p].
inline std::vector<std::vector<std::size_t>> confusion_matrix(const std::vector<int>& truth,
                                                              const std::vector<int>& pred, int k) {
  detail::check_labels(truth, pred, k, "confusion_matrix");
  std::vector<std::vector<std::size_t>> c(k, std::vector<std::size_t>(k, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) ++c[truth[i]][pred[i]];
  return c;
}

/// Cohen's kappa with quadratic weights (i - j)^2 / (k - 1)^2. Returns 1
/// when the chance-disagreement term vanishes and the labelings agree.
inline double quadratic_kappa(const std::vector<int>& truth, const std::vector<int>& pred, int k) {
  const auto o = confusion_matrix(truth, pred, k);
  if (k == 1) return 1.0;
  const double n = static_cast<double>(truth.size());
  std::vector<double> rows(k, 0.0), cols(k, 0.0);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      rows[i] += static_cast<double>(o[i][j]);
      cols[j] += static_cast<double>(o[i][j]);
    }
  double num = 0.0, den = 0.0;
  const double scale = static_cast<double>((k - 1) * (k - 1));
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      const double w = static_cast<double>((i - j) * (i - j)) / scale;
      num += w * static_cast<double>(o[i][j]);
      den += w * rows[i] * cols[j] / n;
    }
  if (den == 0.0) return num == 0.0 ? 1.0 : 0.0;
  return 1.0 - num / den;
}

/// F1 of one class; a class absent from both labelings scores 1.
inline double class_f1(const std::vector<int>& truth, const std::vector<int>& pred, int k, int cls) {
  detail::check_labels(truth, pred, k, "class_f1");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (pred[i] == cls && truth[i] == cls) ++tp;
    else if (pred[i] == cls) ++fp;
    else if (truth[i] == cls) ++fn;
  }
  if (tp + fp + fn == 0) return 1.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

/// Unweighted mean of the per-class F1 scores.
inline double macro_f1(const std::vector<int>& truth, const std::vector<int>& pred, int k) {
  detail::check_labels(truth, pred, k, "macro_f1");
  double s = 0.0;
  for (int c = 0; c < k; ++c) s += class_f1(truth, pred, k, c);
  return s / static_cast<double>(k);
}

inline constexpr double kHistogramBinWidth = 0.005;
inline constexpr double kUncertaintyThresholds[] = {0.01, 0.02, 0.05};

struct HistogramBin {
  double low = 0.0;
  std::size_t correct = 0;
  std::size_t incorrect = 0;
};

struct ThresholdedScore {
  double threshold = 0.0;
  std::size_t kept = 0;
  std::optional<double> accuracy;  // absent when no bag passes
  std::optional<double> kappa;
};

struct BagRecord {
  std::string bag_id;
  int truth = 0;
  int predicted = 0;
  std::vector<double> prob_mean;
  std::vector<double> prob_std;
  double total_uncertainty = 0.0;
};

struct EvalReport {
  std::size_t bag_count = 0;
  int num_classes = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::optional<double> positive_f1;  // binary tasks
  double quadratic_kappa = 0.0;
  std::vector<std::vector<std::size_t>> confusion;
  std::vector<HistogramBin> uncertainty_hist;
  std::size_t correct_count = 0;
  std::size_t incorrect_count = 0;
  std::optional<double> mean_std_correct;    // absent when no bag is correct
  std::optional<double> mean_std_incorrect;  // absent when no bag is wrong
  std::vector<ThresholdedScore> thresholded;
  std::vector<BagRecord> bags;
};

/// Summary of a set of predictions against their true labels.
inline EvalReport uncertainty_report(const std::vector<BagPrediction>& preds, const std::vector<int>& truth) {
  if (preds.empty()) throw std::invalid_argument("uncertainty_report: no predictions");
  if (preds.size() != truth.size()) {
    throw std::invalid_argument("uncertainty_report: " + std::to_string(preds.size()) +
                                " predictions vs " + std::to_string(truth.size()) + " labels");
  }
  EvalReport r;
  r.bag_count = preds.size();
  r.num_classes = static_cast<int>(preds.front().class_prob_mean.size());
  std::vector<int> guess(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) guess[i] = static_cast<int>(preds[i].predicted_class);

  r.confusion = confusion_matrix(truth, guess, r.num_classes);
  std::size_t diag = 0;
  for (int c = 0; c < r.num_classes; ++c) diag += r.confusion[c][c];
  r.accuracy = static_cast<double>(diag) / static_cast<double>(r.bag_count);
  r.macro_f1 = macro_f1(truth, guess, r.num_classes);
  if (r.num_classes == 2) r.positive_f1 = class_f1(truth, guess, 2, 1);
  r.quadratic_kappa = quadratic_kappa(truth, guess, r.num_classes);

  double sum_c = 0.0, sum_i = 0.0;
  std::size_t bins = 1;
  for (const auto& p : preds) {
    const auto b = static_cast<std::size_t>(std::floor(p.total_uncertainty / kHistogramBinWidth));
    bins = std::max(bins, b + 1);
  }
  r.uncertainty_hist.resize(bins);
  for (std::size_t b = 0; b < bins; ++b) r.uncertainty_hist[b].low = static_cast<double>(b) * kHistogramBinWidth;

  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& p = preds[i];
    const bool ok = guess[i] == truth[i];
    auto& bin = r.uncertainty_hist[static_cast<std::size_t>(std::floor(p.total_uncertainty / kHistogramBinWidth))];
    if (ok) {
      ++r.correct_count;
      ++bin.correct;
      sum_c += p.total_uncertainty;
    } else {
      ++r.incorrect_count;
      ++bin.incorrect;
      sum_i += p.total_uncertainty;
    }
    r.bags.push_back({p.bag_id, truth[i], guess[i], p.class_prob_mean, p.class_prob_std, p.total_uncertainty});
  }
  if (r.correct_count > 0) r.mean_std_correct = sum_c / static_cast<double>(r.correct_count);
  if (r.incorrect_count > 0) r.mean_std_incorrect = sum_i / static_cast<double>(r.incorrect_count);

  for (double t : kUncertaintyThresholds) {
    ThresholdedScore s;
    s.threshold = t;
    std::vector<int> tt, pp;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (preds[i].total_uncertainty < t) {
        tt.push_back(truth[i]);
        pp.push_back(guess[i]);
      }
    }
    s.kept = tt.size();
    if (!tt.empty()) {
      std::size_t hit = 0;
      for (std::size_t i = 0; i < tt.size(); ++i) hit += tt[i] == pp[i];
      s.accuracy = static_cast<double>(hit) / static_cast<double>(tt.size());
      s.kappa = quadratic_kappa(tt, pp, r.num_classes);
    }
    r.thresholded.push_back(s);
  }
  return r;
}

inline EvalReport uncertainty_report(const std::vector<BagPrediction>& preds) {
  std::vector<int> truth;
  for (const auto& p : preds) truth.push_back(p.true_label);
  return uncertainty_report(preds, truth);
}

namespace detail {

inline nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["bag_count"] = r.bag_count;
  j["num_classes"] = r.num_classes;
  j["accuracy"] = r.accuracy;
  j["macro_f1"] = r.macro_f1;
  j["positive_f1"] = detail::optional_json(r.positive_f1);
  j["quadratic_kappa"] = r.quadratic_kappa;
  j["confusion"] = r.confusion;
  j["correct_count"] = r.correct_count;
  j["incorrect_count"] = r.incorrect_count;
  j["mean_std_correct"] = detail::optional_json(r.mean_std_correct);
  j["mean_std_correct_present"] = r.mean_std_correct.has_value();
  j["mean_std_incorrect"] = detail::optional_json(r.mean_std_incorrect);
  j["mean_std_incorrect_present"] = r.mean_std_incorrect.has_value();
  j["histogram_bin_width"] = kHistogramBinWidth;
  auto hist = nlohmann::ordered_json::array();
  for (const auto& b : r.uncertainty_hist)
    hist.push_back({{"bin_low", b.low}, {"correct", b.correct}, {"incorrect", b.incorrect}});
  j["uncertainty_hist"] = std::move(hist);
  auto th = nlohmann::ordered_json::array();
  for (const auto& s : r.thresholded)
    th.push_back({{"threshold", s.threshold},
                  {"kept", s.kept},
                  {"accuracy", detail::optional_json(s.accuracy)},
                  {"quadratic_kappa", detail::optional_json(s.kappa)}});
  j["thresholded"] = std::move(th);
  auto bags = nlohmann::ordered_json::array();
  for (const auto& b : r.bags)
    bags.push_back({{"bag_id", b.bag_id},
                    {"true", b.truth},
                    {"predicted", b.predicted},
                    {"prob_mean", b.prob_mean},
                    {"prob_std", b.prob_std},
                    {"total_uncertainty", b.total_uncertainty}});
  j["bags"] = std::move(bags);
  return j;
}

/// Shortest text that parses back to exactly `v`.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return f;
}

inline void finish_write(std::ofstream& f, const std::filesystem::path& path) {
  f.flush();
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace detail

inline constexpr const char* kAttentionCsvHeader = "bag_id,instance_index,weight_mean,weight_std";
inline constexpr const char* kHistogramCsvHeader = "bin_low,correct_count,incorrect_count";

/// One row per instance; `comment` becomes a leading '#' line when given.
inline void export_attention(const std::vector<BagPrediction>& preds, const std::filesystem::path& path,
                             const std::string& comment = {}) {
  auto f = detail::open_for_write(path);
  if (!comment.empty()) f << "# " << comment << '\n';
  f << kAttentionCsvHeader << '\n';
  for (const auto& p : preds) {
    const auto& a = p.attention;
    for (std::size_t i = 0; i < a.weight_mean.size(); ++i) {
      f << p.bag_id << ',' << i << ',' << format_double(a.weight_mean[i]) << ','
        << format_double(a.weight_std[i]) << '\n';
    }
  }
  detail::finish_write(f, path);
}

inline void export_histogram(const EvalReport& r, const std::filesystem::path& path,
                             const std::string& comment = {}) {
  auto f = detail::open_for_write(path);
  if (!comment.empty()) f << "# " << comment << '\n';
  f << kHistogramCsvHeader << '\n';
  for (const auto& b : r.uncertainty_hist)
    f << format_double(b.low) << ',' << b.correct << ',' << b.incorrect << '\n';
  detail::finish_write(f, path);
}

}  // namespace agp
