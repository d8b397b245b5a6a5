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

/** @file cli.hpp The `agp` command line: synthesize, train, eval, ablate.
 *
 * Settings come from built-in defaults, then an optional flat `key = value`
 * file (`--config`), then `--key value` flags. Unknown keys and malformed
 * values are all reported before any work starts.
 *
 * Exit codes: 0 success, 1 invalid configuration, 2 failure while running.
 */

#pragma once

#include <agp/checkpoint.hpp>
#include <agp/data.hpp>
#include <agp/digest.hpp>
#include <agp/metrics.hpp>
#include <agp/model.hpp>
#include <agp/train.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace agp::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;

struct KeySpec {
  const char* key;
  const char* fallback;
  const char* help;
};

/// Every recognized setting with its default.
inline const std::vector<KeySpec>& key_specs() {
  static const std::vector<KeySpec> specs = {
      {"task", "mnist", "mnist or cifar"},
      {"data_dir", "", "directory with the source image files (default data/<task>)"},
      {"out_dir", "runs/default", "directory receiving every artifact"},
      {"seed", "1", "seed for bag synthesis, initialization, data order and noise"},
      {"attention", "agp", "agp, a_det, a_det_gated or mean_agg"},
      {"feature_dim", "64", "instance feature size P"},
      {"inducing_count", "64", "number of inducing points M"},
      {"gp_input_dim", "32", "GP input size D"},
      {"mc_samples", "20", "Monte Carlo samples S for training and prediction"},
      {"attention_dim", "32", "hidden width of deterministic attention"},
      {"gp_activation", "sigmoid", "activation before the GP: sigmoid, tanh or relu"},
      {"jitter", "1e-06", "diagonal jitter added to K_ZZ"},
      {"lr", "0.0001", "Adam learning rate"},
      {"epochs", "5", "training epochs"},
      {"lr_decay", "none", "none or exp"},
      {"decay_rate", "0.1", "exponential decay rate per epoch"},
      {"decay_start", "10", "first decayed epoch (zero-based)"},
      {"beta1", "0.9", "Adam beta1"},
      {"beta2", "0.999", "Adam beta2"},
      {"eps", "1e-08", "Adam epsilon"},
      {"grad_clip", "0", "global gradient norm bound, 0 disables"},
      {"class_balanced", "false", "weight the loss by B / (K * B_k)"},
      {"log_every", "0", "print running loss every this many bags, 0 disables"},
      {"eval_threads", "1", "threads used for prediction passes"},
      {"train_bags_limit", "0", "train on the first N bags only, 0 uses all"},
      {"eval_bags_limit", "0", "evaluate the first N bags only, 0 uses all"},
      {"axis", "activation", "ablation axis: feature_dim, inducing or activation"},
      {"seeds", "1", "comma-separated seeds for ablation repeats"},
      {"expect_manifest_sha256", "", "fail unless the manifest digest equals this value"},
  };
  return specs;
}

using Settings = std::map<std::string, std::string>;

/// Parses `key = value` lines; '#' starts a comment.
inline Settings parse_config_text(const std::string& text, const std::string& origin,
                                  std::vector<std::string>& problems) {
  Settings out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      problems.push_back(origin + ":" + std::to_string(lineno) + ": expected key = value");
      continue;
    }
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

struct RunConfig {
  std::string task = "mnist";
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;
  ModelConfig model;
  TrainConfig train;
  std::size_t train_bags_limit = 0;
  std::size_t eval_bags_limit = 0;
  std::string axis;
  std::vector<std::uint64_t> seeds;
  std::string expect_manifest_sha256;
  Settings resolved;  // every key with its final text value
};

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  for (const auto& spec : key_specs()) j[spec.key] = c.resolved.at(spec.key);
  return j;
}

namespace detail {

template <typename T>
void parse_number(const Settings& s, const std::string& key, T& out, std::vector<std::string>& problems) {
  const std::string& text = s.at(key);
  if constexpr (std::is_floating_point_v<T>) {
    try {
      std::size_t used = 0;
      const double v = std::stod(text, &used);
      if (used != text.size() || !std::isfinite(v)) throw std::invalid_argument(text);
      out = static_cast<T>(v);
    } catch (const std::exception&) {
      problems.push_back(key + ": expected a finite number, got '" + text + "'");
    }
  } else {
    T v{};
    const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
      problems.push_back(key + ": expected a non-negative integer, got '" + text + "'");
    } else {
      out = v;
    }
  }
}

inline void parse_bool(const Settings& s, const std::string& key, bool& out, std::vector<std::string>& problems) {
  const std::string& t = s.at(key);
  if (t == "true" || t == "1" || t == "yes") out = true;
  else if (t == "false" || t == "0" || t == "no") out = false;
  else problems.push_back(key + ": expected true or false, got '" + t + "'");
}

}  // namespace detail

/// Merges defaults, file values and flag values, then validates the lot.
/// Throws ConfigError listing every problem found.
inline RunConfig resolve_config(const Settings& file_values, const Settings& flag_values) {
  std::vector<std::string> problems;
  Settings s;
  for (const auto& spec : key_specs()) s[spec.key] = spec.fallback;
  for (const auto* layer : {&file_values, &flag_values}) {
    for (const auto& [k, v] : *layer) {
      if (!s.count(k)) {
        problems.push_back("unknown key '" + k + "'");
        continue;
      }
      s[k] = v;
    }
  }

  RunConfig c;
  c.task = s["task"];
  if (c.task != "mnist" && c.task != "cifar") problems.push_back("task: expected mnist or cifar, got '" + c.task + "'");
  if (s["data_dir"].empty()) s["data_dir"] = "data/" + c.task;
  c.data_dir = s["data_dir"];
  c.out_dir = s["out_dir"];
  if (c.out_dir.empty()) problems.push_back("out_dir: must not be empty");

  ModelConfig& m = c.model;
  m.backbone = c.task == "cifar" ? BackboneKind::kCifarCnn : BackboneKind::kMnistSmall;
  m.num_classes = c.task == "cifar" ? 3 : 2;
  if (auto a = parse_attention(s["attention"])) m.attention = *a;
  else problems.push_back("attention: expected agp, a_det, a_det_gated or mean_agg, got '" + s["attention"] + "'");
  if (auto a = parse_activation(s["gp_activation"])) m.gp_activation = *a;
  else problems.push_back("gp_activation: expected sigmoid, tanh or relu, got '" + s["gp_activation"] + "'");
  detail::parse_number(s, "feature_dim", m.feature_dim, problems);
  detail::parse_number(s, "inducing_count", m.inducing_count, problems);
  detail::parse_number(s, "gp_input_dim", m.gp_input_dim, problems);
  detail::parse_number(s, "mc_samples", m.mc_samples, problems);
  detail::parse_number(s, "attention_dim", m.attention_dim, problems);
  detail::parse_number(s, "jitter", m.jitter, problems);
  detail::parse_number(s, "seed", m.seed, problems);
  for (auto& p : m.validate()) problems.push_back(p);

  TrainConfig& t = c.train;
  t.seed = m.seed;
  detail::parse_number(s, "lr", t.lr, problems);
  detail::parse_number(s, "epochs", t.epochs, problems);
  if (s["lr_decay"] == "none") t.lr_decay = LrDecay::kNone;
  else if (s["lr_decay"] == "exp") t.lr_decay = LrDecay::kExp;
  else problems.push_back("lr_decay: expected none or exp, got '" + s["lr_decay"] + "'");
  detail::parse_number(s, "decay_rate", t.decay_rate, problems);
  detail::parse_number(s, "decay_start", t.decay_start, problems);
  detail::parse_number(s, "beta1", t.beta1, problems);
  detail::parse_number(s, "beta2", t.beta2, problems);
  detail::parse_number(s, "eps", t.eps, problems);
  detail::parse_number(s, "grad_clip", t.grad_clip, problems);
  detail::parse_bool(s, "class_balanced", t.class_balanced, problems);
  detail::parse_number(s, "log_every", t.log_every, problems);
  detail::parse_number(s, "eval_threads", t.eval_threads, problems);
  for (auto& p : t.validate()) problems.push_back(p);

  detail::parse_number(s, "train_bags_limit", c.train_bags_limit, problems);
  detail::parse_number(s, "eval_bags_limit", c.eval_bags_limit, problems);
  c.axis = s["axis"];
  if (c.axis != "feature_dim" && c.axis != "inducing" && c.axis != "activation") {
    problems.push_back("axis: expected feature_dim, inducing or activation, got '" + c.axis + "'");
  }
  {
    std::stringstream ss(s["seeds"]);
    std::string item;
    while (std::getline(ss, item, ',')) {
      std::uint64_t v = 0;
      const auto res = std::from_chars(item.data(), item.data() + item.size(), v);
      if (item.empty() || res.ec != std::errc() || res.ptr != item.data() + item.size()) {
        problems.push_back("seeds: '" + item + "' is not a non-negative integer");
      } else {
        c.seeds.push_back(v);
      }
    }
    if (c.seeds.empty()) problems.push_back("seeds: need at least one seed");
  }
  c.expect_manifest_sha256 = s["expect_manifest_sha256"];
  if (!problems.empty()) throw ConfigError(problems);
  c.resolved = s;
  return c;
}

// ---------------------------------------------------------------------------
// Shared plumbing

struct LoadedData {
  nlohmann::ordered_json manifest;
  std::string manifest_sha256;
  std::map<std::string, BagDataset> splits;
};

inline SourceSplits load_sources(const RunConfig& c) {
  return c.task == "mnist" ? load_mnist_sources(c.data_dir) : load_cifar_sources(c.data_dir);
}

inline std::string manifest_text(const nlohmann::ordered_json& m) { return m.dump(1) + "\n"; }

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f << text;
  if (!f.flush()) throw std::runtime_error("write failed: " + path.string());
}

/// Synthesizes the bags of the configured task and writes manifest.json.
inline LoadedData synthesize_data(const RunConfig& c, const SourceSplits& sources) {
  LoadedData d;
  std::vector<const BagDataset*> parts;
  if (c.task == "mnist") {
    MnistBags b = make_mnist_bags(sources.at("train"), sources.at("test"), c.model.seed);
    d.splits["train"] = std::move(b.train);
    d.splits["test"] = std::move(b.test);
    parts = {&d.splits["train"], &d.splits["test"]};
  } else {
    CifarBags b = make_cifar_bags(sources.at("train"), sources.at("val"), sources.at("test"), c.model.seed);
    d.splits["train"] = std::move(b.train);
    d.splits["val"] = std::move(b.val);
    d.splits["test"] = std::move(b.test);
    parts = {&d.splits["train"], &d.splits["val"], &d.splits["test"]};
  }
  d.manifest = make_manifest(c.task, c.model.seed, parts, sources);
  const std::string text = manifest_text(d.manifest);
  d.manifest_sha256 = sha256_hex(text);
  write_text(c.out_dir / "manifest.json", text);
  return d;
}

/// Reuses out_dir/manifest.json when it matches the task and seed,
/// otherwise synthesizes a fresh one.
inline LoadedData load_or_synthesize(const RunConfig& c) {
  const SourceSplits sources = load_sources(c);
  const auto path = c.out_dir / "manifest.json";
  LoadedData d;
  if (std::filesystem::exists(path)) {
    std::ifstream f(path, std::ios::binary);
    const std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    try {
      d.manifest = nlohmann::ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
    if (d.manifest.value("task", "") == c.task && d.manifest.value("seed", std::uint64_t{0}) == c.model.seed) {
      d.manifest_sha256 = sha256_hex(text);
      d.splits = datasets_from_manifest(d.manifest, sources);
    } else {
      d = synthesize_data(c, sources);
    }
  } else {
    d = synthesize_data(c, sources);
  }
  if (!c.expect_manifest_sha256.empty() && c.expect_manifest_sha256 != d.manifest_sha256) {
    throw FormatError("manifest digest " + d.manifest_sha256 + " differs from expected " +
                      c.expect_manifest_sha256);
  }
  return d;
}

inline BagDataset limited(const BagDataset& d, std::size_t limit) {
  BagDataset out = d;
  if (limit > 0 && out.bags.size() > limit) out.bags.resize(limit);
  return out;
}

/// Split scored during training: val when the task has one, else test.
inline std::string validation_split(const LoadedData& d) { return d.splits.count("val") ? "val" : "test"; }

inline nlohmann::ordered_json provenance(const RunConfig& c, const std::string& manifest_sha256) {
  return {{"config", to_json(c)}, {"manifest_sha256", manifest_sha256}};
}

/// One-line CSV comment carrying the run config and manifest digest.
inline std::string csv_comment(const RunConfig& c, const std::string& manifest_sha256) {
  return provenance(c, manifest_sha256).dump();
}

struct TrainOutcome {
  MilModel model;
  TrainingReport report;
  std::optional<double> final_val_acc;
};

inline TrainOutcome run_training(const RunConfig& c, const LoadedData& d, std::ostream& log,
                                 bool write_artifacts) {
  const BagDataset train = limited(d.splits.at("train"), c.train_bags_limit);
  const std::string vname = validation_split(d);
  const BagDataset val = limited(d.splits.at(vname), c.eval_bags_limit);
  TrainOutcome out{MilModel(c.model), {}, std::nullopt};

  std::ofstream jsonl;
  const auto jsonl_path = c.out_dir / "train.jsonl";
  if (write_artifacts) {
    std::filesystem::create_directories(c.out_dir);
    jsonl.open(jsonl_path, std::ios::trunc);
    if (!jsonl) throw std::runtime_error("cannot open " + jsonl_path.string() + " for writing");
    auto header = provenance(c, d.manifest_sha256);
    header["record"] = "header";
    header["val_split"] = vname;
    header["train_bags"] = train.size();
    header["val_bags"] = val.size();
    jsonl << header.dump() << '\n' << std::flush;
  }
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) {
    auto j = to_json(r);
    log << "epoch " << r.epoch << ": loss " << r.mean_loss << ", kl " << r.mean_kl << ", train_acc "
        << r.train_acc;
    if (r.val_acc) log << ", val_acc (" << vname << ") " << *r.val_acc;
    log << ", " << r.wall_time << " s\n" << std::flush;
    if (write_artifacts) jsonl << j.dump() << '\n' << std::flush;
  };
  hooks.on_progress = [&](std::size_t e, std::size_t step, double loss) {
    log << "  epoch " << e << " bag " << step << ": running loss " << loss << '\n' << std::flush;
  };
  out.report = train_epochs(out.model, train, c.train, &val, hooks);
  if (!out.report.epochs.empty()) out.final_val_acc = out.report.epochs.back().val_acc;
  if (write_artifacts) save_checkpoint(out.model, c.out_dir, provenance(c, d.manifest_sha256));
  return out;
}

struct EvalOutcome {
  EvalReport report;
  std::vector<BagPrediction> predictions;
};

inline EvalOutcome run_eval(const RunConfig& c, const LoadedData& d, const MilModel& model) {
  const BagDataset test = limited(d.splits.at("test"), c.eval_bags_limit);
  EvalOutcome out;
  out.predictions = predict_all(test, model, c.model.mc_samples, c.model.seed, c.train.eval_threads);
  out.report = uncertainty_report(out.predictions);
  return out;
}

// ---------------------------------------------------------------------------
// Verbs

inline int cmd_synthesize(const RunConfig& c, std::ostream& out) {
  const LoadedData d = synthesize_data(c, load_sources(c));
  if (!c.expect_manifest_sha256.empty() && c.expect_manifest_sha256 != d.manifest_sha256) {
    throw FormatError("manifest digest " + d.manifest_sha256 + " differs from expected " +
                      c.expect_manifest_sha256);
  }
  if (c.task == "mnist") {
    out << "train bags: " << d.splits.at("train").size() << ", test bags: " << d.splits.at("test").size()
        << '\n';
  } else {
    out << "train bags: " << d.splits.at("train").size() << ", val bags: " << d.splits.at("val").size()
        << ", test bags: " << d.splits.at("test").size() << '\n';
  }
  for (const char* name : {"train", "val", "test"}) {
    if (!d.splits.count(name)) continue;
    const auto& ds = d.splits.at(name);
    const auto counts = ds.class_counts();
    out << name << ":";
    for (std::size_t k = 0; k < counts.size(); ++k) {
      out << (k ? "," : "") << ' ' << ds.class_names[k] << ' ' << counts[k];
    }
    if (c.task == "cifar" && std::all_of(counts.begin(), counts.end(), [&](auto n) { return n == counts[0]; })) {
      out << " (" << counts[0] << " bags per class)";
    }
    out << '\n';
  }
  out << "manifest: " << (c.out_dir / "manifest.json").string() << " sha256 " << d.manifest_sha256 << '\n';
  return kExitOk;
}

inline int cmd_train(const RunConfig& c, std::ostream& out) {
  const LoadedData d = load_or_synthesize(c);
  const TrainOutcome t = run_training(c, d, out, true);
  if (t.final_val_acc) {
    out << "final val accuracy (" << validation_split(d) << "): " << format_double(*t.final_val_acc) << '\n';
  }
  out << "checkpoint: " << (c.out_dir / "checkpoint.json").string() << '\n';
  return kExitOk;
}

inline int cmd_eval(const RunConfig& c, std::ostream& out) {
  const LoadedData d = load_or_synthesize(c);
  const CheckpointData ck = read_checkpoint(c.out_dir);
  ModelConfig mc = model_config_from_json(ck.manifest.at("model"));
  if (mc.backbone != c.model.backbone || mc.num_classes != c.model.num_classes) {
    throw FormatError("checkpoint was trained for a different task");
  }
  mc.mc_samples = c.model.mc_samples;
  mc.seed = c.model.seed;
  MilModel model(mc);
  decode_checkpoint(ck, model);

  const EvalOutcome e = run_eval(c, d, model);
  auto j = provenance(c, d.manifest_sha256);
  j["checkpoint_model"] = ck.manifest.at("model");
  j["mc_samples"] = c.model.mc_samples;
  j["report"] = to_json(e.report);
  write_text(c.out_dir / "eval.json", j.dump(1) + "\n");
  const std::string comment = csv_comment(c, d.manifest_sha256);
  export_attention(e.predictions, c.out_dir / "attention.csv", comment);
  export_histogram(e.report, c.out_dir / "uncertainty_hist.csv", comment);

  out << "test bags: " << e.report.bag_count << ", accuracy " << format_double(e.report.accuracy)
      << ", macro F1 " << format_double(e.report.macro_f1) << ", kappa "
      << format_double(e.report.quadratic_kappa) << '\n';
  out << "mean total uncertainty: correct "
      << (e.report.mean_std_correct ? format_double(*e.report.mean_std_correct) : "n/a") << ", incorrect "
      << (e.report.mean_std_incorrect ? format_double(*e.report.mean_std_incorrect) : "n/a") << '\n';
  return kExitOk;
}

struct AblationRow {
  std::string value;
  std::vector<double> accuracies;
  double mean = 0.0;
  std::optional<double> std_error;  // absent for a single seed
};

/// Sample mean and standard error (sample std / sqrt(n)).
inline AblationRow summarize_ablation(std::string value, std::vector<double> acc) {
  AblationRow r;
  r.value = std::move(value);
  r.accuracies = std::move(acc);
  const double n = static_cast<double>(r.accuracies.size());
  for (double a : r.accuracies) r.mean += a;
  r.mean /= n;
  if (r.accuracies.size() > 1) {
    double ss = 0.0;
    for (double a : r.accuracies) ss += (a - r.mean) * (a - r.mean);
    r.std_error = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  return r;
}

inline std::vector<std::string> ablation_values(const std::string& axis) {
  if (axis == "feature_dim") return {"32", "64", "128", "256"};
  if (axis == "inducing") return {"16", "32", "64", "128"};
  return {"relu", "sigmoid", "tanh"};
}

inline int cmd_ablate(const RunConfig& c, std::ostream& out) {
  if (c.task != "mnist") throw ConfigError({"ablate: only the mnist task is supported"});
  std::vector<AblationRow> rows;
  std::string digest;
  for (const std::string& value : ablation_values(c.axis)) {
    std::vector<double> acc;
    for (std::uint64_t seed : c.seeds) {
      Settings flags = c.resolved;
      flags["seed"] = std::to_string(seed);
      flags[c.axis == "inducing" ? "inducing_count" : c.axis == "activation" ? "gp_activation" : "feature_dim"] =
          value;
      flags["attention"] = "agp";
      RunConfig run = resolve_config({}, flags);
      run.out_dir = c.out_dir / "runs" / (c.axis + "-" + value + "-seed" + std::to_string(seed));
      const LoadedData d = load_or_synthesize(run);
      if (seed == c.seeds.front()) digest = d.manifest_sha256;
      std::ostringstream quiet;
      const TrainOutcome t = run_training(run, d, quiet, false);
      const EvalOutcome e = run_eval(run, d, t.model);
      acc.push_back(e.report.accuracy);
      out << c.axis << '=' << value << " seed " << seed << ": accuracy " << format_double(e.report.accuracy)
          << '\n' << std::flush;
    }
    rows.push_back(summarize_ablation(value, acc));
  }
  std::ostringstream csv;
  csv << "# " << csv_comment(c, digest) << '\n';
  csv << "axis,value,seeds,mean_accuracy,std_error,std_error_present\n";
  for (const auto& r : rows) {
    csv << c.axis << ',' << r.value << ',' << r.accuracies.size() << ',' << format_double(r.mean) << ','
        << (r.std_error ? format_double(*r.std_error) : "NA") << ',' << (r.std_error ? "true" : "false")
        << '\n';
  }
  write_text(c.out_dir / "ablation.csv", csv.str());
  out << "ablation: " << (c.out_dir / "ablation.csv").string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline std::string flag_name(const std::string& key) {
  std::string f = key;
  std::replace(f.begin(), f.end(), '_', '-');
  return "--" + f;
}

/// Runs one command. Output goes to `out`, diagnostics to `err`.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention Gaussian process multiple instance learning", "agp"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every command");

  struct Verb {
    CLI::App* app;
    std::map<std::string, std::string> values;
    std::string config_path;
  };
  std::map<std::string, Verb> verbs;
  const std::vector<std::pair<std::string, std::string>> verb_help = {
      {"synthesize", "Build the bag datasets and write manifest.json"},
      {"train", "Train a model and write train.jsonl and the checkpoint"},
      {"eval", "Score the checkpoint on the test bags; write eval.json and CSVs"},
      {"ablate", "Sweep one GP attention setting over seeds; write ablation.csv"}};
  for (const auto& [name, help] : verb_help) {
    Verb& v = verbs[name];
    v.app = app.add_subcommand(name, help);
    v.app->add_option("--config", v.config_path, "flat key = value settings file");
    for (const auto& spec : key_specs()) {
      v.app->add_option(flag_name(spec.key), v.values[spec.key],
                        std::string(spec.help) + " [" + spec.fallback + "]");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  for (auto& [name, v] : verbs) {
    if (!v.app->parsed()) continue;
    RunConfig c;
    try {
      std::vector<std::string> problems;
      Settings file_values;
      if (!v.config_path.empty()) {
        std::ifstream f(v.config_path);
        if (!f) {
          problems.push_back("cannot read config file " + v.config_path);
        } else {
          std::ostringstream ss;
          ss << f.rdbuf();
          file_values = parse_config_text(ss.str(), v.config_path, problems);
        }
      }
      Settings flag_values;
      for (const auto& spec : key_specs()) {
        if (v.app->count(flag_name(spec.key)) > 0) flag_values[spec.key] = v.values[spec.key];
      }
      try {
        c = resolve_config(file_values, flag_values);
      } catch (const ConfigError& e) {
        for (const auto& p : e.problems()) problems.push_back(p);
      }
      if (!problems.empty()) throw ConfigError(problems);
    } catch (const ConfigError& e) {
      err << "invalid configuration:\n";
      for (const auto& p : e.problems()) err << "  " << p << '\n';
      return kExitConfig;
    }

    try {
      if (name == "synthesize") return cmd_synthesize(c, out);
      if (name == "train") return cmd_train(c, out);
      if (name == "eval") return cmd_eval(c, out);
      return cmd_ablate(c, out);
    } catch (const ConfigError& e) {
      err << "invalid configuration:\n";
      for (const auto& p : e.problems()) err << "  " << p << '\n';
      return kExitConfig;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return kExitRuntime;
    }
  }
  return kExitConfig;
}

}  // namespace agp::cli
