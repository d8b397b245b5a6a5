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

/** @file data.hpp Image sources and MIL bag synthesis.
 *
 * MNIST bags: every image of a split is used exactly once, in groups of
 * nine; a bag is positive iff it holds at least one '0'.
 *
 * CIFAR-10 bags: three bag classes (negative, airplane, car) in equal
 * numbers. A positive bag draws its count of positive images from
 * Binomial(9, 1/9) conditioned on being at least one, which puts about
 * 5.67% of all instances in each positive class.
 */

#pragma once

#include <agp/digest.hpp>
#include <agp/error.hpp>
#include <agp/rng.hpp>
#include <agp/tensor.hpp>

#include <json.hpp>
#include <zlib.h>

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

namespace agp {

/// Decoded images of one source split, kept as raw bytes.
struct ImageSet {
  std::size_t channels = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> pixels;  // image-major, then channel planes, row-major
  std::vector<std::uint8_t> labels;
  std::vector<std::string> files;
  std::string sha256;  // over the decoded bytes of all files, in order

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t image_size() const noexcept { return channels * rows * cols; }
};

/// Whole file, transparently gunzipped when compressed.
inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw std::runtime_error("cannot open " + path.string() + ": no such file");
  }
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> buf{};
  for (;;) {
    const int n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (n < 0) {
      gzclose(f);
      throw FormatError("read error (corrupt gzip stream?) in " + path.string());
    }
    if (n == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  gzclose(f);
  return out;
}

namespace detail {

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

}  // namespace detail

/// IDX image + label pair (MNIST layout).
inline ImageSet parse_idx(const std::filesystem::path& images_path,
                          const std::filesystem::path& labels_path) {
  const auto img = read_file_bytes(images_path);
  const auto lab = read_file_bytes(labels_path);
  if (img.size() < 16) throw FormatError(images_path.string() + ": truncated IDX header");
  if (lab.size() < 8) throw FormatError(labels_path.string() + ": truncated IDX header");
  if (detail::read_be32(img, 0) != 0x00000803) {
    throw FormatError(images_path.string() + ": bad magic for an IDX image file");
  }
  if (detail::read_be32(lab, 0) != 0x00000801) {
    throw FormatError(labels_path.string() + ": bad magic for an IDX label file");
  }
  const std::size_t n = detail::read_be32(img, 4);
  const std::size_t rows = detail::read_be32(img, 8);
  const std::size_t cols = detail::read_be32(img, 12);
  const std::size_t nl = detail::read_be32(lab, 4);
  if (img.size() < 16 + n * rows * cols) {
    throw FormatError(images_path.string() + ": truncated, expected " +
                      std::to_string(16 + n * rows * cols) + " bytes, found " +
                      std::to_string(img.size()));
  }
  if (lab.size() < 8 + nl) {
    throw FormatError(labels_path.string() + ": truncated, expected " + std::to_string(8 + nl) +
                      " bytes, found " + std::to_string(lab.size()));
  }
  if (n != nl) {
    throw FormatError("image/label count mismatch: " + std::to_string(n) + " images vs " +
                      std::to_string(nl) + " labels");
  }
  ImageSet set;
  set.channels = 1;
  set.rows = rows;
  set.cols = cols;
  set.pixels.assign(img.begin() + 16, img.begin() + 16 + static_cast<std::ptrdiff_t>(n * rows * cols));
  set.labels.assign(lab.begin() + 8, lab.begin() + 8 + static_cast<std::ptrdiff_t>(nl));
  set.files = {images_path.filename().string(), labels_path.filename().string()};
  std::vector<std::uint8_t> both = img;
  both.insert(both.end(), lab.begin(), lab.end());
  set.sha256 = sha256_hex(both);
  return set;
}

/// One or more CIFAR-10 binary batches (records of 1 label byte followed by
/// 3072 pixel bytes: R, G, B planes of 32x32), concatenated in order.
inline ImageSet parse_cifar(const std::vector<std::filesystem::path>& paths) {
  constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
  ImageSet set;
  set.channels = 3;
  set.rows = 32;
  set.cols = 32;
  std::vector<std::uint8_t> all;
  for (const auto& path : paths) {
    const auto bytes = read_file_bytes(path);
    if (bytes.empty() || bytes.size() % kRecord != 0) {
      throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) +
                        " is not a positive multiple of the 3073-byte record length");
    }
    const std::size_t n = bytes.size() / kRecord;
    for (std::size_t r = 0; r < n; ++r) {
      const std::uint8_t label = bytes[r * kRecord];
      if (label > 9) {
        throw FormatError(path.string() + ": record " + std::to_string(r) + " has label " +
                          std::to_string(label));
      }
      set.labels.push_back(label);
      set.pixels.insert(set.pixels.end(), bytes.begin() + static_cast<std::ptrdiff_t>(r * kRecord + 1),
                        bytes.begin() + static_cast<std::ptrdiff_t>((r + 1) * kRecord));
    }
    set.files.push_back(path.filename().string());
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  set.sha256 = sha256_hex(all);
  return set;
}

inline ImageSet parse_cifar(const std::filesystem::path& path) {
  return parse_cifar(std::vector<std::filesystem::path>{path});
}

// ---------------------------------------------------------------------------
// Bags

struct Instance {
  std::shared_ptr<const ImageSet> source;
  std::size_t index = 0;   // position within the source split
  int true_label = 0;      // instance label in bag-label space; never used for training
  int source_class = 0;    // original dataset class

  /// [C x H x W] in [0, 1].
  Tensor pixels() const {
    const std::size_t sz = source->image_size();
    std::vector<double> v(sz);
    const std::uint8_t* p = source->pixels.data() + index * sz;
    for (std::size_t i = 0; i < sz; ++i) v[i] = p[i] / 255.0;
    return Tensor({source->channels, source->rows, source->cols}, std::move(v));
  }
};

struct Bag {
  std::string id;
  int label = 0;
  std::vector<Instance> instances;

  std::size_t size() const noexcept { return instances.size(); }

  /// [N x C x H x W] in [0, 1].
  Tensor stack() const {
    if (instances.empty()) throw DimensionError("bag " + id + " has no instances");
    const auto& src = *instances.front().source;
    const std::size_t sz = src.image_size();
    std::vector<double> v(instances.size() * sz);
    for (std::size_t i = 0; i < instances.size(); ++i) {
      const std::uint8_t* p = instances[i].source->pixels.data() + instances[i].index * sz;
      for (std::size_t k = 0; k < sz; ++k) v[i * sz + k] = p[k] / 255.0;
    }
    return Tensor({instances.size(), src.channels, src.rows, src.cols}, std::move(v));
  }
};

struct BagDataset {
  std::string task;
  std::string split;
  std::uint64_t seed = 0;
  int num_classes = 2;
  std::vector<std::string> class_names;
  std::vector<Bag> bags;
  std::map<std::string, std::string> provenance;  // file name -> sha256

  std::size_t size() const noexcept { return bags.size(); }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c(static_cast<std::size_t>(num_classes), 0);
    for (const auto& b : bags) ++c.at(static_cast<std::size_t>(b.label));
    return c;
  }

  std::size_t instance_count() const {
    std::size_t n = 0;
    for (const auto& b : bags) n += b.size();
    return n;
  }
};

/// Bag label semantics: negative iff no instance is positive; for the
/// CIFAR task a positive bag holds only one positive class.
inline bool bag_label_consistent(const Bag& bag) {
  if (bag.instances.empty()) return false;
  std::vector<int> present;
  for (const auto& inst : bag.instances)
    if (inst.true_label != 0 &&
        std::find(present.begin(), present.end(), inst.true_label) == present.end())
      present.push_back(inst.true_label);
  if (bag.label == 0) return present.empty();
  return present.size() == 1 && present.front() == bag.label;
}

struct MnistBags {
  BagDataset train;
  BagDataset test;
};

struct CifarBags {
  BagDataset train;
  BagDataset val;
  BagDataset test;
};

inline constexpr std::size_t kBagSize = 9;
inline constexpr int kCifarAirplane = 0;
inline constexpr int kCifarAutomobile = 1;

namespace detail {

inline std::string bag_id(const std::string& split, std::size_t i) {
  std::string num = std::to_string(i);
  return split + "-" + std::string(num.size() < 6 ? 6 - num.size() : 0, '0') + num;
}

inline Instance mnist_instance(const std::shared_ptr<const ImageSet>& src, std::size_t idx) {
  const int digit = src->labels[idx];
  return {src, idx, digit == 0 ? 1 : 0, digit};
}

inline int cifar_role(int cls) {
  if (cls == kCifarAirplane) return 1;
  if (cls == kCifarAutomobile) return 2;
  return 0;
}

inline Instance cifar_instance(const std::shared_ptr<const ImageSet>& src, std::size_t idx) {
  const int cls = src->labels[idx];
  return {src, idx, cifar_role(cls), cls};
}

inline BagDataset mnist_split(const std::shared_ptr<const ImageSet>& src, const std::string& split,
                              std::uint64_t seed, Rng rng) {
  BagDataset ds;
  ds.task = "mnist";
  ds.split = split;
  ds.seed = seed;
  ds.num_classes = 2;
  ds.class_names = {"negative", "positive"};
  for (std::size_t i = 0; i < src->files.size(); ++i) ds.provenance[src->files[i]] = src->sha256;
  std::vector<std::size_t> order(src->size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  for (std::size_t start = 0; start < order.size(); start += kBagSize) {
    Bag bag;
    bag.id = bag_id(split, ds.bags.size());
    const std::size_t end = std::min(order.size(), start + kBagSize);
    for (std::size_t k = start; k < end; ++k) bag.instances.push_back(mnist_instance(src, order[k]));
    bag.label = std::any_of(bag.instances.begin(), bag.instances.end(),
                            [](const Instance& i) { return i.true_label == 1; })
                    ? 1
                    : 0;
    ds.bags.push_back(std::move(bag));
  }
  return ds;
}

/// Shuffled index pool drawn without replacement; reshuffled and reused
/// once exhausted.
class DrawPool {
 public:
  DrawPool(std::vector<std::size_t> items, Rng rng) : items_(std::move(items)), rng_(rng) { refill(); }

  std::size_t distinct() const noexcept { return items_.size(); }
  std::size_t cycles() const noexcept { return cycles_; }

  std::size_t draw() {
    if (next_ == items_.size()) refill();
    return items_[next_++];
  }

 private:
  void refill() {
    rng_.shuffle(std::span<std::size_t>(items_));
    next_ = 0;
    ++cycles_;
  }

  std::vector<std::size_t> items_;
  Rng rng_;
  std::size_t next_ = 0;
  std::size_t cycles_ = 0;
};

inline std::size_t cifar_positive_count(Rng& rng) {
  for (;;) {
    std::size_t k = 0;
    for (std::size_t i = 0; i < kBagSize; ++i) k += rng.below(9) == 0 ? 1 : 0;
    if (k >= 1) return k;
  }
}

inline BagDataset cifar_split(const std::shared_ptr<const ImageSet>& src, const std::string& split,
                              std::size_t bags_per_class, std::uint64_t seed, Rng rng) {
  BagDataset ds;
  ds.task = "cifar";
  ds.split = split;
  ds.seed = seed;
  ds.num_classes = 3;
  ds.class_names = {"negative", "airplane", "car"};
  for (const auto& f : src->files) ds.provenance[f] = src->sha256;

  std::array<std::vector<std::size_t>, 3> by_role;
  for (std::size_t i = 0; i < src->size(); ++i) by_role[cifar_role(src->labels[i])].push_back(i);
  for (int role = 0; role < 3; ++role) {
    if (by_role[role].size() < kBagSize) {
      throw std::runtime_error("insufficient source images in CIFAR " + split + " split: class " +
                               ds.class_names[role] + " has " +
                               std::to_string(by_role[role].size()) + " images");
    }
  }
  std::array<DrawPool, 3> pools{DrawPool(by_role[0], rng.split("pool-negative")),
                                DrawPool(by_role[1], rng.split("pool-airplane")),
                                DrawPool(by_role[2], rng.split("pool-car"))};

  std::vector<int> labels;
  for (int c = 0; c < 3; ++c) labels.insert(labels.end(), bags_per_class, c);
  Rng order_rng = rng.split("bag-order");
  order_rng.shuffle(std::span<int>(labels));
  Rng count_rng = rng.split("positive-count");
  Rng slot_rng = rng.split("slot-order");

  for (int label : labels) {
    const std::size_t positives = label == 0 ? 0 : cifar_positive_count(count_rng);
    std::vector<std::size_t> picked;
    auto take = [&](int role, std::size_t count) {
      for (std::size_t k = 0; k < count; ++k) {
        std::size_t idx = pools[role].draw();
        while (std::find(picked.begin(), picked.end(), idx) != picked.end()) idx = pools[role].draw();
        picked.push_back(idx);
      }
    };
    take(label, positives);
    take(0, kBagSize - positives);
    slot_rng.shuffle(std::span<std::size_t>(picked));
    Bag bag;
    bag.id = bag_id(split, ds.bags.size());
    bag.label = label;
    for (std::size_t idx : picked) bag.instances.push_back(cifar_instance(src, idx));
    ds.bags.push_back(std::move(bag));
  }
  return ds;
}

}  // namespace detail

/// Groups all train and all test images into bags of nine. 60000 training
/// images give 6666 full bags and one bag of 6; 10000 test images give
/// 1111 full bags and one bag of 1.
inline MnistBags make_mnist_bags(std::shared_ptr<const ImageSet> train,
                                 std::shared_ptr<const ImageSet> test, std::uint64_t seed) {
  const Rng root = Rng(seed).split("mnist-bags");
  return {detail::mnist_split(train, "train", seed, root.split("train")),
          detail::mnist_split(test, "test", seed, root.split("test"))};
}

inline MnistBags make_mnist_bags(const ImageSet& train, const ImageSet& test, std::uint64_t seed) {
  return make_mnist_bags(std::make_shared<const ImageSet>(train),
                         std::make_shared<const ImageSet>(test), seed);
}

struct CifarBagCounts {
  std::size_t train = 1481;
  std::size_t val = 370;
  std::size_t test = 370;
};

inline CifarBags make_cifar_bags(std::shared_ptr<const ImageSet> train,
                                 std::shared_ptr<const ImageSet> val,
                                 std::shared_ptr<const ImageSet> test, std::uint64_t seed,
                                 CifarBagCounts counts = {}) {
  const Rng root = Rng(seed).split("cifar-bags");
  return {detail::cifar_split(train, "train", counts.train, seed, root.split("train")),
          detail::cifar_split(val, "val", counts.val, seed, root.split("val")),
          detail::cifar_split(test, "test", counts.test, seed, root.split("test"))};
}

inline CifarBags make_cifar_bags(const ImageSet& train, const ImageSet& val, const ImageSet& test,
                                 std::uint64_t seed, CifarBagCounts counts = {}) {
  return make_cifar_bags(std::make_shared<const ImageSet>(train),
                         std::make_shared<const ImageSet>(val),
                         std::make_shared<const ImageSet>(test), seed, counts);
}

// ---------------------------------------------------------------------------
// Source discovery

/// Source splits of one task keyed by split name.
using SourceSplits = std::map<std::string, std::shared_ptr<const ImageSet>>;

namespace detail {

inline std::filesystem::path find_variant(const std::filesystem::path& dir, const std::string& stem) {
  std::string dotted = stem;
  if (const auto pos = dotted.find("-idx"); pos != std::string::npos) dotted.replace(pos, 4, ".idx");
  for (const std::string& name : {stem, stem + ".gz", dotted, dotted + ".gz"}) {
    const auto p = dir / name;
    if (std::filesystem::exists(p)) return p;
  }
  throw std::runtime_error("missing file " + (dir / stem).string() + " (or .gz)");
}

}  // namespace detail

inline SourceSplits load_mnist_sources(const std::filesystem::path& dir) {
  using detail::find_variant;
  SourceSplits s;
  s["train"] = std::make_shared<const ImageSet>(parse_idx(
      find_variant(dir, "train-images-idx3-ubyte"), find_variant(dir, "train-labels-idx1-ubyte")));
  s["test"] = std::make_shared<const ImageSet>(parse_idx(
      find_variant(dir, "t10k-images-idx3-ubyte"), find_variant(dir, "t10k-labels-idx1-ubyte")));
  return s;
}

/// data_batch_1..4 -> train, data_batch_5 -> val, test_batch -> test.
inline SourceSplits load_cifar_sources(const std::filesystem::path& dir) {
  auto file = [&](const std::string& name) {
    const auto p = dir / name;
    if (std::filesystem::exists(p)) return p;
    const auto nested = dir / "cifar-10-batches-bin" / name;
    if (std::filesystem::exists(nested)) return nested;
    throw std::runtime_error("missing file " + p.string());
  };
  SourceSplits s;
  s["train"] = std::make_shared<const ImageSet>(
      parse_cifar({file("data_batch_1.bin"), file("data_batch_2.bin"), file("data_batch_3.bin"),
                   file("data_batch_4.bin")}));
  s["val"] = std::make_shared<const ImageSet>(parse_cifar({file("data_batch_5.bin")}));
  s["test"] = std::make_shared<const ImageSet>(parse_cifar({file("test_batch.bin")}));
  return s;
}

// ---------------------------------------------------------------------------
// Manifest

inline constexpr int kManifestVersion = 1;

/// JSON description of a synthesized dataset: enough to rebuild every bag
/// from the source files without re-randomizing.
inline nlohmann::ordered_json make_manifest(const std::string& task, std::uint64_t seed,
                                            const std::vector<const BagDataset*>& splits,
                                            const SourceSplits& sources) {
  nlohmann::ordered_json m;
  m["format_version"] = kManifestVersion;
  m["task"] = task;
  m["seed"] = seed;
  m["bag_size"] = kBagSize;
  if (task == "cifar") {
    m["positive_count_policy"] = "binomial(9, 1/9) conditioned on >= 1";
    m["split_sources"] = {{"train", "data_batch_1..4"}, {"val", "data_batch_5"}, {"test", "test_batch"}};
  }
  nlohmann::ordered_json src;
  for (const auto& [name, set] : sources) {
    src[name] = {{"files", set->files}, {"sha256", set->sha256}, {"count", set->size()}};
  }
  m["sources"] = src;
  nlohmann::ordered_json sp;
  for (const BagDataset* ds : splits) {
    nlohmann::ordered_json bags = nlohmann::ordered_json::array();
    for (const auto& b : ds->bags) {
      std::vector<std::size_t> idx;
      std::vector<int> labels;
      for (const auto& inst : b.instances) {
        idx.push_back(inst.index);
        labels.push_back(inst.true_label);
      }
      bags.push_back({{"bag_id", b.id}, {"label", b.label}, {"sources", idx}, {"instance_labels", labels}});
    }
    sp[ds->split] = {{"class_names", ds->class_names}, {"class_counts", ds->class_counts()}, {"bags", bags}};
  }
  m["splits"] = sp;
  return m;
}

/// Rebuilds the datasets listed in a manifest. Source digests must match.
inline std::map<std::string, BagDataset> datasets_from_manifest(const nlohmann::ordered_json& m,
                                                                const SourceSplits& sources) {
  if (m.value("format_version", 0) != kManifestVersion) {
    throw FormatError("unsupported manifest format version");
  }
  const std::string task = m.at("task").get<std::string>();
  for (const auto& [name, entry] : m.at("sources").items()) {
    auto it = sources.find(name);
    if (it == sources.end()) throw FormatError("manifest references unknown source split " + name);
    if (entry.at("sha256").get<std::string>() != it->second->sha256) {
      throw FormatError("source digest mismatch for split " + name + ": manifest has " +
                        entry.at("sha256").get<std::string>() + ", files have " + it->second->sha256);
    }
  }
  std::map<std::string, BagDataset> out;
  for (const auto& [split, body] : m.at("splits").items()) {
    const auto& src = sources.at(split);
    BagDataset ds;
    ds.task = task;
    ds.split = split;
    ds.seed = m.at("seed").get<std::uint64_t>();
    ds.class_names = body.at("class_names").get<std::vector<std::string>>();
    ds.num_classes = static_cast<int>(ds.class_names.size());
    for (const auto& f : src->files) ds.provenance[f] = src->sha256;
    for (const auto& jb : body.at("bags")) {
      Bag bag;
      bag.id = jb.at("bag_id").get<std::string>();
      bag.label = jb.at("label").get<int>();
      for (std::size_t idx : jb.at("sources").get<std::vector<std::size_t>>()) {
        if (idx >= src->size()) throw FormatError("manifest bag " + bag.id + " indexes past its source");
        bag.instances.push_back(task == "mnist" ? detail::mnist_instance(src, idx)
                                                : detail::cifar_instance(src, idx));
      }
      ds.bags.push_back(std::move(bag));
    }
    out[split] = std::move(ds);
  }
  return out;
}

}  // namespace agp
