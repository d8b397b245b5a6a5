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

/** @file checkpoint.hpp Model weights on disk.
 *
 * A checkpoint is a pair of files: `checkpoint.json` lists the format
 * version, the model config and every parameter's name, shape, byte offset
 * and element count; `checkpoint.bin` is the concatenation of all values as
 * little-endian float64.
 */

#pragma once

#include <agp/error.hpp>
#include <agp/model.hpp>

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace agp {

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void put_f64_le(std::vector<std::uint8_t>& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

inline double get_f64_le(const std::uint8_t* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline void write_bytes(const std::filesystem::path& path, const void* data, std::size_t size) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace detail

/// Serialized form of a model: (manifest, blob).
struct CheckpointData {
  nlohmann::ordered_json manifest;
  std::vector<std::uint8_t> blob;
};

inline CheckpointData encode_checkpoint(const MilModel& model,
                                        const nlohmann::ordered_json& extra = nullptr) {
  CheckpointData out;
  out.manifest["format_version"] = kCheckpointVersion;
  out.manifest["model"] = to_json(model.config());
  auto params = nlohmann::ordered_json::array();
  for (const Parameter& p : model.parameters()) {
    params.push_back({{"name", p.name()},
                      {"shape", p.shape()},
                      {"offset", out.blob.size()},
                      {"count", p.numel()}});
    for (double v : p.data()) detail::put_f64_le(out.blob, v);
  }
  out.manifest["params"] = std::move(params);
  out.manifest["blob_bytes"] = out.blob.size();
  if (!extra.is_null()) out.manifest["run"] = extra;
  return out;
}

/// Copies values from a serialized checkpoint into `model`. The checkpoint
/// must describe exactly the model's parameters.
inline void decode_checkpoint(const CheckpointData& data, MilModel& model) {
  const auto& m = data.manifest;
  if (!m.contains("format_version") || m["format_version"] != kCheckpointVersion) {
    throw FormatError("checkpoint format version " +
                      (m.contains("format_version") ? m["format_version"].dump() : "missing") +
                      ", expected " + std::to_string(kCheckpointVersion));
  }
  const auto& entries = m.at("params");
  const auto& params = model.parameters();
  if (entries.size() != params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(entries.size()) + " parameters, model has " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = entries[i];
    const std::string name = e.at("name").get<std::string>();
    const Shape shape = e.at("shape").get<Shape>();
    if (name != params[i].name() || shape != params[i].shape()) {
      throw FormatError("checkpoint parameter " + std::to_string(i) + " is " + name + " " +
                        detail::shape_string(shape) + ", model expects " + params[i].name() + " " +
                        detail::shape_string(params[i].shape()));
    }
    const std::size_t offset = e.at("offset").get<std::size_t>();
    const std::size_t count = e.at("count").get<std::size_t>();
    if (count != params[i].numel() || offset + 8 * count > data.blob.size()) {
      throw FormatError("checkpoint parameter " + name + " lies outside the blob");
    }
    auto& dst = params[i].data();
    for (std::size_t k = 0; k < count; ++k) dst[k] = detail::get_f64_le(data.blob.data() + offset + 8 * k);
  }
}

inline void save_checkpoint(const MilModel& model, const std::filesystem::path& dir,
                            const nlohmann::ordered_json& extra = nullptr) {
  std::filesystem::create_directories(dir);
  const CheckpointData data = encode_checkpoint(model, extra);
  detail::write_bytes(dir / "checkpoint.bin", data.blob.data(), data.blob.size());
  const std::string text = data.manifest.dump(2) + "\n";
  detail::write_bytes(dir / "checkpoint.json", text.data(), text.size());
}

inline CheckpointData read_checkpoint(const std::filesystem::path& dir) {
  CheckpointData data;
  std::ifstream jf(dir / "checkpoint.json");
  if (!jf) throw FormatError("cannot open " + (dir / "checkpoint.json").string());
  try {
    data.manifest = nlohmann::ordered_json::parse(jf);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "checkpoint.json").string() + ": " + e.what());
  }
  std::ifstream bf(dir / "checkpoint.bin", std::ios::binary);
  if (!bf) throw FormatError("cannot open " + (dir / "checkpoint.bin").string());
  data.blob.assign(std::istreambuf_iterator<char>(bf), std::istreambuf_iterator<char>());
  if (data.manifest.contains("blob_bytes") && data.manifest["blob_bytes"] != data.blob.size()) {
    throw FormatError("checkpoint.bin has " + std::to_string(data.blob.size()) + " bytes, manifest says " +
                      data.manifest["blob_bytes"].dump());
  }
  return data;
}

/// Builds the model described by a checkpoint directory and loads its weights.
inline MilModel load_checkpoint(const std::filesystem::path& dir) {
  const CheckpointData data = read_checkpoint(dir);
  MilModel model(model_config_from_json(data.manifest.at("model")));
  decode_checkpoint(data, model);
  return model;
}

}  // namespace agp
