// Copyright 2026 The AIM Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Checkpoint directories: manifest.json (array names, shapes, dtypes, byte
// offsets and free-form metadata) next to params.bin, a single little-endian
// IEEE-754 blob.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "aim/errors.hpp"
#include "aim/tensor.hpp"
#include "json.hpp"

namespace aim {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

template <class S>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
  return std::is_same_v<S, double> ? "float64" : "float32";
}

class CheckpointWriter {
 public:
  template <class S>
  void add(const std::string& name, const Shape& shape, std::span<const S> values) {
    if (numel(shape) != values.size()) throw CheckpointError("array '" + name + "' does not match its shape");
    const std::size_t offset = blob_.size();
    blob_.resize(offset + values.size_bytes());
    std::memcpy(blob_.data() + offset, values.data(), values.size_bytes());
    entries_.push_back({{"name", name}, {"shape", shape}, {"dtype", dtype_name<S>()},
                        {"offset", offset}, {"bytes", values.size_bytes()}});
  }

  template <class S>
  void add(const std::string& name, const Tensor<S>& t) {
    add<S>(name, t.shape(), t.data());
  }

  // Writes into `dir` (created if needed); `meta` lands under "meta".
  void write(const std::filesystem::path& dir, const nlohmann::json& meta) const {
    std::filesystem::create_directories(dir);
    {
      std::ofstream bin(dir / "params.bin", std::ios::binary | std::ios::trunc);
      bin.write(reinterpret_cast<const char*>(blob_.data()), static_cast<std::streamsize>(blob_.size()));
      if (!bin) throw CheckpointError("cannot write " + (dir / "params.bin").string());
    }
    nlohmann::json manifest{{"format", "aim-checkpoint/1"},
                            {"byte_order", "little"},
                            {"blob", "params.bin"},
                            {"blob_bytes", blob_.size()},
                            {"arrays", entries_},
                            {"meta", meta}};
    std::ofstream js(dir / "manifest.json", std::ios::trunc);
    js << manifest.dump(2) << '\n';
    if (!js) throw CheckpointError("cannot write " + (dir / "manifest.json").string());
  }

 private:
  std::vector<unsigned char> blob_;
  nlohmann::json entries_ = nlohmann::json::array();
};

class CheckpointReader {
 public:
  explicit CheckpointReader(const std::filesystem::path& dir) {
    std::ifstream js(dir / "manifest.json");
    if (!js) throw CheckpointError("no manifest.json in " + dir.string());
    try {
      manifest_ = nlohmann::json::parse(js);
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError("unreadable manifest in " + dir.string() + ": " + e.what());
    }
    const std::size_t expected = manifest_.at("blob_bytes");
    std::ifstream bin(dir / manifest_.value("blob", "params.bin"), std::ios::binary | std::ios::ate);
    if (!bin) throw CheckpointError("no parameter blob in " + dir.string());
    const auto actual = static_cast<std::size_t>(bin.tellg());
    if (actual != expected) {
      throw CheckpointError("parameter blob holds " + std::to_string(actual) + " bytes, manifest declares " +
                            std::to_string(expected));
    }
    blob_.resize(actual);
    bin.seekg(0);
    bin.read(reinterpret_cast<char*>(blob_.data()), static_cast<std::streamsize>(actual));
    for (const auto& e : manifest_.at("arrays")) {
      const std::size_t off = e.at("offset"), bytes = e.at("bytes");
      if (off + bytes > blob_.size()) throw CheckpointError("array '" + e.at("name").get<std::string>() + "' overruns the blob");
    }
  }

  const nlohmann::json& meta() const { return manifest_.at("meta"); }
  const nlohmann::json& manifest() const { return manifest_; }

  bool has(const std::string& name) const { return find(name) != nullptr; }

  template <class S>
  std::vector<S> read(const std::string& name, const Shape& expected_shape) const {
    const nlohmann::json* e = find(name);
    if (!e) throw CheckpointError("checkpoint has no array '" + name + "'");
    Shape shape = (*e).at("shape").get<Shape>();
    if (shape != expected_shape) {
      throw CheckpointError("parameter '" + name + "' has shape " + shape_str(shape) + " in the checkpoint but " +
                            shape_str(expected_shape) + " in the model");
    }
    const std::string dtype = e->at("dtype");
    const std::size_t off = e->at("offset"), n = numel(shape);
    std::vector<S> out(n);
    if (dtype == dtype_name<S>()) {
      if (e->at("bytes").get<std::size_t>() != n * sizeof(S)) throw CheckpointError("array '" + name + "' size mismatch");
      std::memcpy(out.data(), blob_.data() + off, n * sizeof(S));
    } else if (dtype == "float64") {
      std::vector<double> tmp(n);
      std::memcpy(tmp.data(), blob_.data() + off, n * sizeof(double));
      for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<S>(tmp[i]);
    } else if (dtype == "float32") {
      std::vector<float> tmp(n);
      std::memcpy(tmp.data(), blob_.data() + off, n * sizeof(float));
      for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<S>(tmp[i]);
    } else {
      throw CheckpointError("array '" + name + "' has unsupported dtype " + dtype);
    }
    return out;
  }

 private:
  const nlohmann::json* find(const std::string& name) const {
    for (const auto& e : manifest_.at("arrays"))
      if (e.at("name") == name) return &e;
    return nullptr;
  }

  nlohmann::json manifest_;
  std::vector<unsigned char> blob_;
};

}  // namespace aim
