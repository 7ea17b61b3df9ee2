/*
 * Copyright 2026 The mriseq Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

// Checkpoint file layout (all integers little-endian u32):
//
//   "MRSQ1"
//   config_len, config_len bytes of UTF-8 JSON (ModelConfig)
//   block_count
//   per block: name_len, name bytes, ndim, ndim dims, prod(dims) float32 LE
//
// Blocks are the parameters in model order followed by the batch-norm
// running statistics ("<norm>.running_mean", "<norm>.running_var").

#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mriseq/models.hpp"
#include "mriseq/volume.hpp"

namespace mriseq {

inline constexpr char kCheckpointMagic[5] = {'M', 'R', 'S', 'Q', '1'};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const std::uint32_t le = to_le(v);
  os.write(reinterpret_cast<const char*>(&le), 4);
}

class ByteReader {
 public:
  ByteReader(std::string bytes, std::string what) : b_(std::move(bytes)), what_(std::move(what)) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, b_.data() + pos_, 4);
    pos_ += 4;
    return to_le(v);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw DataError("corrupt checkpoint '" + what_ + "': truncated");
  }
  std::string b_;
  std::string what_;
  std::size_t pos_ = 0;
};

template <typename T>
void put_block(std::ostream& os, const std::string& name, const ad::Shape& shape, std::span<const T> values) {
  put_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(os, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put_u32(os, static_cast<std::uint32_t>(d));
  std::vector<float> f(values.begin(), values.end());
  write_le_floats(os, f);
}

}  // namespace detail

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write checkpoint '" + path.string() + "'");
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::string cfg = nlohmann::json(model.config()).dump();
  detail::put_u32(os, static_cast<std::uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  detail::put_u32(os, static_cast<std::uint32_t>(model.parameters().size() + 2 * model.buffers().size()));
  for (const auto& p : model.parameters())
    detail::put_block<T>(os, p.name, p.tensor.shape(), p.tensor.data());
  for (const auto& b : model.buffers()) {
    const ad::Shape s{b.stats.running_mean.size()};
    detail::put_block<T>(os, b.name + ".running_mean", s, b.stats.running_mean);
    detail::put_block<T>(os, b.name + ".running_var", s, b.stats.running_var);
  }
  if (!os) throw DataError("write failed for checkpoint '" + path.string() + "'");
}

/// Reads the embedded configuration only.
inline ModelConfig read_checkpoint_config(detail::ByteReader& r, const std::string& what) {
  if (r.bytes(5) != std::string(kCheckpointMagic, 5))
    throw DataError("'" + what + "' is not a checkpoint (bad magic)");
  const std::string cfg = r.bytes(r.u32());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(cfg);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint '" + what + "': " + e.what());
  }
  ModelConfig c;
  try {
    c = j.get<ModelConfig>();
    c.validate();
  } catch (const UsageError& e) {
    throw DataError("checkpoint '" + what + "' has an invalid config: " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint '" + what + "': " + e.what());
  }
  return c;
}

/// Loads a checkpoint; when `expected` is given the embedded config must match it.
template <typename T = float>
Model<T> load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected = std::nullopt) {
  detail::ByteReader r(detail::slurp(path), path.string());
  const ModelConfig cfg = read_checkpoint_config(r, path.string());
  if (expected && !(*expected == cfg))
    throw DataError("checkpoint '" + path.string() + "' config mismatch: file has " +
                    nlohmann::json(cfg).dump() + ", expected " + nlohmann::json(*expected).dump());
  Model<T> model(cfg, 0);
  const std::uint32_t count = r.u32();
  if (count != model.parameters().size() + 2 * model.buffers().size())
    throw DataError("corrupt checkpoint '" + path.string() + "': unexpected block count");
  auto read_block = [&](const std::string& want, std::span<T> dst) {
    const std::string name = r.bytes(r.u32());
    if (name != want)
      throw DataError("corrupt checkpoint '" + path.string() + "': expected block '" + want + "', found '" + name + "'");
    const std::uint32_t nd = r.u32();
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < nd; ++i) n *= r.u32();
    if (n != dst.size())
      throw DataError("corrupt checkpoint '" + path.string() + "': shape mismatch for '" + name + "'");
    const auto f = detail::decode_le_floats(r.bytes(4 * n));
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<T>(f[i]);
  };
  for (auto& p : model.parameters()) read_block(p.name, p.tensor.data());
  for (auto& b : model.buffers()) {
    read_block(b.name + ".running_mean", b.stats.running_mean);
    read_block(b.name + ".running_var", b.stats.running_var);
  }
  if (!r.done()) throw DataError("corrupt checkpoint '" + path.string() + "': trailing bytes");
  return model;
}

}  // namespace mriseq
