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

// Volume3D and its on-disk sidecar format.
//
// A volume is stored as two files sharing a stem:
//   <name>.vh    UTF-8 JSON object {"dims":[nx,ny,nz], "spacing":[sx,sy,sz],
//                "orientation":["R→L","P→A","I→S"]}
//   <name>.vraw  nx*ny*nz little-endian IEEE-754 float32, x fastest.
// Voxel (ix,iy,iz) lives at ix + nx*(iy + ny*iz).

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mriseq/error.hpp"

namespace mriseq {

using Dims = std::array<std::size_t, 3>;
using Spacing = std::array<double, 3>;

/// Direction of increasing index along one array axis, e.g. RL means the
/// index grows from the patient's right towards the left.
enum class AxisCode : std::uint8_t { RL, LR, AP, PA, IS, SI };

using Orientation = std::array<AxisCode, 3>;

/// Orientation every preprocessed volume is brought into.
inline constexpr Orientation kCanonicalOrientation{AxisCode::RL, AxisCode::PA, AxisCode::IS};

/// 0 = left/right, 1 = anterior/posterior, 2 = inferior/superior.
constexpr int anatomical_axis(AxisCode c) { return static_cast<int>(c) / 2; }

constexpr AxisCode flipped(AxisCode c) {
  return static_cast<AxisCode>(static_cast<int>(c) ^ 1);
}

inline std::string axis_code_name(AxisCode c) {
  switch (c) {
    case AxisCode::RL: return "R→L";
    case AxisCode::LR: return "L→R";
    case AxisCode::AP: return "A→P";
    case AxisCode::PA: return "P→A";
    case AxisCode::IS: return "I→S";
    case AxisCode::SI: return "S→I";
  }
  return "?";
}

/// Accepts "R→L" as written by this toolkit and the ASCII spelling "R->L".
inline AxisCode parse_axis_code(std::string_view s) {
  std::string t(s);
  const std::string arrow = "→";
  if (auto p = t.find(arrow); p != std::string::npos) t.replace(p, arrow.size(), "->");
  static constexpr std::array<std::pair<std::string_view, AxisCode>, 6> table{{
      {"R->L", AxisCode::RL}, {"L->R", AxisCode::LR}, {"A->P", AxisCode::AP},
      {"P->A", AxisCode::PA}, {"I->S", AxisCode::IS}, {"S->I", AxisCode::SI}}};
  for (auto [name, code] : table)
    if (t == name) return code;
  throw DataError("unknown orientation code '" + std::string(s) + "'");
}

/// True when the three codes cover left/right, anterior/posterior and
/// inferior/superior exactly once each.
constexpr bool is_axis_complete(const Orientation& o) {
  bool seen[3] = {false, false, false};
  for (auto c : o) {
    const int a = anatomical_axis(c);
    if (seen[a]) return false;
    seen[a] = true;
  }
  return true;
}

class Volume3D {
 public:
  Volume3D(Dims dims, Spacing spacing, Orientation orientation, std::vector<float> data)
      : dims_(dims), spacing_(spacing), orientation_(orientation), data_(std::move(data)) {
    for (int a = 0; a < 3; ++a) {
      if (dims_[a] == 0) throw DataError("volume dims must be positive");
      if (!(spacing_[a] > 0.0) || !std::isfinite(spacing_[a]))
        throw DataError("volume spacing must be positive");
    }
    if (!is_axis_complete(orientation_))
      throw DataError("orientation codes must cover three distinct anatomical axes");
    if (data_.size() != voxel_count(dims_))
      throw DataError("volume data length mismatch: expected " +
                      std::to_string(voxel_count(dims_)) + " voxels, got " +
                      std::to_string(data_.size()));
  }

  static Volume3D filled(Dims dims, Spacing spacing, float value,
                         Orientation orientation = kCanonicalOrientation) {
    return Volume3D(dims, spacing, orientation, std::vector<float>(voxel_count(dims), value));
  }

  static constexpr std::size_t voxel_count(const Dims& d) { return d[0] * d[1] * d[2]; }

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  const Orientation& orientation() const { return orientation_; }
  std::span<const float> data() const { return data_; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return x + dims_[0] * (y + dims_[1] * z);
  }
  float at(std::size_t x, std::size_t y, std::size_t z) const { return data_[index(x, y, z)]; }

  /// Geometry and voxel payload identical, bit for bit.
  friend bool operator==(const Volume3D& a, const Volume3D& b) {
    return a.dims_ == b.dims_ && a.spacing_ == b.spacing_ && a.orientation_ == b.orientation_ &&
           std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0;
  }

 private:
  Dims dims_;
  Spacing spacing_;
  Orientation orientation_;
  std::vector<float> data_;
};

namespace detail {

inline std::filesystem::path with_ext(const std::filesystem::path& p, const char* ext) {
  auto out = p;
  if (out.extension() == ".vh" || out.extension() == ".vraw") out.replace_extension();
  out += ext;
  return out;
}

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big)
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  return v;
}

inline void write_le_floats(std::ostream& os, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float f : values) {
      const std::uint32_t u = to_le(std::bit_cast<std::uint32_t>(f));
      os.write(reinterpret_cast<const char*>(&u), 4);
    }
  }
}

inline std::vector<float> decode_le_floats(const std::string& bytes) {
  std::vector<float> out(bytes.size() / 4);
  std::memcpy(out.data(), bytes.data(), out.size() * 4);
  if constexpr (std::endian::native == std::endian::big)
    for (auto& f : out) f = std::bit_cast<float>(to_le(std::bit_cast<std::uint32_t>(f)));
  return out;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// Header path for a volume stem or either of its two files.
inline std::filesystem::path volume_header_path(const std::filesystem::path& p) {
  return detail::with_ext(p, ".vh");
}

inline std::filesystem::path volume_raw_path(const std::filesystem::path& p) {
  return detail::with_ext(p, ".vraw");
}

inline void write_volume(const Volume3D& vol, const std::filesystem::path& path) {
  nlohmann::json h;
  h["dims"] = {vol.dims()[0], vol.dims()[1], vol.dims()[2]};
  h["spacing"] = {vol.spacing()[0], vol.spacing()[1], vol.spacing()[2]};
  h["orientation"] = {axis_code_name(vol.orientation()[0]), axis_code_name(vol.orientation()[1]),
                      axis_code_name(vol.orientation()[2])};
  const auto hp = volume_header_path(path);
  const auto rp = volume_raw_path(path);
  {
    std::ofstream os(hp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write '" + hp.string() + "'");
    os << h.dump() << '\n';
  }
  std::ofstream os(rp, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write '" + rp.string() + "'");
  detail::write_le_floats(os, vol.data());
  if (!os) throw DataError("write failed for '" + rp.string() + "'");
}

inline Volume3D read_volume(const std::filesystem::path& path) {
  const auto hp = volume_header_path(path);
  const auto rp = volume_raw_path(path);
  if (!std::filesystem::exists(hp)) throw DataError("missing volume header '" + hp.string() + "'");
  if (!std::filesystem::exists(rp)) throw DataError("missing volume raw file '" + rp.string() + "'");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(detail::slurp(hp));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed volume header '" + hp.string() + "': " + e.what());
  }
  Dims dims{};
  Spacing spacing{};
  Orientation orient{};
  try {
    const auto& d = h.at("dims");
    const auto& s = h.at("spacing");
    const auto& o = h.at("orientation");
    if (d.size() != 3 || s.size() != 3 || o.size() != 3)
      throw DataError("volume header '" + hp.string() + "' needs 3 dims/spacing/orientation");
    for (std::size_t a = 0; a < 3; ++a) {
      const auto di = d[a].get<std::int64_t>();
      if (di <= 0) throw DataError("non-positive dims in '" + hp.string() + "'");
      dims[a] = static_cast<std::size_t>(di);
      spacing[a] = s[a].get<double>();
      if (!(spacing[a] > 0.0)) throw DataError("non-positive spacing in '" + hp.string() + "'");
      orient[a] = parse_axis_code(o[a].get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed volume header '" + hp.string() + "': " + e.what());
  }
  const std::string raw = detail::slurp(rp);
  const std::size_t expected = Volume3D::voxel_count(dims) * sizeof(float);
  if (raw.size() != expected)
    throw DataError("length mismatch for '" + rp.string() + "': expected " +
                    std::to_string(expected) + " bytes, got " + std::to_string(raw.size()));
  return Volume3D(dims, spacing, orient, detail::decode_le_floats(raw));
}

/// Permutes and flips array axes so the result has orientation `target`.
inline Volume3D reorient(const Volume3D& vol, const Orientation& target) {
  if (!is_axis_complete(target))
    throw DataError("target orientation is not axis-complete");
  const auto& src = vol.orientation();
  // For output axis j: which source axis feeds it, and whether it runs reversed.
  std::array<int, 3> from{};
  std::array<bool, 3> flip{};
  for (int j = 0; j < 3; ++j) {
    for (int i = 0; i < 3; ++i) {
      if (anatomical_axis(src[i]) == anatomical_axis(target[j])) {
        from[j] = i;
        flip[j] = src[i] != target[j];
      }
    }
  }
  const Dims& sd = vol.dims();
  Dims od{sd[from[0]], sd[from[1]], sd[from[2]]};
  Spacing os{vol.spacing()[from[0]], vol.spacing()[from[1]], vol.spacing()[from[2]]};
  std::vector<float> out(vol.size());
  auto in = vol.data();
  std::array<std::size_t, 3> si{};
  for (std::size_t z = 0; z < od[2]; ++z)
    for (std::size_t y = 0; y < od[1]; ++y)
      for (std::size_t x = 0; x < od[0]; ++x) {
        const std::size_t o[3] = {x, y, z};
        for (int j = 0; j < 3; ++j) si[from[j]] = flip[j] ? od[j] - 1 - o[j] : o[j];
        out[x + od[0] * (y + od[1] * z)] = in[si[0] + sd[0] * (si[1] + sd[1] * si[2])];
      }
  return Volume3D(od, os, target, std::move(out));
}

}  // namespace mriseq
