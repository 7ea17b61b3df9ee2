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

// Volume preprocessing: reorient, resample to a fixed voxel size, percentile
// clip, crop-or-pad to a fixed grid and rescale into [0, 1].

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mriseq/error.hpp"
#include "mriseq/seeding.hpp"
#include "mriseq/volume.hpp"

namespace mriseq {

struct PreprocessConfig {
  Spacing target_spacing{1.5, 1.5, 7.8};
  std::array<double, 2> clip_percentiles{1.0, 99.0};
  Dims target_dims{256, 256, 36};
  bool rescale_to_unit = true;

  /// Desk-scale grid used by the toy experiments.
  static PreprocessConfig toy() {
    PreprocessConfig c;
    c.target_dims = {32, 32, 8};
    return c;
  }

  void validate() const {
    const auto [lo, hi] = clip_percentiles;
    if (!(lo >= 0.0 && hi <= 100.0 && lo < hi))
      throw UsageError("clip percentiles must satisfy 0 <= lo < hi <= 100");
    for (int a = 0; a < 3; ++a) {
      if (!(target_spacing[a] > 0.0)) throw UsageError("target spacing must be positive");
      if (target_dims[a] == 0) throw UsageError("target dims must be positive");
    }
  }

  friend bool operator==(const PreprocessConfig&, const PreprocessConfig&) = default;
};

inline void to_json(nlohmann::json& j, const PreprocessConfig& c) {
  j = nlohmann::json{{"target_spacing", c.target_spacing},
                     {"clip_percentiles", c.clip_percentiles},
                     {"target_dims", c.target_dims},
                     {"rescale_to_unit", c.rescale_to_unit}};
}

inline void from_json(const nlohmann::json& j, PreprocessConfig& c) {
  PreprocessConfig d;
  c.target_spacing = j.value("target_spacing", d.target_spacing);
  c.clip_percentiles = j.value("clip_percentiles", d.clip_percentiles);
  c.target_dims = j.value("target_dims", d.target_dims);
  c.rescale_to_unit = j.value("rescale_to_unit", d.rescale_to_unit);
}

/// Stable hex digest of a configuration, used as a cache key component.
inline std::string config_digest(const PreprocessConfig& c) {
  const auto h = fnv1a(nlohmann::json(c).dump());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Linear-interpolation percentile of an already sorted population, at rank
/// q*(n-1)/100.
inline double percentile_sorted(std::span<const float> sorted, double q) {
  if (sorted.empty()) throw DataError("percentile of empty population");
  const double rank = q * static_cast<double>(sorted.size() - 1) / 100.0;
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return static_cast<double>(sorted[lo]) +
         frac * (static_cast<double>(sorted[hi]) - static_cast<double>(sorted[lo]));
}

inline std::array<double, 2> percentiles(std::span<const float> values, double lo, double hi) {
  std::vector<float> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  return {percentile_sorted(sorted, lo), percentile_sorted(sorted, hi)};
}

namespace detail {

// Linear resampling along one axis of an x-fastest buffer. Output sample i
// sits at physical position (i + 0.5) * out_step from the grid corner, so
// with equal steps every sample lands exactly on an input voxel.
inline std::vector<float> resample_axis(const std::vector<float>& in, const Dims& dims, int axis,
                                        std::size_t out_n, double in_step, double out_step) {
  const std::size_t n = dims[axis];
  Dims od = dims;
  od[axis] = out_n;
  std::vector<std::size_t> i0(out_n), i1(out_n);
  std::vector<double> t(out_n);
  for (std::size_t i = 0; i < out_n; ++i) {
    double c = (static_cast<double>(i) + 0.5) * out_step / in_step - 0.5;
    c = std::clamp(c, 0.0, static_cast<double>(n - 1));
    const auto f = static_cast<std::size_t>(std::floor(c));
    i0[i] = f;
    i1[i] = std::min(f + 1, n - 1);
    t[i] = c - static_cast<double>(f);
  }
  const std::size_t stride = axis == 0 ? 1 : axis == 1 ? dims[0] : dims[0] * dims[1];
  const std::size_t ostride = axis == 0 ? 1 : axis == 1 ? od[0] : od[0] * od[1];
  std::vector<float> out(Volume3D::voxel_count(od));
  const std::size_t outer = Volume3D::voxel_count(dims) / (n * stride);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < out_n; ++i) {
      const float* a = in.data() + o * n * stride + i0[i] * stride;
      const float* b = in.data() + o * n * stride + i1[i] * stride;
      float* dst = out.data() + o * out_n * ostride + i * ostride;
      const double w = t[i];
      for (std::size_t s = 0; s < stride; ++s) {
        const double va = a[s];
        dst[s] = static_cast<float>(va + w * (static_cast<double>(b[s]) - va));
      }
    }
  }
  return out;
}

}  // namespace detail

/// Trilinear resampling to `target_spacing` with edge-clamped sampling.
/// Output extent per axis is round(n * spacing / target), at least 1.
inline Volume3D resample(const Volume3D& vol, const Spacing& target_spacing) {
  for (double s : target_spacing)
    if (!(s > 0.0)) throw DataError("target spacing must be positive");
  if (vol.spacing() == target_spacing) return vol;
  Dims dims = vol.dims();
  std::vector<float> buf(vol.data().begin(), vol.data().end());
  for (int a = 0; a < 3; ++a) {
    const double extent = static_cast<double>(dims[a]) * vol.spacing()[a] / target_spacing[a];
    const auto out_n = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(extent)));
    if (out_n == dims[a] && vol.spacing()[a] == target_spacing[a]) continue;
    buf = detail::resample_axis(buf, dims, a, out_n, vol.spacing()[a], target_spacing[a]);
    dims[a] = out_n;
  }
  return Volume3D(dims, target_spacing, vol.orientation(), std::move(buf));
}

/// Clamps every voxel into [lo, hi].
inline Volume3D clip_range(const Volume3D& vol, double lo, double hi) {
  const auto flo = static_cast<float>(lo);
  const auto fhi = static_cast<float>(hi);
  std::vector<float> out(vol.data().begin(), vol.data().end());
  for (auto& v : out) v = std::min(std::max(v, flo), fhi);
  return Volume3D(vol.dims(), vol.spacing(), vol.orientation(), std::move(out));
}

/// Clamps every voxel into [P_lo, P_hi] of the volume's own intensity population.
inline Volume3D clip_percentiles(const Volume3D& vol, double lo, double hi) {
  if (!(lo < hi)) throw DataError("clip percentiles require lo < hi");
  const auto [plo, phi] = percentiles(vol.data(), lo, hi);
  return clip_range(vol, plo, phi);
}

/// Per axis: central crop when the input is larger (start floor((n-N)/2)),
/// symmetric zero pad when smaller (left pad floor((N-n)/2)).
inline Volume3D crop_or_pad(const Volume3D& vol, const Dims& target) {
  for (auto d : target)
    if (d == 0) throw DataError("target dims must be positive");
  const Dims& in = vol.dims();
  // offset[a] = input index of output index 0 (negative when padding)
  std::array<long long, 3> offset{};
  for (int a = 0; a < 3; ++a) {
    const auto n = static_cast<long long>(in[a]);
    const auto N = static_cast<long long>(target[a]);
    offset[a] = n >= N ? (n - N) / 2 : -((N - n) / 2);
  }
  std::vector<float> out(Volume3D::voxel_count(target), 0.0f);
  auto data = vol.data();
  for (std::size_t z = 0; z < target[2]; ++z) {
    const long long sz = static_cast<long long>(z) + offset[2];
    if (sz < 0 || sz >= static_cast<long long>(in[2])) continue;
    for (std::size_t y = 0; y < target[1]; ++y) {
      const long long sy = static_cast<long long>(y) + offset[1];
      if (sy < 0 || sy >= static_cast<long long>(in[1])) continue;
      for (std::size_t x = 0; x < target[0]; ++x) {
        const long long sx = static_cast<long long>(x) + offset[0];
        if (sx < 0 || sx >= static_cast<long long>(in[0])) continue;
        out[x + target[0] * (y + target[1] * z)] =
            data[static_cast<std::size_t>(sx) +
                 in[0] * (static_cast<std::size_t>(sy) + in[1] * static_cast<std::size_t>(sz))];
      }
    }
  }
  return Volume3D(target, vol.spacing(), vol.orientation(), std::move(out));
}

/// Affine map of [lo, hi] onto [0, 1], clamped. A degenerate range maps to 0.
inline Volume3D rescale_unit(const Volume3D& vol, double lo, double hi) {
  std::vector<float> out(vol.size(), 0.0f);
  if (hi > lo) {
    auto in = vol.data();
    const double inv = 1.0 / (hi - lo);
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = static_cast<float>(std::clamp((static_cast<double>(in[i]) - lo) * inv, 0.0, 1.0));
  }
  return Volume3D(vol.dims(), vol.spacing(), vol.orientation(), std::move(out));
}

/// reorient -> resample -> clip -> crop_or_pad -> rescale.
inline Volume3D preprocess_pipeline(const Volume3D& vol, const PreprocessConfig& cfg) {
  cfg.validate();
  auto v = reorient(vol, kCanonicalOrientation);
  v = resample(v, cfg.target_spacing);
  const auto [plo, phi] = percentiles(v.data(), cfg.clip_percentiles[0], cfg.clip_percentiles[1]);
  v = clip_range(v, plo, phi);
  v = crop_or_pad(v, cfg.target_dims);
  if (cfg.rescale_to_unit) v = rescale_unit(v, static_cast<float>(plo), static_cast<float>(phi));
  return v;
}

}  // namespace mriseq
