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
#pragma once

// Gradient-weighted class activation maps for the 3D classifiers and slice
// overlays as binary PPM.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mriseq/autodiff/ops.hpp"
#include "mriseq/models.hpp"
#include "mriseq/volume.hpp"

namespace mriseq {

struct SaliencyVolume {
  Dims dims{};
  /// x fastest, values in [0, 1].
  std::vector<float> values;
  int target_class = 0;
  std::string layer;

  Volume3D to_volume(const Spacing& spacing) const {
    return Volume3D(dims, spacing, kCanonicalOrientation, values);
  }
};

/// relu(sum_k w_k A_k) with w_k the spatial mean of dA_k. A and dA are one
/// sample's [K, a, b, c] feature maps (z fastest). The result keeps the
/// feature-map grid, before upsampling and normalization.
template <typename T>
std::vector<double> gradcam_map(std::span<const T> A, std::span<const T> dA, std::size_t K) {
  if (A.size() != dA.size() || K == 0 || A.size() % K != 0)
    throw ShapeError("gradcam: activation and gradient shapes differ");
  const std::size_t S = A.size() / K;
  std::vector<double> map(S, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    double w = 0;
    for (std::size_t s = 0; s < S; ++s) w += dA[k * S + s];
    w /= static_cast<double>(S);
    for (std::size_t s = 0; s < S; ++s) map[s] += w * static_cast<double>(A[k * S + s]);
  }
  for (auto& v : map) v = std::max(v, 0.0);
  return map;
}

/// Trilinear resize of a z-fastest grid with half-voxel alignment
/// (sample i of n_out sits at (i + 0.5) * n_in / n_out - 0.5, edge clamped).
inline std::vector<double> upsample_trilinear(std::span<const double> in, const Dims& from, const Dims& to) {
  auto axis_weights = [](std::size_t n_in, std::size_t n_out) {
    std::vector<std::tuple<std::size_t, std::size_t, double>> w(n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
      double src = (static_cast<double>(i) + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const auto i1 = std::min(i0 + 1, n_in - 1);
      w[i] = {i0, i1, src - static_cast<double>(i0)};
    }
    return w;
  };
  const auto wx = axis_weights(from[0], to[0]), wy = axis_weights(from[1], to[1]), wz = axis_weights(from[2], to[2]);
  auto at = [&](std::size_t a, std::size_t b, std::size_t c) { return in[(a * from[1] + b) * from[2] + c]; };
  std::vector<double> out(to[0] * to[1] * to[2]);
  for (std::size_t a = 0; a < to[0]; ++a) {
    const auto [a0, a1, fa] = wx[a];
    for (std::size_t b = 0; b < to[1]; ++b) {
      const auto [b0, b1, fb] = wy[b];
      for (std::size_t c = 0; c < to[2]; ++c) {
        const auto [c0, c1, fc] = wz[c];
        auto lerp = [](double p, double q, double t) { return p + t * (q - p); };
        const double v00 = lerp(at(a0, b0, c0), at(a0, b0, c1), fc), v01 = lerp(at(a0, b1, c0), at(a0, b1, c1), fc);
        const double v10 = lerp(at(a1, b0, c0), at(a1, b0, c1), fc), v11 = lerp(at(a1, b1, c0), at(a1, b1, c1), fc);
        out[(a * to[1] + b) * to[2] + c] = lerp(lerp(v00, v01, fb), lerp(v10, v11, fb), fa);
      }
    }
  }
  return out;
}

/// Divides by the maximum; an all-zero map stays zero.
inline void max_normalize(std::vector<double>& v) {
  double m = 0;
  for (double x : v) m = std::max(m, x);
  if (m > 0)
    for (double& x : v) x = std::min(1.0, std::max(0.0, x / m));
}

/// GradCAM of `target_class` at feature map `layer` for one preprocessed
/// volume. Runs in eval mode.
template <typename T>
SaliencyVolume gradcam(Model<T>& model, const Volume3D& vol, int target_class,
                       const std::string& layer = Model<T>::kFinalFeatureLayer) {
  if (target_class < 0 || target_class >= model.config().num_classes)
    throw UsageError("gradcam: target class " + std::to_string(target_class) + " out of range");
  const Dims d = vol.dims();
  const auto x = ad::Tensor<T>::from({1, 1, d[0], d[1], d[2]}, volume_to_tensor_data<T>(vol));
  FeatureTaps<T> taps;
  const auto logits = model.forward(x, false, &taps);
  const ad::Tensor<T>* A = taps.find(layer);
  if (!A) {
    std::string names;
    for (const auto& [n, t] : taps.entries) names += (names.empty() ? "" : ", ") + n;
    throw UsageError("gradcam: unknown layer '" + layer + "' (available: " + names + ")");
  }
  if (A->rank() != 5) throw UsageError("gradcam: layer '" + layer + "' is not a 5-D feature map");
  model.zero_grad();
  A->node().grad.clear();
  ad::backward(ad::pick(logits, static_cast<std::size_t>(target_class)));
  std::vector<T> zeros;
  std::span<const T> dA = A->grad();
  if (!A->has_grad()) {
    zeros.assign(A->numel(), T(0));
    dA = zeros;
  }
  const auto cam = gradcam_map<T>(A->data(), dA, A->dim(1));
  auto up = upsample_trilinear(cam, {A->dim(2), A->dim(3), A->dim(4)}, d);
  max_normalize(up);
  model.zero_grad();

  SaliencyVolume s;
  s.dims = d;
  s.target_class = target_class;
  s.layer = layer;
  s.values.resize(up.size());
  for (std::size_t z = 0; z < d[2]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t xx = 0; xx < d[0]; ++xx)
        s.values[xx + d[0] * (y + d[1] * z)] = static_cast<float>(up[(xx * d[1] + y) * d[2] + z]);
  return s;
}

using Rgb = std::array<double, 3>;

/// Blue-to-red "jet" ramp: 0 maps to (0, 0, 0.5), 1 to (0.5, 0, 0).
inline Rgb jet(double s) {
  s = std::clamp(s, 0.0, 1.0);
  auto ch = [](double t) { return std::clamp(1.5 - std::abs(t), 0.0, 1.0); };
  return {ch(4 * s - 3), ch(4 * s - 2), ch(4 * s - 1)};
}

inline constexpr double kOverlayAlpha = 0.4;

struct PpmImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;
};

/// Slice `index` along `axis` (0, 1 or 2). For axis 2 the image is nx wide
/// and ny high; axis 1 gives nx by nz, axis 0 gives ny by nz. Gray levels
/// are the slice scaled by the volume's min/max.
inline PpmImage render_overlay(const Volume3D& vol, const SaliencyVolume& sal, int axis, std::size_t index) {
  if (sal.dims != vol.dims()) throw ShapeError("overlay: saliency and volume dims differ");
  if (axis < 0 || axis > 2) throw UsageError("overlay: axis must be 0, 1 or 2");
  const Dims d = vol.dims();
  if (index >= d[axis])
    throw UsageError("overlay: slice " + std::to_string(index) + " out of range [0, " + std::to_string(d[axis]) + ")");
  const int ua = axis == 0 ? 1 : 0, va = axis == 2 ? 1 : 2;
  PpmImage img{d[ua], d[va], {}};
  img.rgb.resize(img.width * img.height * 3);
  const auto data = vol.data();
  const auto [mn, mx] = std::minmax_element(data.begin(), data.end());
  const double lo = *mn, range = *mx - *mn;
  for (std::size_t v = 0; v < img.height; ++v)
    for (std::size_t u = 0; u < img.width; ++u) {
      std::array<std::size_t, 3> p{};
      p[axis] = index;
      p[ua] = u;
      p[va] = v;
      const std::size_t i = p[0] + d[0] * (p[1] + d[1] * p[2]);
      const double g = range > 0 ? (data[i] - lo) / range : 0.0;
      const Rgb c = jet(sal.values[i]);
      for (int k = 0; k < 3; ++k) {
        const double px = (1.0 - kOverlayAlpha) * g + kOverlayAlpha * c[k];
        img.rgb[(v * img.width + u) * 3 + k] = static_cast<std::uint8_t>(std::lround(std::clamp(px, 0.0, 1.0) * 255.0));
      }
    }
  return img;
}

inline void write_ppm(const PpmImage& img, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write '" + path.string() + "'");
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (!os) throw DataError("write failed for '" + path.string() + "'");
}

inline PpmImage read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path.string() + "'");
  std::string magic;
  int maxval = 0;
  PpmImage img;
  is >> magic >> img.width >> img.height >> maxval;
  if (magic != "P6" || maxval != 255 || !is) throw DataError("'" + path.string() + "' is not an 8-bit P6 image");
  is.get();
  img.rgb.resize(img.width * img.height * 3);
  is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (is.gcount() != static_cast<std::streamsize>(img.rgb.size())) throw DataError("'" + path.string() + "' is truncated");
  return img;
}

inline void export_overlay(const Volume3D& vol, const SaliencyVolume& sal, int axis, std::size_t index,
                           const std::filesystem::path& path) {
  write_ppm(render_overlay(vol, sal, axis, index), path);
}

}  // namespace mriseq
