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

// Synthetic abdominal phantoms standing in for clinical series.
//
// Each patient gets one anatomy: an elliptic body with a subcutaneous fat
// shell and four compartments (fluid, vessel, organ, spine). Every series type
// paints the tissues from a fixed row of kTissueIntensity. The T1-weighted
// phases share one row except for the vessel column, which ramps up from
// pre-contrast to delayed.
//
// Signal per voxel, in order:
//   s = intensity[label][tissue] * (1 + jitter)     per study and tissue
//   s = s ^ gamma                                   domain contrast
//   s = s * (1 + field(u, v))                       domain bias field
//   s = s + N(0, noise_sigma)
//   s = gain * s + offset + N(0, extra_noise)       domain scanner response

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mriseq/labels.hpp"
#include "mriseq/manifest.hpp"
#include "mriseq/seeding.hpp"
#include "mriseq/volume.hpp"

namespace mriseq {

enum class Tissue : std::uint8_t { Background, Body, Fat, Fluid, Vessel, Organ, Spine };
inline constexpr std::size_t kNumTissues = 7;
inline constexpr std::array<const char*, kNumTissues> kTissueNames{"background", "body", "fat",  "fluid",
                                                                    "vessel",     "organ", "spine"};

// clang-format off
/// Rows follow SeriesLabel order; columns follow Tissue order.
inline constexpr std::array<std::array<double, kNumTissues>, kNumClasses> kTissueIntensity{{
    //  bg    body  fat   fluid vessel organ spine
    {0.00, 0.30, 0.75, 0.10, 0.05, 0.45, 0.55},  // T1w-pre
    {0.00, 0.30, 0.75, 0.10, 0.35, 0.45, 0.55},  // T1w-art
    {0.00, 0.30, 0.75, 0.10, 0.65, 0.45, 0.55},  // T1w-ven
    {0.00, 0.30, 0.75, 0.10, 0.95, 0.45, 0.55},  // T1w-del
    {0.00, 0.30, 0.70, 0.95, 0.15, 0.25, 0.40},  // T2w
    {0.00, 0.30, 0.10, 0.95, 0.15, 0.25, 0.40},  // T2fs
    {0.00, 0.20, 0.05, 0.15, 0.05, 0.55, 0.65},  // DWI
    {0.00, 0.40, 0.05, 0.90, 0.60, 0.35, 0.20},  // ADC
}};
// clang-format on

struct AcquisitionInfo {
  std::optional<double> b_value, tr_ms, te_ms, flip_deg;
};

/// Nominal acquisition parameters written to the manifest (bookkeeping only).
inline AcquisitionInfo acquisition_info(SeriesLabel l) {
  switch (l) {
    case SeriesLabel::T1wPre:
    case SeriesLabel::T1wArt:
    case SeriesLabel::T1wVen:
    case SeriesLabel::T1wDel: return {std::nullopt, 4.0, 1.9, 12.0};
    case SeriesLabel::T2w: return {std::nullopt, 1400.0, 90.0, 150.0};
    case SeriesLabel::T2fs: return {std::nullopt, 4000.0, 85.0, 150.0};
    case SeriesLabel::DWI: return {500.0, 5000.0, 60.0, 90.0};
    case SeriesLabel::ADC: return {std::nullopt, 5000.0, 60.0, 90.0};
  }
  return {};
}

/// Scanner response applied on top of the clean phantom. The identity profile
/// is domain "A".
struct DomainProfile {
  std::string name = "A";
  double gain = 1.0;
  double offset = 0.0;
  double extra_noise = 0.0;
  double gamma = 1.0;
  /// Peak relative amplitude of a linear in-plane bias field.
  double bias_field = 0.0;

  static DomainProfile A() { return {}; }
  static DomainProfile B() { return {"B", 1.3, 0.1, 0.05, 1.0, 0.5}; }

  void validate() const {
    if (name.empty()) throw UsageError("domain name must not be empty");
    if (!(gain > 0)) throw UsageError("domain gain must be positive");
    if (!(extra_noise >= 0)) throw UsageError("domain extra_noise must be >= 0");
    if (!(gamma > 0)) throw UsageError("domain gamma must be positive");
    if (!(bias_field >= 0 && bias_field < 1)) throw UsageError("domain bias_field must be in [0, 1)");
  }
  friend bool operator==(const DomainProfile&, const DomainProfile&) = default;
};

inline void to_json(nlohmann::json& j, const DomainProfile& d) {
  j = {{"name", d.name},   {"gain", d.gain},   {"offset", d.offset}, {"extra_noise", d.extra_noise},
       {"gamma", d.gamma}, {"bias_field", d.bias_field}};
}
inline void from_json(const nlohmann::json& j, DomainProfile& d) {
  d = {};
  d.name = j.value("name", d.name);
  d.gain = j.value("gain", d.gain);
  d.offset = j.value("offset", d.offset);
  d.extra_noise = j.value("extra_noise", d.extra_noise);
  d.gamma = j.value("gamma", d.gamma);
  d.bias_field = j.value("bias_field", d.bias_field);
}

struct PhantomConfig {
  Dims dims{64, 64, 16};
  Spacing spacing{0.75, 0.75, 3.9};
  std::size_t n_patients = 25;
  std::size_t studies_per_patient = 1;
  /// Patients are named <prefix><index>, indices starting here.
  std::string patient_prefix = "P";
  std::size_t first_patient = 0;
  double noise_sigma = 0.05;
  /// Relative per-study, per-tissue intensity jitter (standard deviation).
  double jitter = 0.03;
  DomainProfile domain;
  std::uint64_t seed = 0;

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] == 0) throw UsageError("phantom dims must be positive");
      if (!(spacing[a] > 0)) throw UsageError("phantom spacing must be positive");
    }
    if (n_patients == 0) throw UsageError("phantom needs at least one patient");
    if (studies_per_patient == 0) throw UsageError("phantom needs at least one study per patient");
    if (!(noise_sigma >= 0)) throw UsageError("noise_sigma must be >= 0");
    if (!(jitter >= 0)) throw UsageError("jitter must be >= 0");
    domain.validate();
  }
};

inline void to_json(nlohmann::json& j, const PhantomConfig& c) {
  j = {{"dims", c.dims},
       {"spacing", c.spacing},
       {"n_patients", c.n_patients},
       {"studies_per_patient", c.studies_per_patient},
       {"patient_prefix", c.patient_prefix},
       {"first_patient", c.first_patient},
       {"noise_sigma", c.noise_sigma},
       {"jitter", c.jitter},
       {"domain", c.domain},
       {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, PhantomConfig& c) {
  c = {};
  c.dims = j.value("dims", c.dims);
  c.spacing = j.value("spacing", c.spacing);
  c.n_patients = j.value("n_patients", c.n_patients);
  c.studies_per_patient = j.value("studies_per_patient", c.studies_per_patient);
  c.patient_prefix = j.value("patient_prefix", c.patient_prefix);
  c.first_patient = j.value("first_patient", c.first_patient);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.jitter = j.value("jitter", c.jitter);
  if (j.contains("domain")) c.domain = j.at("domain").get<DomainProfile>();
  c.seed = j.value("seed", c.seed);
}

inline std::string patient_name(const PhantomConfig& c, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu", c.first_patient + i);
  return c.patient_prefix + buf;
}

inline std::string study_name(std::size_t s) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "S%02zu", s);
  return buf;
}

/// Tissue label per voxel, x fastest.
struct Anatomy {
  Dims dims;
  std::vector<Tissue> tissue;

  Tissue at(std::size_t x, std::size_t y, std::size_t z) const { return tissue[x + dims[0] * (y + dims[1] * z)]; }
};

/// Patient anatomy; depends on the seed and patient id only.
inline Anatomy generate_anatomy(const PhantomConfig& cfg, const std::string& patient_id) {
  std::mt19937_64 rng(derive_seed(cfg.seed, "anatomy", {fnv1a(patient_id)}));
  auto U = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  const double bx = U(-0.05, 0.05), by = U(-0.05, 0.05);
  const double ba = U(0.75, 0.9), bb = U(0.6, 0.75);
  const double fat_t = U(0.12, 0.18);
  struct Ellipsoid {
    double cx, cy, cz, rx, ry, rz;
    bool inside(double u, double v, double w) const {
      const double a = (u - cx) / rx, b = (v - cy) / ry, c = (w - cz) / rz;
      return a * a + b * b + c * c <= 1.0;
    }
  };
  const Ellipsoid organ{U(-0.45, -0.2), U(-0.05, 0.2), U(-0.2, 0.2), U(0.3, 0.4), U(0.25, 0.35), U(0.8, 1.1)};
  const Ellipsoid fluid{U(0.2, 0.45), U(0.0, 0.25), U(-0.3, 0.3), U(0.14, 0.2), U(0.14, 0.2), U(0.4, 0.6)};
  const double vx = U(-0.08, 0.08), vy = U(-0.3, -0.2), vr = U(0.2, 0.24);
  const double sx = U(-0.05, 0.05), sy = U(-0.58, -0.5), sr = U(0.13, 0.17);

  Anatomy a{cfg.dims, std::vector<Tissue>(Volume3D::voxel_count(cfg.dims), Tissue::Background)};
  const auto [nx, ny, nz] = cfg.dims;
  for (std::size_t z = 0; z < nz; ++z) {
    const double w = 2.0 * (z + 0.5) / nz - 1.0;
    const double taper = 1.0 - 0.15 * w * w;
    for (std::size_t y = 0; y < ny; ++y) {
      const double v = 2.0 * (y + 0.5) / ny - 1.0;
      for (std::size_t x = 0; x < nx; ++x) {
        const double u = 2.0 * (x + 0.5) / nx - 1.0;
        const double du = (u - bx) / (ba * taper), dv = (v - by) / (bb * taper);
        const double rho = std::sqrt(du * du + dv * dv);
        Tissue t = Tissue::Background;
        if (rho <= 1.0) {
          t = rho > 1.0 - fat_t ? Tissue::Fat : Tissue::Body;
          if (organ.inside(u, v, w)) t = Tissue::Organ;
          if (fluid.inside(u, v, w)) t = Tissue::Fluid;
          if ((u - vx) * (u - vx) + (v - vy) * (v - vy) <= vr * vr) t = Tissue::Vessel;
          if ((u - sx) * (u - sx) + (v - sy) * (v - sy) <= sr * sr) t = Tissue::Spine;
        }
        a.tissue[x + nx * (y + ny * z)] = t;
      }
    }
  }
  return a;
}

/// Renders one series of a study. Noise streams depend on (seed, patient,
/// study, label) only, so changing the domain profile keeps them paired.
inline Volume3D render_series(const PhantomConfig& cfg, const Anatomy& anat, const std::string& patient_id,
                              const std::string& study_id, SeriesLabel label) {
  const std::uint64_t pid = fnv1a(patient_id), sid = fnv1a(study_id);
  const auto li = static_cast<std::uint64_t>(label_index(label));
  std::mt19937_64 jrng(derive_seed(cfg.seed, "jitter", {pid, sid, li}));
  std::normal_distribution<double> unit(0.0, 1.0);
  std::array<double, kNumTissues> level{};
  for (std::size_t t = 0; t < kNumTissues; ++t)
    level[t] = std::max(0.0, kTissueIntensity[label_index(label)][t] * (1.0 + cfg.jitter * unit(jrng)));
  const double phi = std::uniform_real_distribution<double>(0.0, 2.0 * M_PI)(jrng);
  const double fx = std::cos(phi), fy = std::sin(phi);

  const auto& dom = cfg.domain;
  std::mt19937_64 nrng(derive_seed(cfg.seed, "noise", {pid, sid, li}));
  std::mt19937_64 drng(derive_seed(cfg.seed, "domain", {pid, sid, li, fnv1a(dom.name)}));
  std::normal_distribution<double> noise(0.0, 1.0), dnoise(0.0, 1.0);

  const auto [nx, ny, nz] = cfg.dims;
  std::vector<float> data(Volume3D::voxel_count(cfg.dims));
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t y = 0; y < ny; ++y) {
      const double v = 2.0 * (y + 0.5) / ny - 1.0;
      for (std::size_t x = 0; x < nx; ++x) {
        const double u = 2.0 * (x + 0.5) / nx - 1.0;
        const std::size_t i = x + nx * (y + ny * z);
        double s = level[static_cast<std::size_t>(anat.tissue[i])];
        if (dom.gamma != 1.0) s = std::pow(s, dom.gamma);
        if (dom.bias_field != 0.0) s *= 1.0 + dom.bias_field * (fx * u + fy * v) / std::sqrt(2.0);
        s += cfg.noise_sigma * noise(nrng);
        s = dom.gain * s + dom.offset;
        if (dom.extra_noise != 0.0) s += dom.extra_noise * dnoise(drng);
        data[i] = static_cast<float>(s);
      }
    }
  return Volume3D(cfg.dims, cfg.spacing, kCanonicalOrientation, std::move(data));
}

/// The eight series of one study, in SeriesLabel order.
inline std::vector<Volume3D> generate_study(const PhantomConfig& cfg, const std::string& patient_id,
                                            const std::string& study_id) {
  cfg.validate();
  const Anatomy anat = generate_anatomy(cfg, patient_id);
  std::vector<Volume3D> out;
  out.reserve(kNumClasses);
  for (auto l : kAllLabels) out.push_back(render_series(cfg, anat, patient_id, study_id, l));
  return out;
}

/// Writes every study under `out_dir` as <patient>/<study>/<label>.vh|.vraw,
/// plus manifest.csv and phantom_config.json. Returns the manifest.
inline DatasetManifest generate_dataset(const PhantomConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create output directory '" + out_dir.string() + "': " + ec.message());
  DatasetManifest m;
  m.root_dir = out_dir;
  for (std::size_t p = 0; p < cfg.n_patients; ++p) {
    const std::string pid = patient_name(cfg, p);
    const Anatomy anat = generate_anatomy(cfg, pid);
    for (std::size_t s = 0; s < cfg.studies_per_patient; ++s) {
      const std::string sid = study_name(s);
      const auto rel_dir = std::filesystem::path(pid) / sid;
      std::filesystem::create_directories(out_dir / rel_dir, ec);
      if (ec) throw DataError("cannot create '" + (out_dir / rel_dir).string() + "': " + ec.message());
      for (auto l : kAllLabels) {
        const auto rel = rel_dir / (std::string(label_name(l)) + ".vh");
        write_volume(render_series(cfg, anat, pid, sid, l), out_dir / rel);
        const auto acq = acquisition_info(l);
        SeriesRecord r;
        r.volume_path = rel.generic_string();
        r.patient_id = pid;
        r.study_id = sid;
        r.label = l;
        r.scanner_domain = cfg.domain.name;
        r.body_region = "abdomen";
        r.b_value = acq.b_value;
        r.tr_ms = acq.tr_ms;
        r.te_ms = acq.te_ms;
        r.flip_deg = acq.flip_deg;
        m.records.push_back(std::move(r));
      }
    }
  }
  save_manifest(m, out_dir / "manifest.csv");
  std::ofstream js(out_dir / "phantom_config.json", std::ios::trunc);
  js << nlohmann::json(cfg).dump(2) << '\n';
  if (!js) throw DataError("cannot write '" + (out_dir / "phantom_config.json").string() + "'");
  return m;
}

}  // namespace mriseq
