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
#include <cmath>
#include <fstream>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "mriseq/synth.hpp"
#include "oracles.hpp"

using namespace mriseq;
using mriseq::testing::TempDir;

namespace {

using Features = std::array<double, kNumTissues>;

// Mean intensity per tissue compartment.
Features compartment_means(const Volume3D& v, const Anatomy& a) {
  Features sum{}, cnt{};
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto t = static_cast<std::size_t>(a.tissue[i]);
    sum[t] += v.data()[i];
    cnt[t] += 1;
  }
  for (std::size_t t = 0; t < kNumTissues; ++t) sum[t] = cnt[t] > 0 ? sum[t] / cnt[t] : 0.0;
  return sum;
}

}  // namespace

TEST(Table, T1PhasesDifferOnlyInVesselRamp) {
  const auto vessel = static_cast<std::size_t>(Tissue::Vessel);
  for (std::size_t p = 1; p < 4; ++p) {
    for (std::size_t t = 0; t < kNumTissues; ++t) {
      if (t == vessel) continue;
      EXPECT_EQ(kTissueIntensity[p][t], kTissueIntensity[0][t]);
    }
    EXPECT_GT(kTissueIntensity[p][vessel], kTissueIntensity[p - 1][vessel]);
  }
  // T2 families: fluid bright, fat suppressed only in T2fs
  const auto fat = static_cast<std::size_t>(Tissue::Fat), fluid = static_cast<std::size_t>(Tissue::Fluid);
  EXPECT_GT(kTissueIntensity[4][fluid], kTissueIntensity[0][fluid]);
  EXPECT_LT(kTissueIntensity[5][fat], kTissueIntensity[4][fat]);
  for (const auto& row : kTissueIntensity) EXPECT_EQ(row[0], 0.0);
}

TEST(Study, EightSeriesSharingAnatomy) {
  PhantomConfig cfg;
  cfg.seed = 3;
  const auto s = generate_study(cfg, "P0001", "S00");
  ASSERT_EQ(s.size(), kNumClasses);
  for (const auto& v : s) {
    EXPECT_EQ(v.dims(), cfg.dims);
    EXPECT_EQ(v.spacing(), cfg.spacing);
    EXPECT_EQ(v.orientation(), kCanonicalOrientation);
  }
  const auto a = generate_anatomy(cfg, "P0001");
  std::set<Tissue> present(a.tissue.begin(), a.tissue.end());
  EXPECT_EQ(present.size(), kNumTissues);
  EXPECT_NE(generate_anatomy(cfg, "P0002").tissue, a.tissue);
}

TEST(Study, DeterministicInSeedAndIds) {
  PhantomConfig cfg;
  cfg.seed = 11;
  const auto a = generate_study(cfg, "P0003", "S00"), b = generate_study(cfg, "P0003", "S00");
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  const auto c = generate_study(cfg, "P0003", "S01");
  EXPECT_FALSE(a[0] == c[0]);
  cfg.seed = 12;
  EXPECT_FALSE(generate_study(cfg, "P0003", "S00")[0] == a[0]);
}

TEST(Study, NoiseFreeCentroidOracleIsPerfect) {
  PhantomConfig cfg;
  cfg.noise_sigma = 0.0;
  cfg.seed = 21;
  std::array<Features, kNumClasses> centroid{};
  std::vector<std::pair<Features, std::size_t>> test;
  for (std::size_t p = 0; p < 20; ++p) {
    const auto pid = patient_name(cfg, p);
    const auto anat = generate_anatomy(cfg, pid);
    const auto study = generate_study(cfg, pid, "S00");
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      const auto f = compartment_means(study[c], anat);
      if (p < 10) {
        for (std::size_t t = 0; t < kNumTissues; ++t) centroid[c][t] += f[t] / 10.0;
      } else {
        test.emplace_back(f, c);
      }
    }
  }
  std::size_t correct = 0;
  for (const auto& [f, truth] : test) {
    std::size_t best = 0;
    double bd = 1e300;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      double d = 0;
      for (std::size_t t = 0; t < kNumTissues; ++t) d += (f[t] - centroid[c][t]) * (f[t] - centroid[c][t]);
      if (d < bd) {
        bd = d;
        best = c;
      }
    }
    correct += best == truth;
  }
  EXPECT_EQ(correct, test.size());
}

TEST(Domain, GainAndOffsetShiftTheMean) {
  PhantomConfig a;
  a.seed = 5;
  PhantomConfig b = a;
  b.domain = {"B", 1.3, 0.1, 0.05, 1.0, 0.0};
  // residual vb - (gain*va + offset) is the extra scanner noise alone
  double sum = 0, sq = 0, n = 0;
  for (const char* pid : {"P0000", "P0001", "P0002"}) {
    const auto va = generate_study(a, pid, "S00"), vb = generate_study(b, pid, "S00");
    for (std::size_t c = 0; c < kNumClasses; ++c)
      for (std::size_t i = 0; i < va[c].size(); ++i) {
        const double r = static_cast<double>(vb[c].data()[i]) - (1.3 * va[c].data()[i] + 0.1);
        sum += r, sq += r * r, n += 1;
      }
  }
  const double m = sum / n, sd = std::sqrt(sq / n - m * m);
  EXPECT_NEAR(m, 0.0, 3.0 * 0.05 / std::sqrt(n));
  EXPECT_NEAR(sd, 0.05, 0.05 * 5.0 / std::sqrt(2.0 * n));
}

TEST(Domain, DefaultProfilesAndValidation) {
  EXPECT_EQ(DomainProfile::A(), DomainProfile{});
  const auto b = DomainProfile::B();
  EXPECT_EQ(b.gain, 1.3);
  EXPECT_EQ(b.offset, 0.1);
  EXPECT_EQ(b.extra_noise, 0.05);
  EXPECT_EQ(nlohmann::json(b).get<DomainProfile>(), b);
  DomainProfile bad = b;
  bad.gain = 0;
  EXPECT_THROW(bad.validate(), UsageError);
  bad = b;
  bad.bias_field = 1.0;
  EXPECT_THROW(bad.validate(), UsageError);
  PhantomConfig c;
  c.dims[1] = 0;
  EXPECT_THROW(c.validate(), UsageError);
  c = {};
  c.noise_sigma = -1;
  EXPECT_THROW(generate_study(c, "P", "S"), UsageError);
}

TEST(Dataset, TwentyFivePatientsGiveTwoHundredRows) {
  TempDir dir("synth");
  PhantomConfig cfg;
  cfg.dims = {16, 16, 4};
  cfg.seed = 8;
  cfg.domain = DomainProfile::B();
  const auto m = generate_dataset(cfg, dir / "d");
  EXPECT_EQ(m.records.size(), 200u);
  EXPECT_EQ(m.patients().size(), 25u);
  const auto loaded = load_manifest(dir / "d" / "manifest.csv");
  EXPECT_EQ(loaded.records, m.records);
  for (const auto& r : m.records) {
    EXPECT_EQ(r.scanner_domain, "B");
    EXPECT_EQ(r.body_region, "abdomen");
    EXPECT_EQ(r.b_value.has_value(), r.label == SeriesLabel::DWI);
  }
  std::ifstream js(dir / "d" / "phantom_config.json");
  const auto j = nlohmann::json::parse(js);
  EXPECT_EQ(j.get<PhantomConfig>().domain, cfg.domain);
  EXPECT_EQ(j.at("seed"), 8);
}

TEST(Dataset, RepeatRunsAreByteIdentical) {
  TempDir dir("synth2");
  PhantomConfig cfg;
  cfg.dims = {12, 10, 3};
  cfg.n_patients = 3;
  cfg.studies_per_patient = 2;
  cfg.seed = 4;
  const auto a = generate_dataset(cfg, dir / "a");
  generate_dataset(cfg, dir / "b");
  EXPECT_EQ(a.records.size(), 48u);
  EXPECT_EQ(mriseq::detail::slurp(dir / "a" / "manifest.csv"), mriseq::detail::slurp(dir / "b" / "manifest.csv"));
  for (const auto& r : a.records)
    EXPECT_EQ(mriseq::detail::slurp(volume_raw_path(dir / "a" / r.volume_path)),
              mriseq::detail::slurp(volume_raw_path(dir / "b" / r.volume_path)));
}

TEST(Names, PatientAndStudy) {
  PhantomConfig cfg;
  cfg.patient_prefix = "Q";
  cfg.first_patient = 60;
  EXPECT_EQ(patient_name(cfg, 3), "Q0063");
  EXPECT_EQ(study_name(2), "S02");
}
