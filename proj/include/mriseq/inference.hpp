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

// Fold-averaged ensemble prediction.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mriseq/autodiff/ops.hpp"
#include "mriseq/checkpoint.hpp"
#include "mriseq/labels.hpp"
#include "mriseq/manifest.hpp"
#include "mriseq/models.hpp"
#include "mriseq/preprocess.hpp"

namespace mriseq {

using ClassProbs = std::array<double, kNumClasses>;

struct Prediction {
  ClassProbs probabilities{};
  SeriesLabel label = SeriesLabel::T1wPre;
  std::vector<ClassProbs> per_fold_probabilities;
};

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax_index(std::span<const double> p) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < p.size(); ++k)
    if (p[k] > p[best]) best = k;
  return best;
}

/// Softmax of one logit row, accumulated in double.
template <typename T>
ClassProbs softmax_row(std::span<const T> logits) {
  if (logits.size() != kNumClasses) throw ShapeError("expected " + std::to_string(kNumClasses) + " logits");
  double m = logits[0];
  for (auto v : logits) m = std::max(m, static_cast<double>(v));
  ClassProbs p{};
  double z = 0;
  for (std::size_t k = 0; k < kNumClasses; ++k) z += p[k] = std::exp(static_cast<double>(logits[k]) - m);
  for (auto& v : p) v /= z;
  return p;
}

/// Arithmetic mean of the member distributions and its argmax. Each class
/// sums its member values in sorted order, so member order never changes a bit.
inline Prediction combine_folds(std::vector<ClassProbs> per_fold) {
  if (per_fold.empty()) throw ShapeError("ensemble prediction needs at least one member");
  Prediction out;
  std::vector<double> col(per_fold.size());
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    for (std::size_t f = 0; f < per_fold.size(); ++f) col[f] = per_fold[f][k];
    std::sort(col.begin(), col.end());
    double s = 0;
    for (double v : col) s += v;
    out.probabilities[k] = s / static_cast<double>(per_fold.size());
  }
  out.label = label_from_index(argmax_index(out.probabilities));
  out.per_fold_probabilities = std::move(per_fold);
  return out;
}

/// Member checkpoints sharing one ModelConfig and preprocessing.
struct EnsembleModel {
  ModelConfig config;
  PreprocessConfig preprocess;
  std::vector<Model<float>> members;

  std::size_t size() const { return members.size(); }
};

/// Loads `<run>/config.json` and every `<run>/fold<k>/best.ckpt`.
inline EnsembleModel load_ensemble(const std::filesystem::path& run_dir) {
  const auto cfg_path = run_dir / "config.json";
  if (!std::filesystem::exists(cfg_path)) throw DataError("run directory '" + run_dir.string() + "' has no config.json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::slurp(cfg_path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed '" + cfg_path.string() + "': " + e.what());
  }
  EnsembleModel e;
  try {
    e.config = j.at("model").get<ModelConfig>();
    e.preprocess = j.at("preprocess").get<PreprocessConfig>();
  } catch (const nlohmann::json::exception& ex) {
    throw DataError("malformed '" + cfg_path.string() + "': " + ex.what());
  }
  const int folds = j.value("folds", 0);
  for (int k = 0; k < folds; ++k) {
    const auto ck = run_dir / ("fold" + std::to_string(k)) / "best.ckpt";
    if (!std::filesystem::exists(ck)) throw DataError("missing checkpoint '" + ck.string() + "'");
    e.members.push_back(load_checkpoint<float>(ck, e.config));
  }
  if (e.members.empty()) throw DataError("run directory '" + run_dir.string() + "' has no fold checkpoints");
  return e;
}

/// Per-member softmax rows for a batch of preprocessed volumes given as
/// [N, 1, X, Y, Z] tensor data.
inline std::vector<std::vector<ClassProbs>> member_probabilities(EnsembleModel& ens, const std::vector<float>& batch,
                                                                 std::size_t n, const Dims& dims) {
  ad::NoGradGuard ng;
  std::vector<std::vector<ClassProbs>> rows(n);
  const auto x = ad::Tensor<float>::from({n, 1, dims[0], dims[1], dims[2]}, batch);
  for (auto& m : ens.members) {
    const auto logits = m.forward(x, false);
    for (std::size_t i = 0; i < n; ++i)
      rows[i].push_back(softmax_row<float>(logits.data().subspan(i * kNumClasses, kNumClasses)));
  }
  return rows;
}

/// Prediction for an already preprocessed volume.
inline Prediction predict_preprocessed(EnsembleModel& ens, const Volume3D& pre) {
  auto rows = member_probabilities(ens, volume_to_tensor_data<float>(pre), 1, pre.dims());
  return combine_folds(std::move(rows[0]));
}

inline Prediction predict_proba(EnsembleModel& ens, const Volume3D& vol) {
  return predict_preprocessed(ens, preprocess_pipeline(vol, ens.preprocess));
}

struct PredictionRow {
  std::string volume_path;
  std::optional<Prediction> prediction;
  std::string error;
};

/// One row per record in input order; unreadable series become error rows.
inline std::vector<PredictionRow> predict_study(EnsembleModel& ens, const DatasetManifest& m,
                                                std::span<const SeriesRecord> records, unsigned jobs = 1) {
  std::vector<PredictionRow> rows(records.size());
  std::vector<std::optional<Volume3D>> pre(records.size());
  auto load = [&](std::size_t i) {
    rows[i].volume_path = records[i].volume_path;
    try {
      pre[i] = preprocess_pipeline(read_volume(m.resolve(records[i])), ens.preprocess);
    } catch (const std::exception& e) {
      rows[i].error = e.what();
    }
  };
  jobs = std::max(1u, jobs);
  if (jobs == 1) {
    for (std::size_t i = 0; i < records.size(); ++i) load(i);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < jobs; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < records.size(); i += jobs) load(i);
      });
    for (auto& th : pool) th.join();
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!pre[i]) continue;
    try {
      rows[i].prediction = predict_preprocessed(ens, *pre[i]);
    } catch (const std::exception& e) {
      rows[i].error = e.what();
    }
  }
  return rows;
}

inline std::vector<PredictionRow> predict_study(EnsembleModel& ens, const DatasetManifest& m, unsigned jobs = 1) {
  return predict_study(ens, m, m.records, jobs);
}

inline std::string predictions_header() {
  std::string h = "volume_path,pred_label";
  for (auto l : kAllLabels) h += ",p_" + std::string(label_name(l));
  return h;
}

/// Error rows carry pred_label "ERROR" and empty probability cells.
inline void write_predictions_csv(const std::vector<PredictionRow>& rows, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write '" + path.string() + "'");
  os << predictions_header() << '\n';
  char buf[32];
  for (const auto& r : rows) {
    os << csv::escape(r.volume_path) << ',';
    if (!r.prediction) {
      os << "ERROR" << std::string(kNumClasses, ',') << '\n';
      continue;
    }
    os << label_name(r.prediction->label);
    for (double p : r.prediction->probabilities) {
      std::snprintf(buf, sizeof buf, ",%.6f", p);
      os << buf;
    }
    os << '\n';
  }
  if (!os) throw DataError("write failed for '" + path.string() + "'");
}

/// Parses a prediction CSV; error rows come back without a prediction.
inline std::vector<PredictionRow> read_predictions_csv(const std::filesystem::path& path) {
  const auto rows = csv::read_rows(path);
  if (rows.empty() || csv::split_line(predictions_header()) != rows.front())
    throw DataError("'" + path.string() + "' is not a prediction CSV (header mismatch)");
  std::vector<PredictionRow> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() != 2 + kNumClasses)
      throw DataError("'" + path.string() + "' row " + std::to_string(i) + ": expected " +
                      std::to_string(2 + kNumClasses) + " fields");
    PredictionRow pr;
    pr.volume_path = r[0];
    if (r[1] == "ERROR") {
      pr.error = "error row";
      out.push_back(std::move(pr));
      continue;
    }
    const auto l = parse_label(r[1]);
    if (!l) throw DataError("'" + path.string() + "' row " + std::to_string(i) + ": unknown label '" + r[1] + "'");
    Prediction p;
    p.label = *l;
    for (std::size_t k = 0; k < kNumClasses; ++k) {
      try {
        p.probabilities[k] = std::stod(r[2 + k]);
      } catch (const std::exception&) {
        throw DataError("'" + path.string() + "' row " + std::to_string(i) + ": bad probability '" + r[2 + k] + "'");
      }
    }
    pr.prediction = std::move(p);
    out.push_back(std::move(pr));
  }
  return out;
}

}  // namespace mriseq
