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

// Patient-level splitting, fold training with validation-best selection and
// repeated-split cross-validation.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mriseq/autodiff/adam.hpp"
#include "mriseq/autodiff/ops.hpp"
#include "mriseq/checkpoint.hpp"
#include "mriseq/inference.hpp"
#include "mriseq/manifest.hpp"
#include "mriseq/models.hpp"
#include "mriseq/preprocess.hpp"
#include "mriseq/seeding.hpp"

namespace mriseq {

struct TrainConfig {
  int epochs = 25;
  int batch_size = 2;
  double learning_rate = 1e-4;
  int folds = 5;
  double val_ratio = 0.12;
  double data_fraction = 1.0;
  /// Fine-tuning base: a checkpoint file initializes every fold, a run
  /// directory initializes fold k from its fold<k>/best.ckpt. Empty trains
  /// from scratch.
  std::string finetune_from;
  std::uint64_t seed = 0;
  PreprocessConfig preprocess;
  ModelConfig model;

  bool finetune() const { return !finetune_from.empty(); }

  void validate() const {
    if (epochs < 0) throw UsageError("epochs must be >= 0");
    if (batch_size < 1) throw UsageError("batch size must be >= 1");
    if (!(learning_rate > 0)) throw UsageError("learning rate must be positive");
    if (folds < 1) throw UsageError("folds must be >= 1");
    if (!(val_ratio > 0 && val_ratio < 1)) throw UsageError("val_ratio must be in (0, 1)");
    if (!(data_fraction > 0 && data_fraction <= 1)) throw UsageError("data fraction must be in (0, 1]");
    preprocess.validate();
    model.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"folds", c.folds},
       {"val_ratio", c.val_ratio},
       {"data_fraction", c.data_fraction},
       {"mode", c.finetune() ? "finetune" : "scratch"},
       {"finetune_from", c.finetune_from},
       {"seed", c.seed},
       {"preprocess", c.preprocess},
       {"model", c.model}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = {};
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.folds = j.value("folds", c.folds);
  c.val_ratio = j.value("val_ratio", c.val_ratio);
  c.data_fraction = j.value("data_fraction", c.data_fraction);
  c.finetune_from = j.value("finetune_from", c.finetune_from);
  c.seed = j.value("seed", c.seed);
  if (j.contains("preprocess")) c.preprocess = j.at("preprocess").get<PreprocessConfig>();
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
}

struct FoldSplit {
  int fold = 0;
  std::vector<SeriesRecord> train;
  std::vector<SeriesRecord> val;
};

namespace detail {

inline std::vector<std::string> shuffled_patients(const DatasetManifest& m, std::uint64_t seed) {
  auto ids = m.patients();
  std::sort(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  return ids;
}

}  // namespace detail

/// `folds` independent shuffles of the patient list, each cut at val_ratio.
inline std::vector<FoldSplit> split_patient_level(const DatasetManifest& m, double val_ratio, int folds,
                                                  std::uint64_t seed) {
  const std::size_t P = m.patients().size();
  if (P < 2) throw DataError("patient-level split needs at least 2 patients, manifest has " + std::to_string(P));
  if (!(val_ratio > 0 && val_ratio < 1)) throw UsageError("val_ratio must be in (0, 1)");
  const auto n_val = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(val_ratio * P)), 1, P - 1);
  std::vector<FoldSplit> out;
  for (int k = 0; k < folds; ++k) {
    const auto ids = detail::shuffled_patients(m, derive_seed(seed, "split", {static_cast<std::uint64_t>(k)}));
    const std::set<std::string> val(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
    FoldSplit s;
    s.fold = k;
    for (const auto& r : m.records) (val.count(r.patient_id) ? s.val : s.train).push_back(r);
    out.push_back(std::move(s));
  }
  return out;
}

/// Prefix of one seeded patient shuffle, so smaller fractions nest in larger ones.
inline DatasetManifest subset_fraction(const DatasetManifest& m, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw UsageError("data fraction must be in (0, 1]");
  if (fraction == 1.0) return m;
  const auto ids = detail::shuffled_patients(m, derive_seed(seed, "subset"));
  const auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ids.size())));
  if (n == 0) throw DataError("data fraction " + std::to_string(fraction) + " selects no patients");
  const std::set<std::string> keep(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n));
  DatasetManifest out;
  out.root_dir = m.root_dir;
  for (const auto& r : m.records)
    if (keep.count(r.patient_id)) out.records.push_back(r);
  return out;
}

/// A preprocessed series as [1, X, Y, Z] tensor data.
struct PreparedSeries {
  std::vector<float> data;
  int label = 0;
};

/// Shared store of preprocessed series, optionally persisted to a cache
/// directory keyed by input path and preprocessing digest.
class SeriesCache {
 public:
  SeriesCache(PreprocessConfig cfg, std::filesystem::path dir = {}) : cfg_(std::move(cfg)), dir_(std::move(dir)) {}

  const PreprocessConfig& config() const { return cfg_; }

  /// Preprocessed tensor data for every record, in order. Loading may use
  /// `jobs` threads; the result does not depend on it.
  std::vector<const PreparedSeries*> prepare(const DatasetManifest& m, std::span<const SeriesRecord> recs,
                                             unsigned jobs = 1) {
    std::vector<std::string> keys(recs.size());
    std::vector<std::size_t> missing;
    {
      std::lock_guard lk(mu_);
      for (std::size_t i = 0; i < recs.size(); ++i) {
        keys[i] = std::filesystem::absolute(m.resolve(recs[i])).lexically_normal().string();
        if (!store_.count(keys[i])) missing.push_back(i);
      }
    }
    std::vector<std::optional<PreparedSeries>> loaded(missing.size());
    std::vector<std::string> errors(missing.size());
    auto work = [&](std::size_t j) {
      const auto& r = recs[missing[j]];
      try {
        loaded[j] = PreparedSeries{volume_to_tensor_data<float>(load_one(keys[missing[j]])),
                                   static_cast<int>(label_index(r.label))};
      } catch (const std::exception& e) {
        errors[j] = "cannot load series '" + r.volume_path + "' (patient " + r.patient_id + "): " + e.what();
      }
    };
    jobs = std::max(1u, jobs);
    if (jobs == 1 || missing.size() < 2) {
      for (std::size_t j = 0; j < missing.size(); ++j) work(j);
    } else {
      std::vector<std::thread> pool;
      for (unsigned t = 0; t < jobs; ++t)
        pool.emplace_back([&, t] {
          for (std::size_t j = t; j < missing.size(); j += jobs) work(j);
        });
      for (auto& th : pool) th.join();
    }
    for (const auto& e : errors)
      if (!e.empty()) throw DataError(e);
    std::vector<const PreparedSeries*> out(recs.size());
    std::lock_guard lk(mu_);
    for (std::size_t j = 0; j < missing.size(); ++j) store_.emplace(keys[missing[j]], std::move(*loaded[j]));
    for (std::size_t i = 0; i < recs.size(); ++i) {
      auto& ps = store_.at(keys[i]);
      ps.label = static_cast<int>(label_index(recs[i].label));
      out[i] = &ps;
    }
    return out;
  }

 private:
  Volume3D load_one(const std::string& key) const {
    if (dir_.empty()) return preprocess_pipeline(read_volume(key), cfg_);
    const auto file = dir_ / config_digest(cfg_) / (hex(fnv1a(key)) + ".vh");
    if (std::filesystem::exists(file) && std::filesystem::exists(volume_raw_path(file))) return read_volume(file);
    auto v = preprocess_pipeline(read_volume(key), cfg_);
    std::filesystem::create_directories(file.parent_path());
    const auto tmp = file.parent_path() / (file.stem().string() + ".tmp" + std::to_string(std::hash<std::thread::id>()(std::this_thread::get_id())));
    write_volume(v, tmp.string() + ".vh");
    std::filesystem::rename(tmp.string() + ".vraw", volume_raw_path(file));
    std::filesystem::rename(tmp.string() + ".vh", file);
    return v;
  }
  static std::string hex(std::uint64_t v) {
    char b[20];
    std::snprintf(b, sizeof b, "%016llx", static_cast<unsigned long long>(v));
    return b;
  }

  PreprocessConfig cfg_;
  std::filesystem::path dir_;
  std::mutex mu_;
  std::map<std::string, PreparedSeries> store_;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0, train_acc = 0, val_loss = 0, val_acc = 0;
};

struct FoldResult {
  Model<float> best;
  std::vector<EpochStats> history;
  /// 0 when no epoch ran (initial weights kept).
  int best_epoch = 0;
  double best_val_acc = 0;
};

using LogFn = std::function<void(const std::string&)>;

namespace detail {

inline std::vector<float> gather_batch(const std::vector<const PreparedSeries*>& data,
                                       std::span<const std::size_t> idx) {
  const std::size_t S = data.front()->data.size();
  std::vector<float> out(idx.size() * S);
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(data[idx[i]]->data.begin(), S, out.begin() + i * S);
  return out;
}

/// Mean loss and accuracy of `model` in eval mode.
inline std::pair<double, double> evaluate(Model<float>& model, const std::vector<const PreparedSeries*>& data,
                                          const Dims& dims, std::size_t chunk = 4) {
  if (data.empty()) return {0.0, 0.0};
  ad::NoGradGuard ng;
  double loss = 0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t s = 0; s < data.size(); s += chunk) {
    idx.clear();
    for (std::size_t i = s; i < std::min(data.size(), s + chunk); ++i) idx.push_back(i);
    const auto x = ad::Tensor<float>::from({idx.size(), 1, dims[0], dims[1], dims[2]}, gather_batch(data, idx));
    const auto logits = model.forward(x, false);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto p = softmax_row<float>(logits.data().subspan(i * kNumClasses, kNumClasses));
      const int y = data[idx[i]]->label;
      loss -= std::log(std::max(p[y], 1e-300));
      if (static_cast<int>(argmax_index(p)) == y) ++correct;
    }
  }
  return {loss / static_cast<double>(data.size()), static_cast<double>(correct) / static_cast<double>(data.size())};
}

}  // namespace detail

/// Trains one fold from `init`. Returns the weights of the epoch with the
/// highest validation accuracy (earliest on ties).
inline FoldResult train_fold(Model<float> init, const std::vector<const PreparedSeries*>& train,
                             const std::vector<const PreparedSeries*>& val, const TrainConfig& cfg, int fold,
                             const LogFn& log = {}) {
  if (train.empty()) throw DataError("fold " + std::to_string(fold) + " has no training series");
  const Dims dims = cfg.preprocess.target_dims;
  Model<float> model = std::move(init);
  FoldResult res{model, {}, 0, detail::evaluate(model, val, dims).second};

  auto params = model.parameter_tensors();
  ad::OptimizerState<float> opt(ad::AdamHyper{cfg.learning_rate}, std::span<const ad::Tensor<float>>(params));
  std::vector<std::size_t> order(train.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(cfg.seed, "epoch",
                                    {static_cast<std::uint64_t>(fold), static_cast<std::uint64_t>(epoch)}));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
      const std::span<const std::size_t> idx(order.data() + s,
                                             std::min<std::size_t>(cfg.batch_size, order.size() - s));
      const auto x = ad::Tensor<float>::from({idx.size(), 1, dims[0], dims[1], dims[2]},
                                             detail::gather_batch(train, idx));
      std::vector<int> y(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) y[i] = train[idx[i]]->label;
      model.zero_grad();
      const auto logits = model.forward(x, true);
      const auto loss = ad::cross_entropy(logits, std::span<const int>(y));
      const double lv = loss.item();
      if (!std::isfinite(lv))
        throw NumericError("non-finite training loss in fold " + std::to_string(fold) + ", epoch " +
                           std::to_string(epoch));
      ad::backward(loss);
      ad::adam_step<float>(std::span(params), opt);
      loss_sum += lv * static_cast<double>(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i)
        if (static_cast<int>(argmax_index(softmax_row<float>(logits.data().subspan(i * kNumClasses, kNumClasses)))) ==
            y[i])
          ++correct;
    }
    EpochStats st;
    st.epoch = epoch;
    st.train_loss = loss_sum / static_cast<double>(train.size());
    st.train_acc = static_cast<double>(correct) / static_cast<double>(train.size());
    std::tie(st.val_loss, st.val_acc) = detail::evaluate(model, val, dims);
    res.history.push_back(st);
    if (res.best_epoch == 0 || st.val_acc > res.best_val_acc) {
      res.best = model;
      res.best_epoch = epoch;
      res.best_val_acc = st.val_acc;
    }
    if (log) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "fold %d epoch %d: train_loss %.4f train_acc %.4f val_loss %.4f val_acc %.4f",
                    fold, epoch, st.train_loss, st.train_acc, st.val_loss, st.val_acc);
      log(buf);
    }
  }
  return res;
}

inline void write_history_csv(const std::vector<EpochStats>& h, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write '" + path.string() + "'");
  os << "epoch,train_loss,train_acc,val_loss,val_acc\n";
  for (const auto& e : h)
    os << e.epoch << ',' << csv::format_double(e.train_loss) << ',' << csv::format_double(e.train_acc) << ','
       << csv::format_double(e.val_loss) << ',' << csv::format_double(e.val_acc) << '\n';
}

inline std::vector<EpochStats> read_history_csv(const std::filesystem::path& path) {
  const auto rows = csv::read_rows(path);
  std::vector<EpochStats> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != 5) throw DataError("malformed history row in '" + path.string() + "'");
    out.push_back({std::stoi(rows[i][0]), std::stod(rows[i][1]), std::stod(rows[i][2]), std::stod(rows[i][3]),
                   std::stod(rows[i][4])});
  }
  return out;
}

struct TrainOptions {
  unsigned jobs = 1;
  std::filesystem::path cache_dir;
  LogFn log;
  /// Reuse preprocessed series across runs.
  SeriesCache* cache = nullptr;
};

struct CvResult {
  EnsembleModel ensemble;
  std::vector<FoldResult> folds;
  std::vector<FoldSplit> splits;
};

/// Trains every fold and writes the run directory:
///   config.json, fold<k>/best.ckpt, fold<k>/history.csv
inline CvResult train_cv(const DatasetManifest& manifest, const TrainConfig& cfg, const std::filesystem::path& out_dir,
                         const TrainOptions& opt = {}, nlohmann::json extra_config = nlohmann::json::object()) {
  cfg.validate();
  if (manifest.records.empty()) throw DataError("training manifest is empty");
  std::vector<Model<float>> bases;
  if (cfg.finetune()) {
    const std::filesystem::path from = cfg.finetune_from;
    if (std::filesystem::is_directory(from)) {
      if (!std::filesystem::exists(from / ("fold" + std::to_string(cfg.folds - 1)) / "best.ckpt"))
        throw DataError("fine-tune run '" + from.string() + "' has fewer than " + std::to_string(cfg.folds) + " folds");
      for (int k = 0; k < cfg.folds; ++k)
        bases.push_back(load_checkpoint<float>(from / ("fold" + std::to_string(k)) / "best.ckpt", cfg.model));
    } else {
      bases.push_back(load_checkpoint<float>(from, cfg.model));
    }
  }

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create run directory '" + out_dir.string() + "': " + ec.message());
  nlohmann::json cj = cfg;
  for (auto& [k, v] : extra_config.items()) cj[k] = v;
  {
    std::ofstream os(out_dir / "config.json", std::ios::trunc);
    os << cj.dump(2) << '\n';
    if (!os) throw DataError("cannot write '" + (out_dir / "config.json").string() + "'");
  }

  const DatasetManifest pool = subset_fraction(manifest, cfg.data_fraction, cfg.seed);
  auto splits = split_patient_level(pool, cfg.val_ratio, cfg.folds, cfg.seed);
  for (const auto& s : splits) {
    std::set<std::string> tp;
    for (const auto& r : s.train) tp.insert(r.patient_id);
    for (const auto& r : s.val)
      if (tp.count(r.patient_id)) throw std::logic_error("patient " + r.patient_id + " leaked across the split");
  }

  std::optional<SeriesCache> own;
  SeriesCache* cache = opt.cache;
  if (!cache || !(cache->config() == cfg.preprocess)) cache = &own.emplace(cfg.preprocess, opt.cache_dir);
  const auto all = cache->prepare(pool, pool.records, opt.jobs);
  std::map<std::string, const PreparedSeries*> by_path;
  for (std::size_t i = 0; i < pool.records.size(); ++i) by_path[pool.records[i].volume_path + "\n" + pool.records[i].patient_id + "\n" + pool.records[i].study_id] = all[i];
  auto lookup = [&](const std::vector<SeriesRecord>& recs) {
    std::vector<const PreparedSeries*> out;
    for (const auto& r : recs) out.push_back(by_path.at(r.volume_path + "\n" + r.patient_id + "\n" + r.study_id));
    return out;
  };

  std::vector<std::optional<FoldResult>> results(splits.size());
  std::vector<std::exception_ptr> errors(splits.size());
  std::mutex log_mu;
  LogFn log;
  if (opt.log)
    log = [&](const std::string& s) {
      std::lock_guard lk(log_mu);
      opt.log(s);
    };
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k; (k = next.fetch_add(1)) < splits.size();) {
      try {
        Model<float> init = bases.empty()   ? Model<float>(cfg.model, derive_seed(cfg.seed, "init", {k}))
                            : bases.size() == 1 ? bases.front()
                                                : bases[k];
        results[k] = train_fold(std::move(init), lookup(splits[k].train), lookup(splits[k].val), cfg,
                                static_cast<int>(k), log);
        const auto dir = out_dir / ("fold" + std::to_string(k));
        std::filesystem::create_directories(dir);
        save_checkpoint(results[k]->best, dir / "best.ckpt");
        write_history_csv(results[k]->history, dir / "history.csv");
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const unsigned jobs = std::clamp<unsigned>(opt.jobs, 1, static_cast<unsigned>(splits.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool_threads;
    for (unsigned t = 0; t < jobs; ++t) pool_threads.emplace_back(worker);
    for (auto& th : pool_threads) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  CvResult out;
  out.ensemble.config = cfg.model;
  out.ensemble.preprocess = cfg.preprocess;
  for (auto& r : results) {
    out.ensemble.members.push_back(r->best);
    out.folds.push_back(std::move(*r));
  }
  out.splits = std::move(splits);
  return out;
}

}  // namespace mriseq
