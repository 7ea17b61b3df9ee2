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

// Confusion matrices, one-vs-rest rates, rank AUC, bootstrap intervals and
// McNemar's paired test.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mriseq/error.hpp"
#include "mriseq/inference.hpp"
#include "mriseq/labels.hpp"

namespace mriseq {

/// Rows are true labels, columns predicted labels.
struct ConfusionMatrix {
  std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses> counts{};

  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (const auto& r : counts)
      for (auto c : r) n += c;
    return n;
  }
  std::uint64_t trace() const {
    std::uint64_t n = 0;
    for (std::size_t i = 0; i < kNumClasses; ++i) n += counts[i][i];
    return n;
  }
  std::uint64_t support(std::size_t c) const {
    std::uint64_t n = 0;
    for (auto v : counts[c]) n += v;
    return n;
  }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> truths) {
  if (preds.size() != truths.size())
    throw ShapeError("confusion: " + std::to_string(preds.size()) + " predictions vs " +
                     std::to_string(truths.size()) + " truths");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || preds[i] >= static_cast<int>(kNumClasses) || truths[i] < 0 ||
        truths[i] >= static_cast<int>(kNumClasses))
      throw ShapeError("confusion: label index out of range at position " + std::to_string(i));
    ++cm.counts[truths[i]][preds[i]];
  }
  return cm;
}

struct ClassRates {
  double precision = 0, sensitivity = 0, specificity = 0, f1 = 0;
  std::uint64_t support = 0;
};

struct CoreMetrics {
  std::array<ClassRates, kNumClasses> per_class{};
  double precision = 0, sensitivity = 0, specificity = 0, f1 = 0;
  double accuracy = 0;
};

/// One-vs-rest rates per class. Macro values average the classes with
/// nonzero support. 0/0 gives 0 for precision and sensitivity and 1 for
/// specificity.
inline CoreMetrics per_class_metrics(const ConfusionMatrix& cm) {
  const std::uint64_t N = cm.total();
  if (N == 0) throw DataError("metrics of an empty confusion matrix");
  CoreMetrics m;
  std::size_t present = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    std::uint64_t tp = cm.counts[c][c], fn = 0, fp = 0;
    for (std::size_t k = 0; k < kNumClasses; ++k) {
      if (k == c) continue;
      fn += cm.counts[c][k];
      fp += cm.counts[k][c];
    }
    const std::uint64_t tn = N - tp - fn - fp;
    auto& r = m.per_class[c];
    r.support = tp + fn;
    r.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    r.sensitivity = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    r.specificity = tn + fp ? static_cast<double>(tn) / static_cast<double>(tn + fp) : 1.0;
    r.f1 = tp ? 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn) : 0.0;
    if (r.support == 0) continue;
    ++present;
    m.precision += r.precision;
    m.sensitivity += r.sensitivity;
    m.specificity += r.specificity;
    m.f1 += r.f1;
  }
  const double P = static_cast<double>(present);
  m.precision /= P;
  m.sensitivity /= P;
  m.specificity /= P;
  m.f1 /= P;
  m.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(N);
  return m;
}

/// Mann-Whitney AUC of `scores` for the positives, midranks for ties.
/// Returns NaN when either side is empty.
inline double auc_binary(std::span<const double> scores, std::span<const char> positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j + 1);
    for (std::size_t k = i; k < j; ++k)
      if (positive[idx[k]]) {
        rank_sum += mid;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::numeric_limits<double>::quiet_NaN();
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1) / 2) / (np * static_cast<double>(n_neg));
}

struct AucResult {
  std::array<double, kNumClasses> per_class;  // NaN for classes without positives or negatives
  double macro = 0;
};

/// One-vs-rest AUC per class; the macro mean skips classes absent from truths.
inline AucResult auc_ovr(std::span<const ClassProbs> probs, std::span<const int> truths) {
  if (probs.size() != truths.size()) throw ShapeError("auc_ovr: probability/truth length mismatch");
  AucResult r;
  std::vector<double> s(probs.size());
  std::vector<char> pos(probs.size());
  std::size_t used = 0;
  double acc = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    for (std::size_t i = 0; i < probs.size(); ++i) {
      s[i] = probs[i][c];
      pos[i] = truths[i] == static_cast<int>(c);
    }
    r.per_class[c] = auc_binary(s, pos);
    if (!std::isnan(r.per_class[c])) {
      acc += r.per_class[c];
      ++used;
    }
  }
  if (used == 0) throw DataError("auc_ovr: no class has both positives and negatives");
  r.macro = acc / static_cast<double>(used);
  return r;
}

struct Interval {
  double lo = 0, hi = 0;
};

/// Linear-interpolation percentile of already sorted values.
inline double sorted_quantile(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  if (i + 1 >= v.size()) return v.back();
  return v[i] + (pos - static_cast<double>(i)) * (v[i + 1] - v[i]);
}

/// Percentile interval of `metric` over bootstrap resamples of N series.
/// `metric` receives the resampled indices; NaN results are dropped.
inline Interval bootstrap_ci(const std::function<double(std::span<const std::size_t>)>& metric, std::size_t n,
                             std::size_t resamples = 1000, double level = 0.95, std::uint64_t seed = 0) {
  if (n == 0) throw DataError("bootstrap of an empty sample");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> idx(n);
  std::vector<double> vals;
  vals.reserve(resamples);
  for (std::size_t b = 0; b < resamples; ++b) {
    for (auto& i : idx) i = pick(rng);
    const double v = metric(idx);
    if (!std::isnan(v)) vals.push_back(v);
  }
  if (vals.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  std::sort(vals.begin(), vals.end());
  const double a = (1.0 - level) / 2.0;
  return {sorted_quantile(vals, a), sorted_quantile(vals, 1.0 - a)};
}

struct Estimate {
  double value = 0;
  Interval ci;
};

struct MetricReport {
  std::size_t n = 0;
  ConfusionMatrix confusion;
  Estimate accuracy, precision, sensitivity, specificity, f1, auc;
  struct PerClass {
    std::uint64_t support = 0;
    Estimate precision, sensitivity, specificity, f1, auc;
  };
  std::array<PerClass, kNumClasses> per_class{};
};

/// Point estimates plus bootstrap intervals for every metric. All metrics
/// share the same resamples. Intervals are widened to include the point
/// estimate when the percentile interval misses it.
inline MetricReport evaluate_predictions(std::span<const int> preds, std::span<const ClassProbs> probs,
                                         std::span<const int> truths, std::size_t resamples = 1000,
                                         double level = 0.95, std::uint64_t seed = 0) {
  if (preds.size() != truths.size() || probs.size() != truths.size())
    throw ShapeError("evaluate_predictions: length mismatch");
  MetricReport r;
  r.n = truths.size();
  r.confusion = confusion(preds, truths);
  const auto core = per_class_metrics(r.confusion);
  const auto auc = auc_ovr(probs, truths);

  // values[k] collects metric k over resamples
  constexpr std::size_t kAgg = 6, kPer = 5;
  const std::size_t K = kAgg + kPer * kNumClasses;
  std::vector<std::vector<double>> values(K);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, r.n - 1);
  std::vector<int> bp(r.n), bt(r.n);
  std::vector<ClassProbs> bpr(r.n);
  for (std::size_t b = 0; b < resamples; ++b) {
    for (std::size_t i = 0; i < r.n; ++i) {
      const auto j = pick(rng);
      bp[i] = preds[j];
      bt[i] = truths[j];
      bpr[i] = probs[j];
    }
    const auto c = per_class_metrics(confusion(bp, bt));
    double bauc_macro = std::numeric_limits<double>::quiet_NaN();
    std::array<double, kNumClasses> bauc;
    bauc.fill(std::numeric_limits<double>::quiet_NaN());
    try {
      const auto a = auc_ovr(bpr, bt);
      bauc_macro = a.macro;
      bauc = a.per_class;
    } catch (const DataError&) {
    }
    const std::array<double, kAgg> agg{c.accuracy, c.precision, c.sensitivity, c.specificity, c.f1, bauc_macro};
    for (std::size_t k = 0; k < kAgg; ++k) values[k].push_back(agg[k]);
    for (std::size_t cl = 0; cl < kNumClasses; ++cl) {
      const auto& pc = c.per_class[cl];
      const std::array<double, kPer> v{pc.precision, pc.sensitivity, pc.specificity, pc.f1, bauc[cl]};
      for (std::size_t k = 0; k < kPer; ++k) values[kAgg + cl * kPer + k].push_back(v[k]);
    }
  }
  const double a = (1.0 - level) / 2.0;
  auto est = [&](double point, std::size_t k) {
    auto& v = values[k];
    v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
    Estimate e{point, {point, point}};
    if (v.empty() || std::isnan(point)) return e;
    std::sort(v.begin(), v.end());
    e.ci = {std::min(point, sorted_quantile(v, a)), std::max(point, sorted_quantile(v, 1.0 - a))};
    return e;
  };
  r.accuracy = est(core.accuracy, 0);
  r.precision = est(core.precision, 1);
  r.sensitivity = est(core.sensitivity, 2);
  r.specificity = est(core.specificity, 3);
  r.f1 = est(core.f1, 4);
  r.auc = est(auc.macro, 5);
  for (std::size_t cl = 0; cl < kNumClasses; ++cl) {
    const auto& pc = core.per_class[cl];
    auto& out = r.per_class[cl];
    out.support = pc.support;
    const std::size_t base = kAgg + cl * kPer;
    out.precision = est(pc.precision, base);
    out.sensitivity = est(pc.sensitivity, base + 1);
    out.specificity = est(pc.specificity, base + 2);
    out.f1 = est(pc.f1, base + 3);
    out.auc = est(auc.per_class[cl], base + 4);
  }
  return r;
}

inline nlohmann::json estimate_json(const Estimate& e) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  return {{"value", num(e.value)}, {"ci95", {num(e.ci.lo), num(e.ci.hi)}}};
}

inline nlohmann::json report_json(const MetricReport& r) {
  nlohmann::json j;
  j["n"] = r.n;
  j["accuracy"] = estimate_json(r.accuracy);
  j["precision"] = estimate_json(r.precision);
  j["sensitivity"] = estimate_json(r.sensitivity);
  j["specificity"] = estimate_json(r.specificity);
  j["f1"] = estimate_json(r.f1);
  j["auc"] = estimate_json(r.auc);
  nlohmann::json pc = nlohmann::json::object();
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const auto& p = r.per_class[c];
    pc[std::string(label_name(label_from_index(c)))] = {{"support", p.support},
                                                         {"precision", estimate_json(p.precision)},
                                                         {"sensitivity", estimate_json(p.sensitivity)},
                                                         {"specificity", estimate_json(p.specificity)},
                                                         {"f1", estimate_json(p.f1)},
                                                         {"auc", estimate_json(p.auc)}};
  }
  j["per_class"] = pc;
  nlohmann::json cm = nlohmann::json::array();
  for (const auto& row : r.confusion.counts) cm.push_back(row);
  j["confusion"] = cm;
  return j;
}

/// 8x8 counts with canonical labels as header row and column.
inline void write_confusion_csv(const ConfusionMatrix& cm, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write '" + path.string() + "'");
  os << "true\\pred";
  for (auto l : kAllLabels) os << ',' << label_name(l);
  os << '\n';
  for (std::size_t t = 0; t < kNumClasses; ++t) {
    os << label_name(label_from_index(t));
    for (auto v : cm.counts[t]) os << ',' << v;
    os << '\n';
  }
}

/// Survival function of the chi-square distribution with one degree of freedom.
inline double chi2_sf_1(double x) { return x <= 0 ? 1.0 : std::erfc(std::sqrt(x / 2.0)); }

/// Two-sided exact binomial p-value for k successes in n trials at p = 0.5.
inline double binomial_two_sided(std::uint64_t k, std::uint64_t n) {
  if (n == 0) return 1.0;
  const std::uint64_t m = std::min(k, n - k);
  double tail = 0;
  for (std::uint64_t i = 0; i <= m; ++i)
    tail += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::log(2.0));
  return std::min(1.0, 2.0 * tail);
}

struct McNemarResult {
  /// Continuity-corrected chi-square, or min(b, c) on the exact branch.
  double statistic = 0;
  double p_value = 1;
  std::uint64_t b = 0, c = 0;
  bool exact = true;
};

/// b counts series A got right and B got wrong; c the reverse.
inline McNemarResult mcnemar_from_counts(std::uint64_t b, std::uint64_t c) {
  McNemarResult r;
  r.b = b;
  r.c = c;
  const std::uint64_t n = b + c;
  if (n >= 25) {
    const double d = std::abs(static_cast<double>(b) - static_cast<double>(c)) - 1.0;
    r.exact = false;
    r.statistic = d * d / static_cast<double>(n);
    r.p_value = chi2_sf_1(r.statistic);
  } else {
    r.statistic = static_cast<double>(std::min(b, c));
    r.p_value = binomial_two_sided(b, n);
  }
  return r;
}

inline McNemarResult mcnemar(std::span<const int> preds_a, std::span<const int> preds_b, std::span<const int> truths) {
  if (preds_a.size() != truths.size() || preds_b.size() != truths.size())
    throw ShapeError("mcnemar: prediction/truth length mismatch");
  std::uint64_t b = 0, c = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const bool ca = preds_a[i] == truths[i], cb = preds_b[i] == truths[i];
    if (ca && !cb) ++b;
    if (!ca && cb) ++c;
  }
  return mcnemar_from_counts(b, c);
}

}  // namespace mriseq
