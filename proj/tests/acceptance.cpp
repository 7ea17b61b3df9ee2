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
// Acceptance gate. Runs every criterion and prints one PASS/FAIL line each.
//
//   acceptance [--work DIR] [--only 1,2,...] [--reuse]
//
// Training criteria drive the command-line front end on synthetic phantoms
// under DIR. --reuse keeps finished runs from an earlier invocation. The
// lines are also written to DIR/results.txt.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mriseq/autodiff/grad_check.hpp"
#include "mriseq/cli.hpp"
#include "mriseq/mriseq.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mriseq;
using mriseq::testing::random_vector;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char b[64];
  std::snprintf(b, sizeof b, f, v);
  return b;
}

void check(Outcome& o, bool ok, const std::string& what) {
  if (!ok) {
    o.pass = false;
    o.detail += (o.detail.empty() ? "" : "; ") + std::string("FAILED ") + what;
  }
}

void note(Outcome& o, const std::string& s) { o.detail += (o.detail.empty() ? "" : "; ") + s; }

template <typename T>
ad::Tensor<T> rand_tensor(ad::Shape s, std::uint64_t seed, bool rg = true, double lo = -1, double hi = 1) {
  auto v = random_vector(ad::numel(s), seed, lo, hi);
  return ad::Tensor<T>::from(std::move(s), std::vector<T>(v.begin(), v.end()), rg);
}

// ---------------------------------------------------------------- 1

Outcome gradients() {
  using ad::Tensor;
  Outcome o;
  double worst = 0;
  std::size_t checked = 0, skipped = 0;
  std::uint64_t seed = 1000;
  auto run = [&](const std::string& name, const std::function<Tensor<double>()>& f,
                 std::vector<std::pair<std::string, Tensor<double>>> blocks) {
    const auto rep = ad::grad_check(f, blocks);
    worst = std::max(worst, rep.max_rel_error());
    checked += rep.checked();
    skipped += rep.skipped();
    check(o, rep.max_rel_error() < 1e-4, name + " rel " + fmt("%.2e", rep.max_rel_error()));
  };
  auto probe_for = [&](const Tensor<double>& y) { return rand_tensor<double>(y.shape(), seed++, false); };

  auto a = rand_tensor<double>({2, 3, 3, 2, 2}, seed++), b = rand_tensor<double>({2, 3, 3, 2, 2}, seed++);
  auto pa = probe_for(a);
  run("add", [&] { return ad::sum(ad::mul(ad::add(a, b), pa)); }, {{"a", a}, {"b", b}});
  run("mul", [&] { return ad::sum(ad::mul(ad::mul(a, b), pa)); }, {{"a", a}, {"b", b}});
  run("scale", [&] { return ad::sum(ad::mul(ad::scale(a, 1.7), pa)); }, {{"a", a}});
  run("relu", [&] { return ad::sum(ad::mul(ad::relu(a), pa)); }, {{"a", a}});

  struct Conv {
    std::size_t C, F, X, Y, Z, k, stride, pad;
  };
  for (const Conv& c : {Conv{2, 3, 4, 4, 3, 3, 1, 1}, Conv{2, 2, 5, 4, 4, 3, 2, 1}, Conv{3, 2, 3, 3, 3, 1, 1, 0}}) {
    auto x = rand_tensor<double>({2, c.C, c.X, c.Y, c.Z}, seed++);
    auto w = rand_tensor<double>({c.F, c.C, c.k, c.k, c.k}, seed++);
    auto bias = rand_tensor<double>({c.F}, seed++);
    auto p = probe_for(ad::conv3d(x, w, bias, c.stride, c.pad));
    run("conv3d", [&] { return ad::sum(ad::mul(ad::conv3d(x, w, bias, c.stride, c.pad), p)); },
        {{"x", x}, {"w", w}, {"b", bias}});
  }
  for (bool training : {true, false}) {
    auto g = rand_tensor<double>({3}, seed++, true, 0.5, 1.5), beta = rand_tensor<double>({3}, seed++);
    ad::BatchNormStats<double> st(3);
    st.running_mean = {0.1, -0.2, 0.3};
    st.running_var = {0.5, 1.5, 2.0};
    run(training ? "batchnorm(train)" : "batchnorm(eval)",
        [&] { return ad::sum(ad::mul(ad::batchnorm3d(a, g, beta, st, training), pa)); },
        {{"x", a}, {"gamma", g}, {"beta", beta}});
  }
  auto x = rand_tensor<double>({2, 2, 5, 4, 3}, seed++);
  auto pm = probe_for(ad::maxpool3d(x, 3, 2, 1)), pv = probe_for(ad::avgpool3d(x, 2, 2));
  auto pg = probe_for(ad::global_avg_pool(x));
  run("maxpool3d", [&] { return ad::sum(ad::mul(ad::maxpool3d(x, 3, 2, 1), pm)); }, {{"x", x}});
  run("avgpool3d", [&] { return ad::sum(ad::mul(ad::avgpool3d(x, 2, 2), pv)); }, {{"x", x}});
  run("global_avg_pool", [&] { return ad::sum(ad::mul(ad::global_avg_pool(x), pg)); }, {{"x", x}});
  auto c1 = rand_tensor<double>({2, 2, 2, 2, 2}, seed++), c2 = rand_tensor<double>({2, 3, 2, 2, 2}, seed++);
  auto pc = probe_for(ad::concat_channels<double>({c1, c2}));
  run("concat", [&] { return ad::sum(ad::mul(ad::concat_channels<double>({c1, c2}), pc)); }, {{"a", c1}, {"b", c2}});
  auto lx = rand_tensor<double>({3, 5}, seed++), lw = rand_tensor<double>({4, 5}, seed++);
  auto lb = rand_tensor<double>({4}, seed++);
  auto pl = probe_for(ad::linear(lx, lw, lb));
  run("linear", [&] { return ad::sum(ad::mul(ad::linear(lx, lw, lb), pl)); }, {{"x", lx}, {"w", lw}, {"b", lb}});
  auto logits = rand_tensor<double>({3, 8}, seed++, true, -3, 3);
  auto ps = probe_for(logits);
  const std::vector<int> targets{1, 7, 4};
  run("softmax", [&] { return ad::sum(ad::mul(ad::softmax(logits), ps)); }, {{"x", logits}});
  run("log_softmax", [&] { return ad::sum(ad::mul(ad::log_softmax(logits), ps)); }, {{"x", logits}});
  run("cross_entropy", [&] { return ad::cross_entropy(logits, targets); }, {{"x", logits}});
  run("pick", [&] { return ad::pick(ad::softmax(logits), 9); }, {{"x", logits}});
  note(o, "primitives max rel " + fmt("%.2e", worst) + " over " + std::to_string(checked) + " elements (" +
              std::to_string(skipped) + " kink-crossing skipped)");

  for (auto arch : {Arch::DenseNet3D, Arch::ResNet3D}) {
    for (bool training : {false, true}) {
      Model<double> m(ModelConfig::toy(arch), 21);
      auto in = rand_tensor<double>({2, 1, 24, 24, 16}, 4, true, 0, 1);
      const std::vector<int> y{3, 6};
      std::vector<std::pair<std::string, Tensor<double>>> blocks{{"input", in}};
      for (auto& p : m.parameters()) blocks.emplace_back(p.name, p.tensor);
      ad::GradCheckOptions opt;
      opt.max_per_block = 4;
      opt.seed = 8;
      const auto rep = ad::grad_check([&] { return ad::cross_entropy(m.forward(in, training), y); }, blocks, opt);
      const std::string tag = arch_name(arch) + (training ? "(train)" : "(eval)");
      if (training) {
        // batch statistics leave some gradients at the rounding level of the quotient
        const auto bad = rep.count_exceeding(1e-4, 1e-9);
        check(o, bad == 0, tag + " " + std::to_string(bad) + " elements above rel 1e-4 and abs 1e-9");
        note(o, tag + " rel " + fmt("%.2e", rep.max_rel_error()) + " (rel<1e-4 or abs<1e-9 on all " +
                    std::to_string(rep.checked()) + ")");
      } else {
        check(o, rep.max_rel_error() < 1e-4, tag + " rel " + fmt("%.2e", rep.max_rel_error()));
        note(o, tag + " rel " + fmt("%.2e", rep.max_rel_error()) + " on " + std::to_string(rep.checked()));
      }
      check(o, rep.checked() > 4 * rep.skipped(), tag + " too many kink skips");
    }
  }
  return o;
}

// ---------------------------------------------------------------- 2

long double oracle_percentile(std::vector<float> v, double q) {
  std::sort(v.begin(), v.end());
  const long double r = static_cast<long double>(q) / 100.0L * static_cast<long double>(v.size() - 1);
  const long double f = std::floor(r);
  const auto i = static_cast<std::size_t>(f);
  const std::size_t j = i + 1 < v.size() ? i + 1 : i;
  return v[i] + (r - f) * (static_cast<long double>(v[j]) - v[i]);
}

Volume3D random_volume(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> nd(1, 48), nz(1, 14);
  std::uniform_real_distribution<double> sp(0.4, 6.0);
  const Dims d{nd(rng), nd(rng), nz(rng)};
  std::vector<float> v(Volume3D::voxel_count(d));
  std::lognormal_distribution<float> val(0.0f, 1.5f);
  for (auto& x : v) x = val(rng);
  std::array<int, 3> perm{0, 1, 2};
  std::shuffle(perm.begin(), perm.end(), rng);
  const AxisCode base[3] = {AxisCode::RL, AxisCode::PA, AxisCode::IS};
  Orientation o{};
  for (int a = 0; a < 3; ++a) o[a] = (rng() & 1) ? flipped(base[perm[a]]) : base[perm[a]];
  return Volume3D(d, {sp(rng), sp(rng), sp(rng)}, o, std::move(v));
}

Outcome preprocessing() {
  Outcome o;
  std::mt19937_64 rng(20260);
  int volumes = 0;
  double worst_pct = 0;
  for (int t = 0; t < 120; ++t) {
    const auto vol = random_volume(rng);
    PreprocessConfig cfg = PreprocessConfig::toy();
    cfg.target_dims = {1 + rng() % 40, 1 + rng() % 40, 1 + rng() % 12};
    cfg.target_spacing = {0.5 + (rng() % 50) / 10.0, 0.5 + (rng() % 50) / 10.0, 0.5 + (rng() % 80) / 10.0};
    const auto out = preprocess_pipeline(vol, cfg);
    ++volumes;
    check(o, out.dims() == cfg.target_dims, "dims of volume " + std::to_string(t));
    check(o, out.orientation() == kCanonicalOrientation, "orientation of volume " + std::to_string(t));
    bool in_range = true;
    for (float x : out.data()) in_range = in_range && std::isfinite(x) && x >= 0.0f && x <= 1.0f;
    check(o, in_range, "range of volume " + std::to_string(t));

    std::vector<float> raw(vol.data().begin(), vol.data().end());
    for (double q : {0.0, 1.0, 50.0, 99.0, 100.0}) {
      const double got = percentiles(vol.data(), q, 100.0)[0];
      worst_pct = std::max(worst_pct, std::abs(got - static_cast<double>(oracle_percentile(raw, q))));
    }
    const auto bounds = percentiles(vol.data(), 1.0, 99.0);
    const auto c = clip_percentiles(vol, 1.0, 99.0);
    const float lo = static_cast<float>(oracle_percentile(raw, 1.0)), hi = static_cast<float>(oracle_percentile(raw, 99.0));
    bool clamp_ok = true;
    for (std::size_t i = 0; i < c.size(); ++i) clamp_ok = clamp_ok && c.data()[i] == std::min(std::max(raw[i], lo), hi);
    check(o, clamp_ok, "clip vs oracle clamp on volume " + std::to_string(t));
    check(o, clip_range(c, bounds[0], bounds[1]) == c, "clip idempotence on volume " + std::to_string(t));
  }
  check(o, worst_pct <= 1e-6, "percentile error " + fmt("%.2e", worst_pct));
  note(o, std::to_string(volumes) + " volumes hit target dims; percentile max abs error " + fmt("%.2e", worst_pct) +
              "; clip at fixed bounds idempotent");
  return o;
}

// ---------------------------------------------------------------- 3

long double chi2_sf_oracle(long double x) {
  const long double a = 0.5L, z = x / 2;
  long double term = 1.0L / std::tgamma(a + 1), sum = term;
  for (int n = 1; n < 400; ++n) {
    term *= z / (a + n);
    sum += term;
  }
  return 1.0L - std::pow(z, a) * std::exp(-z) * sum;
}

long double binomial_oracle(std::uint64_t b, std::uint64_t c) {
  const std::uint64_t n = b + c, k = std::min(b, c);
  long double tail = 0, coef = 1;
  for (std::uint64_t i = 0; i <= k; ++i) {
    tail += coef;
    coef = coef * static_cast<long double>(n - i) / static_cast<long double>(i + 1);
  }
  return std::min(1.0L, 2.0L * tail / std::pow(2.0L, static_cast<long double>(n)));
}

Outcome metrics() {
  Outcome o;
  std::mt19937_64 rng(4242);
  std::size_t exact = 0, near = 0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<int> preds, truths;
    const int sparsity = static_cast<int>(rng() % 4);
    for (int tr = 0; tr < 8; ++tr)
      for (int pr = 0; pr < 8; ++pr) {
        const int n = static_cast<int>(rng() % 4) < sparsity ? 0 : static_cast<int>(rng() % 12);
        for (int k = 0; k < n; ++k) {
          truths.push_back(tr);
          preds.push_back(pr);
        }
      }
    if (preds.empty()) preds = truths = {0};
    const auto m = per_class_metrics(confusion(preds, truths));
    auto ratio = [](std::uint64_t n, std::uint64_t d, double zz) {
      return d == 0 ? zz : static_cast<double>(n) / static_cast<double>(d);
    };
    std::uint64_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == truths[i];
    bool ok = m.accuracy == ratio(correct, preds.size(), 0);
    double sp = 0, ss = 0, sx = 0, sf = 0;
    int present = 0;
    for (int c = 0; c < 8; ++c) {
      std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        const bool pp = preds[i] == c, tt = truths[i] == c;
        tp += pp && tt;
        fp += pp && !tt;
        fn += !pp && tt;
        tn += !pp && !tt;
      }
      const auto& r = m.per_class[c];
      ok = ok && r.precision == ratio(tp, tp + fp, 0) && r.sensitivity == ratio(tp, tp + fn, 0) &&
           r.specificity == ratio(tn, tn + fp, 1) && r.f1 == ratio(2 * tp, 2 * tp + fp + fn, 0) && r.support == tp + fn;
      exact += 5;
      if (tp + fn == 0) continue;
      ++present;
      sp += r.precision;
      ss += r.sensitivity;
      sx += r.specificity;
      sf += r.f1;
    }
    ok = ok && std::abs(m.precision - sp / present) <= 1e-12 && std::abs(m.sensitivity - ss / present) <= 1e-12 &&
         std::abs(m.specificity - sx / present) <= 1e-12 && std::abs(m.f1 - sf / present) <= 1e-12;
    near += 4;
    check(o, ok, "matrix " + std::to_string(t));
  }
  note(o, "1000 matrices, " + std::to_string(exact) + " rational values exact, " + std::to_string(near) +
              " macro values within 1e-12");

  const auto r1 = mcnemar_from_counts(10, 20), r2 = mcnemar_from_counts(1, 9);
  const double o1 = static_cast<double>(chi2_sf_oracle(81.0L / 30.0L)), o2 = static_cast<double>(binomial_oracle(1, 9));
  check(o, std::abs(r1.p_value - 0.1003) <= 1e-3 && std::abs(r1.p_value - o1) <= 1e-12, "mcnemar(10,20)");
  check(o, std::abs(r2.p_value - 0.0215) <= 1e-3 && std::abs(r2.p_value - o2) <= 1e-12, "mcnemar(1,9)");
  for (std::uint64_t b = 0; b < 20; ++b)
    for (std::uint64_t c = 0; c < 20; ++c) {
      const auto r = mcnemar_from_counts(b, c);
      const long double want = b + c >= 25 ? chi2_sf_oracle(std::pow(std::abs((long double)b - c) - 1, 2) / (b + c))
                                           : binomial_oracle(b, c);
      check(o, std::abs(r.p_value - static_cast<double>(want)) <= 1e-12,
            "mcnemar(" + std::to_string(b) + "," + std::to_string(c) + ")");
    }
  note(o, "mcnemar p(10,20)=" + fmt("%.4f", r1.p_value) + " p(1,9)=" + fmt("%.4f", r2.p_value));
  return o;
}

// ---------------------------------------------------------------- 8

Outcome ensemble_invariants() {
  Outcome o;
  std::mt19937_64 rng(88);
  std::gamma_distribution<double> g(0.7, 1.0);
  double worst_sum = 0;
  for (int t = 0; t < 10000; ++t) {
    const std::size_t F = 1 + rng() % 6;
    std::vector<ClassProbs> folds(F);
    for (auto& p : folds) {
      double s = 0;
      for (auto& v : p) s += (v = g(rng));
      for (auto& v : p) v /= s;
    }
    const auto pred = combine_folds(folds);
    double s = 0;
    std::size_t best = 0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      s += pred.probabilities[c];
      if (pred.probabilities[c] > pred.probabilities[best]) best = c;
      long double mean = 0;
      for (const auto& p : folds) mean += p[c];
      mean /= static_cast<long double>(F);
      if (std::abs(static_cast<long double>(pred.probabilities[c]) - mean) > 1e-12L) {
        check(o, false, "mean probability at fuzz case " + std::to_string(t));
        return o;
      }
    }
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    if (pred.label != label_from_index(best)) {
      check(o, false, "label != argmax at fuzz case " + std::to_string(t));
      return o;
    }
    auto shuffled = folds;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto again = combine_folds(shuffled);
    if (again.probabilities != pred.probabilities || again.label != pred.label) {
      check(o, false, "fold permutation changed prediction at fuzz case " + std::to_string(t));
      return o;
    }
  }
  check(o, worst_sum <= 1e-6, "row sum deviation " + fmt("%.2e", worst_sum));
  note(o, "10000 fuzz cases: max |sum-1| " + fmt("%.2e", worst_sum) + ", label = argmax, bitwise fold-permutation invariant");

  // whole ensembles of three members in two orders
  const auto cfg = ModelConfig::toy_densenet();
  std::vector<Model<float>> members;
  for (std::uint64_t s = 0; s < 3; ++s) members.emplace_back(cfg, 500 + s);
  EnsembleModel e1{cfg, PreprocessConfig::toy(), members};
  EnsembleModel e2{cfg, PreprocessConfig::toy(), {members[2], members[0], members[1]}};
  PhantomConfig pc;
  pc.dims = {40, 40, 10};
  pc.seed = 3;
  std::size_t compared = 0;
  for (const auto& v : generate_study(pc, "P0000", "S00")) {
    const auto pre = preprocess_pipeline(v, PreprocessConfig::toy());
    const auto a = predict_preprocessed(e1, pre), b = predict_preprocessed(e2, pre);
    check(o, a.probabilities == b.probabilities && a.label == b.label, "member order changed an ensemble prediction");
    ++compared;
  }
  note(o, std::to_string(compared) + " ensemble predictions identical under member reordering");
  return o;
}

// ---------------------------------------------------------------- 9

Outcome gradcam_properties() {
  Outcome o;
  std::mt19937_64 rng(99);
  double worst = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t K = 1 + rng() % 6, S = 1 + rng() % 30;
    const auto A = random_vector(K * S, rng(), -1, 1), dA = random_vector(K * S, rng(), -1, 1);
    const auto got = gradcam_map<double>(A, dA, K);
    for (std::size_t s = 0; s < S; ++s) {
      double v = 0;
      for (std::size_t k = 0; k < K; ++k) {
        double w = 0;
        for (std::size_t q = 0; q < S; ++q) w += dA[k * S + q] / static_cast<double>(S);
        v += w * A[k * S + s];
      }
      worst = std::max(worst, std::abs(got[s] - std::max(v, 0.0)));
    }
    // non-negative activations with non-positive gradients
    auto An = random_vector(K * S, rng(), 0, 1), dn = random_vector(K * S, rng(), -1, 0);
    const auto zero = gradcam_map<double>(An, dn, K);
    check(o, std::all_of(zero.begin(), zero.end(), [](double v) { return v == 0.0; }), "zero map case " + std::to_string(t));
  }
  check(o, worst <= 1e-6, "map oracle error " + fmt("%.2e", worst));
  note(o, "200 small-tensor maps within " + fmt("%.1e", worst) + " of the oracle; non-positive gradients give zero maps");

  PhantomConfig pc;
  pc.dims = {40, 40, 10};
  pc.seed = 4;
  const auto study = generate_study(pc, "P0001", "S00");
  std::size_t maps = 0;
  for (auto arch : {Arch::DenseNet3D, Arch::ResNet3D}) {
    Model<float> m(ModelConfig::toy(arch), 31);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      const auto pre = preprocess_pipeline(study[c], PreprocessConfig::toy());
      const auto sal = gradcam(m, pre, static_cast<int>(c));
      const auto [mn, mx] = std::minmax_element(sal.values.begin(), sal.values.end());
      const bool finite = std::all_of(sal.values.begin(), sal.values.end(), [](float v) { return std::isfinite(v); });
      check(o, finite && *mn >= 0.0f && *mx <= 1.0f, arch_name(arch) + " saliency outside [0,1]");
      check(o, *mx == 1.0f || *mx == 0.0f, arch_name(arch) + " saliency not max-normalized");
      check(o, sal.dims == pre.dims(), arch_name(arch) + " saliency dims");
      ++maps;
    }
  }
  note(o, std::to_string(maps) + " model saliency maps non-negative and max-normalized to [0,1]");
  return o;
}

// ---------------------------------------------------------------- training criteria

class Workspace {
 public:
  Workspace(fs::path root, bool reuse) : root_(std::move(root)), reuse_(reuse) {
    if (!reuse_) fs::remove_all(root_);
    fs::create_directories(root_ / "logs");
  }

  fs::path operator/(const std::string& s) const { return root_ / s; }

  void cli(const std::vector<std::string>& args, const std::string& log) {
    std::ostringstream out;
    std::ofstream err(root_ / "logs" / (log + ".log"), std::ios::app);
    const int code = cli_dispatch(args, out, err);
    err << out.str();
    if (code != 0) throw std::runtime_error("'" + args.front() + "' for " + log + " exited with " + std::to_string(code));
  }

  std::string manifest(const std::string& set) const { return (root_ / "data" / set / "manifest.csv").string(); }

  void data() {
    const struct {
      const char* name;
      const char* patients;
      const char* first;
      const char* domain;
    } sets[] = {{"train", "60", "0", "A"}, {"test", "15", "60", "A"}, {"testB", "15", "60", "B"}, {"ftB", "10", "100", "B"}};
    for (const auto& s : sets) {
      if (reuse_ && fs::exists(manifest(s.name))) continue;
      cli({"synth", "--out", (root_ / "data" / s.name).string(), "--patients", s.patients, "--first-patient", s.first,
           "--dims", "64", "64", "16", "--domain", s.domain, "--seed", std::to_string(kDataSeed)},
          "synth");
    }
  }

  /// Trains (unless reusable) and evaluates on the held-out domain-A patients.
  double train(const std::string& name, const std::vector<std::string>& extra, const std::string& pool = "train",
               const std::string& cache = "cache") {
    const fs::path dir = root_ / "runs" / name;
    if (!(reuse_ && fs::exists(dir / "metrics.json"))) {
      fs::remove_all(dir);
      std::vector<std::string> a{"train", "--manifest", manifest(pool), "--toy", "--epochs", "25", "--batch-size", "2",
                                 "--lr", "1e-4", "--folds", "5", "--jobs", "1", "--cache", (root_ / cache).string(),
                                 "--out", dir.string()};
      a.insert(a.end(), extra.begin(), extra.end());
      const auto t0 = Clock::now();
      cli(a, name);
      times_[name] = seconds_since(t0);
      cli({"eval", "--run", dir.string(), "--manifest", manifest("test")}, name);
    }
    return accuracy(dir / "metrics.json");
  }

  /// Accuracy of an existing run on another labeled set.
  double eval_on(const std::string& name, const std::string& set) {
    const fs::path out = root_ / "runs" / name / ("eval_" + set);
    if (!(reuse_ && fs::exists(out / "metrics.json"))) {
      cli({"eval", "--run", (root_ / "runs" / name).string(), "--manifest", manifest(set), "--out", out.string()},
          name);
    }
    return accuracy(out / "metrics.json");
  }

  static double accuracy(const fs::path& metrics) {
    return json::parse(mriseq::detail::slurp(metrics)).at("accuracy").at("value").get<double>();
  }

  std::string train_time(const std::string& name) const {
    auto it = times_.find(name);
    return it == times_.end() ? std::string("reused") : fmt("%.0f s", it->second);
  }

  static constexpr std::uint64_t kDataSeed = 7;

 private:
  fs::path root_;
  bool reuse_;
  std::map<std::string, double> times_;
};

Outcome task1(Workspace& w) {
  Outcome o;
  const double d = w.train("densenet_s1", {"--seed", "1"});
  const double r = w.train("resnet_s1", {"--arch", "resnet3d", "--seed", "1"});
  check(o, d >= 0.95, "densenet accuracy " + fmt("%.4f", d) + " < 0.95");
  check(o, d >= r - 0.02, "densenet " + fmt("%.4f", d) + " < resnet " + fmt("%.4f", r) + " - 0.02");
  note(o, "held-out accuracy densenet " + fmt("%.4f", d) + " resnet " + fmt("%.4f", r) + "; densenet train " +
              w.train_time("densenet_s1"));
  return o;
}

Outcome task2(Workspace& w) {
  Outcome o;
  const double full = w.train("densenet_s1", {"--seed", "1"});
  const double f6 = w.train("fraction_0.6", {"--seed", "1", "--fraction", "0.6"});
  const double f2 = w.train("fraction_0.2", {"--seed", "1", "--fraction", "0.2"});
  check(o, full >= f2, "accuracy(1.0) < accuracy(0.2)");
  check(o, std::abs(f6 - full) <= 0.03, "accuracy(0.6) more than 0.03 from accuracy(1.0)");
  note(o, "accuracy at 0.2/0.6/1.0: " + fmt("%.4f", f2) + " / " + fmt("%.4f", f6) + " / " + fmt("%.4f", full));
  return o;
}

Outcome task3(Workspace& w) {
  Outcome o;
  const double in_a = w.train("densenet_s1", {"--seed", "1"});
  const double on_b = w.eval_on("densenet_s1", "testB");
  const double gap = in_a - on_b;
  const std::string base = (w / "runs" / "densenet_s1").string();
  const double ft_a = w.train("finetune_B", {"--seed", "1", "--finetune", base}, "ftB");
  const double ft_b = w.eval_on("finetune_B", "testB");
  const double recovered = ft_b - on_b;
  check(o, gap >= 0.05, "domain gap " + fmt("%.4f", gap) + " < 0.05");
  check(o, recovered >= gap / 2, "recovered " + fmt("%.4f", recovered) + " < half the gap");
  check(o, in_a - ft_a <= 0.03, "domain A degradation " + fmt("%.4f", in_a - ft_a) + " > 0.03");
  note(o, "A model: A " + fmt("%.4f", in_a) + " B " + fmt("%.4f", on_b) + " (gap " + fmt("%.4f", gap) +
              "); fine-tuned: A " + fmt("%.4f", ft_a) + " B " + fmt("%.4f", ft_b) + " (recovered " +
              fmt("%.0f%%", gap > 0 ? 100 * recovered / gap : 0.0) + ")");
  return o;
}

Outcome seeds(Workspace& w) {
  Outcome o;
  const std::vector<double> acc{w.train("densenet_s1", {"--seed", "1"}), w.train("densenet_s2", {"--seed", "2"}),
                                w.train("densenet_s3", {"--seed", "3"})};
  const auto [mn, mx] = std::minmax_element(acc.begin(), acc.end());
  check(o, *mx - *mn <= 0.03, "seed band " + fmt("%.4f", *mx - *mn) + " > 0.03");
  note(o, "seeds 1/2/3: " + fmt("%.4f", acc[0]) + " / " + fmt("%.4f", acc[1]) + " / " + fmt("%.4f", acc[2]) +
              " (band " + fmt("%.4f", *mx - *mn) + ")");
  return o;
}

Outcome determinism(Workspace& w) {
  Outcome o;
  w.train("densenet_s1", {"--seed", "1"});
  const fs::path dir = w / "runs" / "densenet_s1";
  auto snapshot = [&] {
    std::map<std::string, std::string> files{{"metrics.json", mriseq::detail::slurp(dir / "metrics.json")}};
    for (int k = 0; k < 5; ++k) {
      const std::string f = "fold" + std::to_string(k) + "/best.ckpt";
      files[f] = mriseq::detail::slurp(dir / f);
    }
    return files;
  };
  const auto first = snapshot();
  // same run directory and a fresh preprocessing cache
  const fs::path keep = w / "runs" / "densenet_s1.first";
  fs::remove_all(keep);
  fs::rename(dir, keep);
  fs::remove_all(w / "cache_repeat");
  try {
    w.cli({"train", "--manifest", w.manifest("train"), "--toy", "--epochs", "25", "--batch-size", "2", "--lr", "1e-4",
           "--folds", "5", "--jobs", "1", "--cache", (w / "cache_repeat").string(), "--out", dir.string(), "--seed", "1"},
          "densenet_s1_repeat");
    w.cli({"eval", "--run", dir.string(), "--manifest", w.manifest("test")}, "densenet_s1_repeat");
  } catch (...) {
    fs::remove_all(dir);
    fs::rename(keep, dir);
    throw;
  }
  const auto second = snapshot();
  std::size_t same = 0;
  for (const auto& [name, bytes] : first) {
    const bool eq = second.at(name) == bytes;
    same += eq;
    check(o, eq, name + " differs");
  }
  note(o, std::to_string(same) + "/" + std::to_string(first.size()) +
              " files byte-identical across two seed-1 --jobs 1 runs (5 checkpoints, metrics.json)");
  fs::remove_all(keep);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mriseq acceptance gate"};
  std::string work = "acceptance_work";
  std::vector<int> only;
  bool reuse = false;
  app.add_option("--work", work, "Scratch directory for data and runs");
  app.add_option("--only", only, "Criteria to run")->delimiter(',');
  app.add_flag("--reuse", reuse, "Keep finished runs from an earlier invocation");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int id) { return selected.empty() || selected.count(id) > 0; };

  std::optional<Workspace> ws;
  auto workspace = [&]() -> Workspace& {
    if (!ws) {
      ws.emplace(fs::absolute(work), reuse);
      ws->data();
    }
    return *ws;
  };

  const std::vector<std::pair<int, std::pair<std::string, std::function<Outcome()>>>> criteria{
      {1, {"gradient correctness", gradients}},
      {2, {"preprocessing contract", preprocessing}},
      {3, {"metrics oracle equivalence", metrics}},
      {8, {"ensemble and inference invariants", ensemble_invariants}},
      {9, {"gradcam properties", gradcam_properties}},
      {4, {"series classification on phantoms", [&] { return task1(workspace()); }}},
      {5, {"training-fraction trend", [&] { return task2(workspace()); }}},
      {6, {"domain shift and fine-tuning", [&] { return task3(workspace()); }}},
      {7, {"seed stability", [&] { return seeds(workspace()); }}},
      {10, {"determinism", [&] { return determinism(workspace()); }}},
  };
  const std::map<int, double> budget{{1, 120}, {2, 60}, {3, 60}};

  std::map<int, std::string> lines;
  bool all = true;
  for (const auto& [id, c] : criteria) {
    if (!wanted(id)) continue;
    const auto t0 = Clock::now();
    Outcome out;
    try {
      out = c.second();
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail = std::string("error: ") + e.what();
    }
    const double secs = seconds_since(t0);
    if (auto b = budget.find(id); b != budget.end() && secs >= b->second) {
      out.pass = false;
      note(out, "FAILED runtime " + fmt("%.1f s", secs) + " over " + fmt("%.0f s", b->second));
    }
    std::string line = "criterion " + std::to_string(id) + " (" + c.first + "): " + (out.pass ? "PASS" : "FAIL") +
                       " [" + fmt("%.1f s", secs) + "] " + out.detail;
    std::cout << line << std::endl;
    lines[id] = line;
    all = all && out.pass;
  }
  std::cout << "\nsummary\n";
  for (const auto& [id, l] : lines) std::cout << l.substr(0, l.find(" [")) << '\n';
  fs::create_directories(work);
  std::ofstream results(fs::path(work) / "results.txt", std::ios::trunc);
  for (const auto& [id, l] : lines) results << l << '\n';
  return all ? 0 : 1;
}
