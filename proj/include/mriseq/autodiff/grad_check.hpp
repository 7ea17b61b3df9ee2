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

// Central finite-difference verification of analytic gradients (64-bit).

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mriseq/autodiff/ops.hpp"
#include "mriseq/autodiff/tensor.hpp"

namespace mriseq::ad {

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor of the relative error, so gradients that are zero
  /// analytically compare on an absolute scale.
  double denom_floor = 1e-6;
  /// 0 checks every element; otherwise a seeded random subset per block.
  std::size_t max_per_block = 0;
  std::uint64_t seed = 0;
};

struct GradCheckBlock {
  std::string name;
  std::size_t checked = 0;
  /// Elements whose +h/-h evaluations took different ReLU/max-pool branches;
  /// finite differences are not valid there.
  std::size_t skipped_kinks = 0;
  double max_rel_error = 0;
  double max_abs_error = 0;
  /// Per checked element: (relative, absolute) error.
  std::vector<std::pair<double, double>> errors;
};

struct GradCheckReport {
  std::vector<GradCheckBlock> blocks;

  double max_rel_error() const {
    double m = 0;
    for (const auto& b : blocks) m = std::max(m, b.max_rel_error);
    return m;
  }
  std::size_t checked() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.checked;
    return n;
  }
  std::size_t skipped() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.skipped_kinks;
    return n;
  }
  bool passed(double tol) const { return max_rel_error() < tol; }
  /// Elements failing both the relative and the absolute bound.
  std::size_t count_exceeding(double rel_tol, double abs_tol) const {
    std::size_t n = 0;
    for (const auto& b : blocks)
      for (const auto& [r, a] : b.errors) n += (r >= rel_tol && a >= abs_tol);
    return n;
  }
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// `loss_fn` rebuilds the graph and returns a scalar; `blocks` are the named
/// tensors (parameters or inputs) to verify. Each block is perturbed in place
/// and restored.
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn,
                                  std::vector<std::pair<std::string, Tensor<double>>> blocks,
                                  const GradCheckOptions& opt = {}) {
  for (auto& [name, t] : blocks) t.zero_grad();
  {
    auto loss = loss_fn();
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& [name, t] : blocks) {
    if (t.has_grad())
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    else
      analytic.emplace_back(t.numel(), 0.0);
  }

  auto& mon = KinkMonitor::local();
  auto eval = [&](std::uint64_t& signature) {
    NoGradGuard ng;
    mon.start();
    const double v = loss_fn().item();
    signature = mon.stop();
    return v;
  };

  std::mt19937_64 rng(opt.seed);
  GradCheckReport report;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto& [name, t] = blocks[b];
    GradCheckBlock res;
    res.name = name;
    std::vector<std::size_t> idx(t.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opt.max_per_block > 0 && idx.size() > opt.max_per_block) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_per_block);
      std::sort(idx.begin(), idx.end());
    }
    auto data = t.data();
    for (std::size_t i : idx) {
      const double orig = data[i];
      std::uint64_t sp = 0, sm = 0;
      data[i] = orig + opt.step;
      const double fp = eval(sp);
      data[i] = orig - opt.step;
      const double fm = eval(sm);
      data[i] = orig;
      if (sp != sm) {
        ++res.skipped_kinks;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double a = analytic[b][i];
      const double rel = relative_error(a, numeric, opt.denom_floor);
      res.max_abs_error = std::max(res.max_abs_error, std::abs(a - numeric));
      res.max_rel_error = std::max(res.max_rel_error, rel);
      res.errors.emplace_back(rel, std::abs(a - numeric));
      ++res.checked;
    }
    report.blocks.push_back(std::move(res));
  }
  return report;
}

}  // namespace mriseq::ad
