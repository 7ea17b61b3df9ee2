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

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mriseq/autodiff/tensor.hpp"

namespace mriseq::ad {

struct AdamHyper {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct OptimizerState {
  AdamHyper hyper;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t t = 0;

  OptimizerState() = default;
  OptimizerState(AdamHyper h, std::span<const Tensor<T>> params) : hyper(h) {
    for (const auto& p : params) {
      m.emplace_back(p.numel(), T(0));
      v.emplace_back(p.numel(), T(0));
    }
  }
};

/// One bias-corrected Adam update of `params` with the matching `grads`.
template <typename T>
void adam_step(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads,
               OptimizerState<T>& st) {
  if (params.size() != grads.size() || params.size() != st.m.size())
    throw ShapeError("adam_step: parameter/gradient/state count mismatch");
  st.t += 1;
  const auto& h = st.hyper;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(st.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k];
    auto g = grads[k];
    auto& m = st.m[k];
    auto& v = st.v[k];
    if (p.size() != m.size()) throw ShapeError("adam_step: parameter shape changed");
    if (g.empty()) continue;  // untouched by the loss this step
    if (g.size() != p.size()) throw ShapeError("adam_step: gradient shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * gi;
      const double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      p[i] = static_cast<T>(static_cast<double>(p[i]) - h.learning_rate * mhat / (std::sqrt(vhat) + h.eps));
    }
  }
}

/// Adam step over leaf tensors, reading their accumulated gradients.
template <typename T>
void adam_step(std::span<Tensor<T>> params, OptimizerState<T>& st) {
  std::vector<std::span<T>> ps;
  std::vector<std::span<const T>> gs;
  for (auto& p : params) {
    ps.push_back(p.data());
    gs.push_back(p.grad());
  }
  adam_step<T>(std::span<const std::span<T>>(ps), std::span<const std::span<const T>>(gs), st);
}

}  // namespace mriseq::ad
