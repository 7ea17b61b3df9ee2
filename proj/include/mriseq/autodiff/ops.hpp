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

// Differentiable primitives over 5-D [N, C, X, Y, Z] activations (row-major,
// Z fastest) and 2-D [N, K] features.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "mriseq/autodiff/tensor.hpp"
#include "mriseq/seeding.hpp"

namespace mriseq::ad {

/// Records the discrete branch decisions (ReLU masks, max-pool argmax) taken
/// by ops on this thread while enabled. Finite-difference checks compare the
/// signature of the +h and -h evaluations to detect a crossed kink.
class KinkMonitor {
 public:
  static KinkMonitor& local() {
    thread_local KinkMonitor m;
    return m;
  }
  void start() {
    active_ = true;
    hash_ = 0xCBF29CE484222325ull;
  }
  std::uint64_t stop() {
    active_ = false;
    return hash_;
  }
  bool active() const { return active_; }
  void feed(std::uint64_t v) { hash_ = splitmix64(hash_ ^ v); }

 private:
  bool active_ = false;
  std::uint64_t hash_ = 0;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

inline std::size_t spatial(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

inline std::size_t out_extent(std::size_t n, std::size_t k, std::size_t stride, std::size_t pad) {
  const long long span = static_cast<long long>(n + 2 * pad) - static_cast<long long>(k);
  if (span < 0) return 0;
  return static_cast<std::size_t>(span) / stride + 1;
}

struct ConvGeom {
  std::size_t C, X, Y, Z;     // input
  std::size_t kx, ky, kz;     // kernel
  std::size_t ox, oy, oz;     // output
  std::size_t stride, pad;
  std::size_t K() const { return C * kx * ky * kz; }
  std::size_t P() const { return ox * oy * oz; }
  bool pointwise() const { return kx == 1 && ky == 1 && kz == 1 && stride == 1 && pad == 0; }
};

// cols[K, P]: row r = ((c*kx + i)*ky + j)*kz + l, column p = (a*oy + b)*oz + d.
template <typename T>
void im2col(const T* in, const ConvGeom& g, T* cols) {
  const std::size_t P = g.P();
  const auto pad = static_cast<long long>(g.pad);
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t i = 0; i < g.kx; ++i)
      for (std::size_t j = 0; j < g.ky; ++j)
        for (std::size_t l = 0; l < g.kz; ++l) {
          T* row = cols + (((c * g.kx + i) * g.ky + j) * g.kz + l) * P;
          for (std::size_t a = 0; a < g.ox; ++a) {
            const long long ix = static_cast<long long>(a * g.stride + i) - pad;
            T* dst_a = row + a * g.oy * g.oz;
            if (ix < 0 || ix >= static_cast<long long>(g.X)) {
              std::fill(dst_a, dst_a + g.oy * g.oz, T(0));
              continue;
            }
            for (std::size_t b = 0; b < g.oy; ++b) {
              const long long iy = static_cast<long long>(b * g.stride + j) - pad;
              T* dst = dst_a + b * g.oz;
              if (iy < 0 || iy >= static_cast<long long>(g.Y)) {
                std::fill(dst, dst + g.oz, T(0));
                continue;
              }
              const T* src = in + (c * g.X + static_cast<std::size_t>(ix)) * g.Y * g.Z +
                             static_cast<std::size_t>(iy) * g.Z;
              for (std::size_t d = 0; d < g.oz; ++d) {
                const long long iz = static_cast<long long>(d * g.stride + l) - pad;
                dst[d] = (iz < 0 || iz >= static_cast<long long>(g.Z)) ? T(0)
                                                                       : src[static_cast<std::size_t>(iz)];
              }
            }
          }
        }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* out) {
  const std::size_t P = g.P();
  const auto pad = static_cast<long long>(g.pad);
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t i = 0; i < g.kx; ++i)
      for (std::size_t j = 0; j < g.ky; ++j)
        for (std::size_t l = 0; l < g.kz; ++l) {
          const T* row = cols + (((c * g.kx + i) * g.ky + j) * g.kz + l) * P;
          for (std::size_t a = 0; a < g.ox; ++a) {
            const long long ix = static_cast<long long>(a * g.stride + i) - pad;
            if (ix < 0 || ix >= static_cast<long long>(g.X)) continue;
            for (std::size_t b = 0; b < g.oy; ++b) {
              const long long iy = static_cast<long long>(b * g.stride + j) - pad;
              if (iy < 0 || iy >= static_cast<long long>(g.Y)) continue;
              T* dst = out + (c * g.X + static_cast<std::size_t>(ix)) * g.Y * g.Z +
                       static_cast<std::size_t>(iy) * g.Z;
              const T* src = row + (a * g.oy + b) * g.oz;
              for (std::size_t d = 0; d < g.oz; ++d) {
                const long long iz = static_cast<long long>(d * g.stride + l) - pad;
                if (iz >= 0 && iz < static_cast<long long>(g.Z)) dst[static_cast<std::size_t>(iz)] += src[d];
              }
            }
          }
        }
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                              shape_str(b.shape()));
  std::vector<T> out(a.numel());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, "add", [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      T* g = p->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch");
  std::vector<T> out(a.numel());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, "mul", [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      T* g = pa.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      T* g = pb.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return make_result<T>(a.shape(), std::move(out), {&a}, "scale", [s](Node<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += s * self.grad[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return make_result<T>({1}, {acc}, {&a}, "sum", [](Node<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    const T up = self.grad[0];
    for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += up;
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  auto x = a.data();
  auto& mon = KinkMonitor::local();
  std::uint64_t mask_hash = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool on = x[i] > T(0);
    out[i] = (on || std::isnan(x[i])) ? x[i] : T(0);
    if (mon.active() && on) mask_hash = splitmix64(mask_hash ^ i);
  }
  if (mon.active()) mon.feed(mask_hash);
  return make_result<T>(a.shape(), std::move(out), {&a}, "relu", [](Node<T>& self) {
    auto& p = *self.parents[0];
    T* g = p.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (p.value[i] > T(0)) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------- convolution

namespace detail {

// Stride-1 convolution as a sum of kernel-offset GEMMs over a zero-padded
// copy of the batch laid out [C, N * Qp] (Qp = padded grid volume). For
// offset o with flat shift s_o, R[:, q] += W_o * Xp[:, q + s_o]; outputs are
// the entries of R at valid padded positions. No im2col buffer is built.
template <typename T>
struct ShiftGemmConv {
  using Mat = RowMat<T>;
  using Strided = Eigen::Map<const Mat, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
  using StridedMut = Eigen::Map<Mat, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
  using OuterStrided = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;
  using OuterStridedMut = Eigen::Map<Mat, 0, Eigen::OuterStride<>>;

  ConvGeom g;
  std::size_t N, F;
  std::size_t Xp, Yp, Zp, Qp, L, Qv;  // L = N*Qp, Qv = columns computed

  ShiftGemmConv(const ConvGeom& geom, std::size_t n, std::size_t f) : g(geom), N(n), F(f) {
    Xp = g.X + 2 * g.pad;
    Yp = g.Y + 2 * g.pad;
    Zp = g.Z + 2 * g.pad;
    Qp = Xp * Yp * Zp;
    L = N * Qp;
    Qv = L - max_shift();
  }
  std::size_t shift(std::size_t i, std::size_t j, std::size_t l) const { return (i * Yp + j) * Zp + l; }
  std::size_t max_shift() const { return shift(g.kx - 1, g.ky - 1, g.kz - 1); }
  std::size_t taps() const { return g.kx * g.ky * g.kz; }

  // [N,C,X,Y,Z] -> [C, N*Qp] zero padded
  std::vector<T> pad_input(const T* in) const {
    std::vector<T> xp(g.C * L, T(0));
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < g.C; ++c)
        for (std::size_t x = 0; x < g.X; ++x)
          for (std::size_t y = 0; y < g.Y; ++y) {
            const T* src = in + (((n * g.C + c) * g.X + x) * g.Y + y) * g.Z;
            T* dst = xp.data() + c * L + n * Qp + ((x + g.pad) * Yp + (y + g.pad)) * Zp + g.pad;
            std::copy_n(src, g.Z, dst);
          }
    return xp;
  }

  template <typename Fn>
  void for_valid(Fn&& fn) const {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t a = 0; a < g.ox; ++a)
        for (std::size_t b = 0; b < g.oy; ++b)
          fn(n, a, b, n * Qp + (a * Yp + b) * Zp, ((n * F) * g.ox + a) * g.oy * g.oz + b * g.oz);
  }

  const Strided weight_tap(const T* w, std::size_t o) const {
    const auto T3 = static_cast<Eigen::Index>(taps());
    return Strided(w + o, static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(g.C),
                   Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(static_cast<Eigen::Index>(g.C) * T3, T3));
  }
  StridedMut weight_tap_mut(T* w, std::size_t o) const {
    const auto T3 = static_cast<Eigen::Index>(taps());
    return StridedMut(w + o, static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(g.C),
                      Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(static_cast<Eigen::Index>(g.C) * T3, T3));
  }

  template <typename Fn>
  void for_taps(Fn&& fn) const {
    std::size_t o = 0;
    for (std::size_t i = 0; i < g.kx; ++i)
      for (std::size_t j = 0; j < g.ky; ++j)
        for (std::size_t l = 0; l < g.kz; ++l, ++o) fn(o, shift(i, j, l));
  }

  void forward(const T* xp, const T* w, T* out) const {
    Mat R = Mat::Zero(static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(Qv));
    for_taps([&](std::size_t o, std::size_t s) {
      R.noalias() += weight_tap(w, o) *
                     OuterStrided(xp + s, static_cast<Eigen::Index>(g.C), static_cast<Eigen::Index>(Qv),
                                  Eigen::OuterStride<>(static_cast<Eigen::Index>(L)));
    });
    const std::size_t P = g.P();
    for_valid([&](std::size_t, std::size_t, std::size_t, std::size_t q, std::size_t o0) {
      for (std::size_t f = 0; f < F; ++f) {
        const T* src = R.data() + f * Qv + q;
        std::copy_n(src, g.oz, out + o0 + f * P);
      }
    });
  }

  void backward(const T* xp, const T* w, const T* dout, T* dw, T* din) const {
    const std::size_t P = g.P();
    Mat dR = Mat::Zero(static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(Qv));
    for_valid([&](std::size_t, std::size_t, std::size_t, std::size_t q, std::size_t o0) {
      for (std::size_t f = 0; f < F; ++f) std::copy_n(dout + o0 + f * P, g.oz, dR.data() + f * Qv + q);
    });
    std::vector<T> dxp(din ? g.C * L : 0, T(0));
    for_taps([&](std::size_t o, std::size_t s) {
      OuterStrided Xs(xp + s, static_cast<Eigen::Index>(g.C), static_cast<Eigen::Index>(Qv),
                      Eigen::OuterStride<>(static_cast<Eigen::Index>(L)));
      if (dw) weight_tap_mut(dw, o).noalias() += dR * Xs.transpose();
      if (din) {
        OuterStridedMut dXs(dxp.data() + s, static_cast<Eigen::Index>(g.C), static_cast<Eigen::Index>(Qv),
                            Eigen::OuterStride<>(static_cast<Eigen::Index>(L)));
        dXs.noalias() += weight_tap(w, o).transpose() * dR;
      }
    });
    if (!din) return;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < g.C; ++c)
        for (std::size_t x = 0; x < g.X; ++x)
          for (std::size_t y = 0; y < g.Y; ++y) {
            const T* src = dxp.data() + c * L + n * Qp + ((x + g.pad) * Yp + (y + g.pad)) * Zp + g.pad;
            T* dst = din + (((n * g.C + c) * g.X + x) * g.Y + y) * g.Z;
            for (std::size_t z = 0; z < g.Z; ++z) dst[z] += src[z];
          }
  }
};

}  // namespace detail

/// Cross-correlation of input [N,C,X,Y,Z] with weight [F,C,kx,ky,kz], uniform
/// stride and zero padding; `bias` [F] may be undefined.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t pad = 0);

namespace detail {

template <typename T>
Tensor<T> conv3d_shift(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, const ConvGeom& g) {
  const std::size_t N = input.dim(0);
  const std::size_t F = weight.dim(0);
  auto plan = std::make_shared<ShiftGemmConv<T>>(g, N, F);
  auto xp = std::make_shared<std::vector<T>>(plan->pad_input(input.data().data()));
  std::vector<T> out(N * F * g.P());
  plan->forward(xp->data(), weight.data().data(), out.data());
  if (bias.defined()) {
    auto b = bias.data();
    const std::size_t P = g.P();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t p = 0; p < P; ++p) out[(n * F + f) * P + p] += b[f];
  }
  return make_result<T>({N, F, g.ox, g.oy, g.oz}, std::move(out), {&input, &weight, &bias}, "conv3d",
                        [plan, xp, has_bias = bias.defined()](Node<T>& self) {
                          auto& in = *self.parents[0];
                          auto& w = *self.parents[1];
                          plan->backward(xp->data(), w.value.data(), self.grad.data(),
                                         w.requires_grad ? w.grad_buffer() : nullptr,
                                         in.requires_grad ? in.grad_buffer() : nullptr);
                          if (has_bias && self.parents[2]->requires_grad) {
                            T* db = self.parents[2]->grad_buffer();
                            const std::size_t P = plan->g.P();
                            for (std::size_t n = 0; n < plan->N; ++n)
                              for (std::size_t f = 0; f < plan->F; ++f)
                                for (std::size_t p = 0; p < P; ++p) db[f] += self.grad[(n * plan->F + f) * P + p];
                          }
                        });
}

}  // namespace detail

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
  detail::require(input.rank() == 5, "conv3d: input must be [N,C,X,Y,Z], got " + shape_str(input.shape()));
  detail::require(weight.rank() == 5, "conv3d: weight must be [F,C,kx,ky,kz]");
  detail::require(stride >= 1, "conv3d: stride must be >= 1");
  const std::size_t N = input.dim(0);
  const std::size_t F = weight.dim(0);
  detail::ConvGeom g{input.dim(1), input.dim(2), input.dim(3), input.dim(4),
                     weight.dim(2), weight.dim(3), weight.dim(4), 0, 0, 0, stride, pad};
  detail::require(weight.dim(1) == g.C, "conv3d: channel mismatch, input has " + std::to_string(g.C) +
                                            " channels but weight expects " + std::to_string(weight.dim(1)));
  if (bias.defined()) detail::require(bias.numel() == F, "conv3d: bias length must equal filters");
  g.ox = detail::out_extent(g.X, g.kx, stride, pad);
  g.oy = detail::out_extent(g.Y, g.ky, stride, pad);
  g.oz = detail::out_extent(g.Z, g.kz, stride, pad);
  detail::require(g.ox >= 1 && g.oy >= 1 && g.oz >= 1,
                  "conv3d: kernel larger than padded input " + shape_str(input.shape()));
  const std::size_t K = g.K();
  const std::size_t P = g.P();
  const std::size_t in_per = g.C * g.X * g.Y * g.Z;
  if (stride == 1 && !g.pointwise()) return detail::conv3d_shift(input, weight, bias, g);

  using Mat = detail::RowMat<T>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;

  const bool pointwise = g.pointwise();
  auto cols = std::make_shared<std::vector<T>>(pointwise ? 0 : N * K * P);
  std::vector<T> out(N * F * P);
  CMap W(weight.data().data(), static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(K));
  for (std::size_t n = 0; n < N; ++n) {
    const T* colp = input.data().data() + n * in_per;
    if (!pointwise) {
      detail::im2col(colp, g, cols->data() + n * K * P);
      colp = cols->data() + n * K * P;
    }
    MMap Y(out.data() + n * F * P, static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(P));
    Y.noalias() = W * CMap(colp, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
    if (bias.defined()) {
      auto b = bias.data();
      for (std::size_t f = 0; f < F; ++f) Y.row(static_cast<Eigen::Index>(f)).array() += b[f];
    }
  }
  return make_result<T>(
      {N, F, g.ox, g.oy, g.oz}, std::move(out), {&input, &weight, &bias}, "conv3d",
      [g, N, F, K, P, in_per, pointwise, cols, has_bias = bias.defined()](Node<T>& self) {
        auto& in = *self.parents[0];
        auto& w = *self.parents[1];
        const auto Ki = static_cast<Eigen::Index>(K);
        const auto Pi = static_cast<Eigen::Index>(P);
        const auto Fi = static_cast<Eigen::Index>(F);
        CMap Wm(w.value.data(), Fi, Ki);
        std::vector<T> dcols(in.requires_grad && !pointwise ? K * P : 0);
        for (std::size_t n = 0; n < N; ++n) {
          CMap dY(self.grad.data() + n * F * P, Fi, Pi);
          const T* colp = pointwise ? in.value.data() + n * in_per : cols->data() + n * K * P;
          if (w.requires_grad) {
            MMap dW(w.grad_buffer(), Fi, Ki);
            dW.noalias() += dY * CMap(colp, Ki, Pi).transpose();
          }
          if (in.requires_grad) {
            if (pointwise) {
              MMap dX(in.grad_buffer() + n * in_per, Ki, Pi);
              dX.noalias() += Wm.transpose() * dY;
            } else {
              MMap dC(dcols.data(), Ki, Pi);
              dC.noalias() = Wm.transpose() * dY;
              detail::col2im_add(dcols.data(), g, in.grad_buffer() + n * in_per);
            }
          }
          if (has_bias && self.parents[2]->requires_grad) {
            T* db = self.parents[2]->grad_buffer();
            for (std::size_t f = 0; f < F; ++f) db[f] += dY.row(static_cast<Eigen::Index>(f)).sum();
          }
        }
      });
}

// ---------------------------------------------------------------- batch norm

template <typename T>
struct BatchNormStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

/// Per-channel normalisation over batch and spatial axes. Training mode uses
/// batch statistics (biased variance) and folds them into `stats` with
/// `momentum` (unbiased variance); eval mode uses the running estimates.
template <typename T>
Tensor<T> batchnorm3d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormStats<T>& stats, bool training, double momentum = 0.1, double eps = 1e-5) {
  detail::require(input.rank() >= 2, "batchnorm3d: input needs a channel axis");
  const std::size_t N = input.dim(0);
  const std::size_t C = input.dim(1);
  const std::size_t S = detail::spatial(input.shape());
  detail::require(gamma.numel() == C && beta.numel() == C,
                  "batchnorm3d: gamma/beta length " + std::to_string(gamma.numel()) +
                      " does not match channels " + std::to_string(C));
  detail::require(stats.running_mean.size() == C && stats.running_var.size() == C,
                  "batchnorm3d: running stats channel mismatch");
  const std::size_t M = N * S;
  auto x = input.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  std::vector<T> xhat(input.numel());
  std::vector<T> invstd(C);
  std::vector<T> out(input.numel());
  for (std::size_t c = 0; c < C; ++c) {
    double mean, var;
    if (training) {
      double s = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < S; ++i) s += static_cast<double>(x[(n * C + c) * S + i]);
      mean = s / static_cast<double>(M);
      double ss = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < S; ++i) {
          const double d = static_cast<double>(x[(n * C + c) * S + i]) - mean;
          ss += d * d;
        }
      var = ss / static_cast<double>(M);
      const double unbiased = M > 1 ? ss / static_cast<double>(M - 1) : var;
      stats.running_mean[c] =
          static_cast<T>((1.0 - momentum) * static_cast<double>(stats.running_mean[c]) + momentum * mean);
      stats.running_var[c] =
          static_cast<T>((1.0 - momentum) * static_cast<double>(stats.running_var[c]) + momentum * unbiased);
    } else {
      mean = static_cast<double>(stats.running_mean[c]);
      var = static_cast<double>(stats.running_var[c]);
    }
    const double is = 1.0 / std::sqrt(var + eps);
    invstd[c] = static_cast<T>(is);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < S; ++i) {
        const std::size_t k = (n * C + c) * S + i;
        const double xh = (static_cast<double>(x[k]) - mean) * is;
        xhat[k] = static_cast<T>(xh);
        out[k] = static_cast<T>(static_cast<double>(gm[c]) * xh + static_cast<double>(bt[c]));
      }
  }
  return make_result<T>(
      input.shape(), std::move(out), {&input, &gamma, &beta}, "batchnorm3d",
      [N, C, S, M, training, xhat = std::move(xhat), invstd = std::move(invstd)](Node<T>& self) {
        auto& in = *self.parents[0];
        auto& ga = *self.parents[1];
        auto& be = *self.parents[2];
        const auto& dy = self.grad;
        for (std::size_t c = 0; c < C; ++c) {
          double sdy = 0, sdyx = 0;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < S; ++i) {
              const std::size_t k = (n * C + c) * S + i;
              sdy += static_cast<double>(dy[k]);
              sdyx += static_cast<double>(dy[k]) * static_cast<double>(xhat[k]);
            }
          if (ga.requires_grad) ga.grad_buffer()[c] += static_cast<T>(sdyx);
          if (be.requires_grad) be.grad_buffer()[c] += static_cast<T>(sdy);
          if (!in.requires_grad) continue;
          T* dx = in.grad_buffer();
          const double g = static_cast<double>(ga.value[c]) * static_cast<double>(invstd[c]);
          const double inv_m = 1.0 / static_cast<double>(M);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < S; ++i) {
              const std::size_t k = (n * C + c) * S + i;
              if (training) {
                dx[k] += static_cast<T>(g * (static_cast<double>(dy[k]) - inv_m * sdy -
                                             static_cast<double>(xhat[k]) * inv_m * sdyx));
              } else {
                dx[k] += static_cast<T>(g * static_cast<double>(dy[k]));
              }
            }
        }
      });
}

// ---------------------------------------------------------------- pooling

/// Max pooling with cubic window; padded positions never win.
template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& input, std::size_t k, std::size_t stride, std::size_t pad = 0) {
  detail::require(input.rank() == 5, "maxpool3d: input must be 5-D");
  detail::require(pad < k, "maxpool3d: padding must be smaller than the window");
  const std::size_t N = input.dim(0), C = input.dim(1), X = input.dim(2), Y = input.dim(3), Z = input.dim(4);
  const std::size_t ox = detail::out_extent(X, k, stride, pad);
  const std::size_t oy = detail::out_extent(Y, k, stride, pad);
  const std::size_t oz = detail::out_extent(Z, k, stride, pad);
  detail::require(ox >= 1 && oy >= 1 && oz >= 1,
                  "maxpool3d: window larger than input " + shape_str(input.shape()));
  const std::size_t S = X * Y * Z;
  const std::size_t OS = ox * oy * oz;
  std::vector<T> out(N * C * OS);
  std::vector<std::size_t> arg(out.size());
  auto x = input.data();
  const auto p = static_cast<long long>(pad);
  auto& mon = KinkMonitor::local();
  std::uint64_t h = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* src = x.data() + nc * S;
    for (std::size_t a = 0; a < ox; ++a)
      for (std::size_t b = 0; b < oy; ++b)
        for (std::size_t d = 0; d < oz; ++d) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t besti = 0;
          for (std::size_t i = 0; i < k; ++i) {
            const long long ix = static_cast<long long>(a * stride + i) - p;
            if (ix < 0 || ix >= static_cast<long long>(X)) continue;
            for (std::size_t j = 0; j < k; ++j) {
              const long long iy = static_cast<long long>(b * stride + j) - p;
              if (iy < 0 || iy >= static_cast<long long>(Y)) continue;
              for (std::size_t l = 0; l < k; ++l) {
                const long long iz = static_cast<long long>(d * stride + l) - p;
                if (iz < 0 || iz >= static_cast<long long>(Z)) continue;
                const std::size_t idx = (static_cast<std::size_t>(ix) * Y + static_cast<std::size_t>(iy)) * Z +
                                        static_cast<std::size_t>(iz);
                if (src[idx] > best || (std::isnan(src[idx]) && !std::isnan(best))) {
                  best = src[idx];
                  besti = idx;
                }
              }
            }
          }
          const std::size_t o = nc * OS + (a * oy + b) * oz + d;
          out[o] = best;
          arg[o] = nc * S + besti;
          if (mon.active()) h = splitmix64(h ^ arg[o]);
        }
  }
  if (mon.active()) mon.feed(h);
  return make_result<T>({N, C, ox, oy, oz}, std::move(out), {&input}, "maxpool3d",
                        [arg = std::move(arg)](Node<T>& self) {
                          T* g = self.parents[0]->grad_buffer();
                          for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
                        });
}

/// Average pooling, no padding.
template <typename T>
Tensor<T> avgpool3d(const Tensor<T>& input, std::size_t k, std::size_t stride) {
  detail::require(input.rank() == 5, "avgpool3d: input must be 5-D");
  const std::size_t N = input.dim(0), C = input.dim(1), X = input.dim(2), Y = input.dim(3), Z = input.dim(4);
  const std::size_t ox = detail::out_extent(X, k, stride, 0);
  const std::size_t oy = detail::out_extent(Y, k, stride, 0);
  const std::size_t oz = detail::out_extent(Z, k, stride, 0);
  detail::require(ox >= 1 && oy >= 1 && oz >= 1,
                  "avgpool3d: window larger than input " + shape_str(input.shape()));
  const std::size_t S = X * Y * Z;
  const std::size_t OS = ox * oy * oz;
  const T inv = T(1) / static_cast<T>(k * k * k);
  std::vector<T> out(N * C * OS, T(0));
  auto x = input.data();
  auto for_window = [=](std::size_t a, std::size_t b, std::size_t d, auto&& fn) {
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t l = 0; l < k; ++l)
          fn(((a * stride + i) * Y + (b * stride + j)) * Z + (d * stride + l));
  };
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t a = 0; a < ox; ++a)
      for (std::size_t b = 0; b < oy; ++b)
        for (std::size_t d = 0; d < oz; ++d) {
          T acc = 0;
          for_window(a, b, d, [&](std::size_t idx) { acc += x[nc * S + idx]; });
          out[nc * OS + (a * oy + b) * oz + d] = acc * inv;
        }
  return make_result<T>({N, C, ox, oy, oz}, std::move(out), {&input}, "avgpool3d",
                        [=](Node<T>& self) {
                          T* g = self.parents[0]->grad_buffer();
                          for (std::size_t nc = 0; nc < N * C; ++nc)
                            for (std::size_t a = 0; a < ox; ++a)
                              for (std::size_t b = 0; b < oy; ++b)
                                for (std::size_t d = 0; d < oz; ++d) {
                                  const T up = self.grad[nc * OS + (a * oy + b) * oz + d] * inv;
                                  for_window(a, b, d, [&](std::size_t idx) { g[nc * S + idx] += up; });
                                }
                        });
}

/// [N, C, ...] -> [N, C] mean over all spatial positions.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  detail::require(input.rank() >= 3, "global_avg_pool: input needs spatial axes");
  const std::size_t N = input.dim(0), C = input.dim(1), S = detail::spatial(input.shape());
  std::vector<T> out(N * C);
  auto x = input.data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    T acc = 0;
    for (std::size_t i = 0; i < S; ++i) acc += x[nc * S + i];
    out[nc] = acc / static_cast<T>(S);
  }
  return make_result<T>({N, C}, std::move(out), {&input}, "global_avg_pool", [S](Node<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    const T inv = T(1) / static_cast<T>(S);
    for (std::size_t nc = 0; nc < self.grad.size(); ++nc)
      for (std::size_t i = 0; i < S; ++i) g[nc * S + i] += self.grad[nc] * inv;
  });
}

/// Channel-axis concatenation of tensors that agree on every other axis.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_channels: nothing to concatenate");
  Shape shape = parts.front().shape();
  const std::size_t N = shape[0];
  const std::size_t S = detail::spatial(shape);
  std::size_t C = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = shape;
    detail::require(a.size() == b.size(), "concat_channels: rank mismatch");
    a[1] = b[1] = 0;
    detail::require(a == b, "concat_channels: non-channel axes differ");
    C += p.dim(1);
  }
  shape[1] = C;
  std::vector<T> out(N * C * S);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t pc = p.dim(1);
    auto src = p.data();
    for (std::size_t n = 0; n < N; ++n)
      std::copy_n(src.data() + n * pc * S, pc * S, out.data() + (n * C + off) * S);
    off += pc;
  }
  return make_result<T>(shape, std::move(out), parts, "concat_channels",
                        [N, C, S, offsets = std::move(offsets)](Node<T>& self) {
                          for (std::size_t k = 0; k < self.parents.size(); ++k) {
                            auto& p = *self.parents[k];
                            if (!p.requires_grad) continue;
                            const std::size_t pc = p.shape[1];
                            T* g = p.grad_buffer();
                            for (std::size_t n = 0; n < N; ++n) {
                              const T* src = self.grad.data() + (n * C + offsets[k]) * S;
                              T* dst = g + n * pc * S;
                              for (std::size_t i = 0; i < pc * S; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

// ---------------------------------------------------------------- dense head

/// x [N, I] times weight [O, I] transposed, plus bias [O].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require(x.rank() == 2 && weight.rank() == 2 && weight.dim(1) == x.dim(1),
                  "linear: shape mismatch " + shape_str(x.shape()) + " x " + shape_str(weight.shape()));
  const std::size_t N = x.dim(0), I = x.dim(1), O = weight.dim(0);
  if (bias.defined()) detail::require(bias.numel() == O, "linear: bias length mismatch");
  using Mat = detail::RowMat<T>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;
  const auto Ni = static_cast<Eigen::Index>(N), Ii = static_cast<Eigen::Index>(I),
             Oi = static_cast<Eigen::Index>(O);
  std::vector<T> out(N * O);
  MMap Y(out.data(), Ni, Oi);
  Y.noalias() = CMap(x.data().data(), Ni, Ii) * CMap(weight.data().data(), Oi, Ii).transpose();
  if (bias.defined()) {
    auto b = bias.data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o) out[n * O + o] += b[o];
  }
  return make_result<T>({N, O}, std::move(out), {&x, &weight, &bias}, "linear",
                        [Ni, Ii, Oi, has_bias = bias.defined()](Node<T>& self) {
                          auto& px = *self.parents[0];
                          auto& pw = *self.parents[1];
                          CMap dY(self.grad.data(), Ni, Oi);
                          if (px.requires_grad)
                            MMap(px.grad_buffer(), Ni, Ii).noalias() += dY * CMap(pw.value.data(), Oi, Ii);
                          if (pw.requires_grad)
                            MMap(pw.grad_buffer(), Oi, Ii).noalias() +=
                                dY.transpose() * CMap(px.value.data(), Ni, Ii);
                          if (has_bias && self.parents[2]->requires_grad) {
                            T* db = self.parents[2]->grad_buffer();
                            for (Eigen::Index o = 0; o < Oi; ++o) db[o] += dY.col(o).sum();
                          }
                        });
}

namespace detail {
template <typename T>
void log_softmax_rows(const T* x, std::size_t N, std::size_t K, T* out) {
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = x + n * K;
    const T mx = *std::max_element(row, row + K);
    double s = 0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(static_cast<double>(row[k] - mx));
    const T lse = mx + static_cast<T>(std::log(s));
    for (std::size_t k = 0; k < K; ++k) out[n * K + k] = row[k] - lse;
  }
}
}  // namespace detail

/// Row-wise softmax of [N, K].
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  detail::require(x.rank() == 2, "softmax: expects [N, K]");
  const std::size_t N = x.dim(0), K = x.dim(1);
  std::vector<T> out(N * K);
  detail::log_softmax_rows(x.data().data(), N, K, out.data());
  for (auto& v : out) v = std::exp(v);
  return make_result<T>(x.shape(), std::move(out), {&x}, "softmax", [N, K](Node<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t n = 0; n < N; ++n) {
      double dot = 0;
      for (std::size_t k = 0; k < K; ++k) dot += static_cast<double>(self.grad[n * K + k] * self.value[n * K + k]);
      for (std::size_t k = 0; k < K; ++k)
        g[n * K + k] += self.value[n * K + k] * (self.grad[n * K + k] - static_cast<T>(dot));
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  detail::require(x.rank() == 2, "log_softmax: expects [N, K]");
  const std::size_t N = x.dim(0), K = x.dim(1);
  std::vector<T> out(N * K);
  detail::log_softmax_rows(x.data().data(), N, K, out.data());
  return make_result<T>(x.shape(), std::move(out), {&x}, "log_softmax", [N, K](Node<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t n = 0; n < N; ++n) {
      double s = 0;
      for (std::size_t k = 0; k < K; ++k) s += static_cast<double>(self.grad[n * K + k]);
      for (std::size_t k = 0; k < K; ++k)
        g[n * K + k] += self.grad[n * K + k] - std::exp(self.value[n * K + k]) * static_cast<T>(s);
    }
  });
}

/// Mean over the batch of -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  detail::require(logits.rank() == 2, "cross_entropy: logits must be [N, K]");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  detail::require(targets.size() == N, "cross_entropy: one target per row required");
  for (int t : targets)
    if (t < 0 || static_cast<std::size_t>(t) >= K)
      throw ShapeError("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(K) + ")");
  std::vector<T> logp(N * K);
  detail::log_softmax_rows(logits.data().data(), N, K, logp.data());
  double loss = 0;
  for (std::size_t n = 0; n < N; ++n) loss -= static_cast<double>(logp[n * K + static_cast<std::size_t>(targets[n])]);
  loss /= static_cast<double>(N);
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_result<T>({1}, {static_cast<T>(loss)}, {&logits}, "cross_entropy",
                        [N, K, logp = std::move(logp), tgt = std::move(tgt)](Node<T>& self) {
                          T* g = self.parents[0]->grad_buffer();
                          const T up = self.grad[0] / static_cast<T>(N);
                          for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t k = 0; k < K; ++k) {
                              const T onehot = static_cast<std::size_t>(tgt[n]) == k ? T(1) : T(0);
                              g[n * K + k] += up * (std::exp(logp[n * K + k]) - onehot);
                            }
                        });
}

/// Scalar view of one element, e.g. a single class logit.
template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::size_t flat_index) {
  detail::require(flat_index < x.numel(), "pick: index out of range");
  return make_result<T>({1}, {x.data()[flat_index]}, {&x}, "pick", [flat_index](Node<T>& self) {
    self.parents[0]->grad_buffer()[flat_index] += self.grad[0];
  });
}

}  // namespace mriseq::ad
