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

// Independent reference implementations used by the test suites. They are
// written as plain nested loops and share no code with the library.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <random>
#include <span>
#include <vector>

#include <unistd.h>

namespace mriseq::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("mriseq_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::vector<double> random_vector(std::size_t n, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

struct DenseResult {
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

/// out[n,f,a,b,c] = bias[f] + sum_{ch,i,j,k} w[f,ch,i,j,k] * x[n,ch,a*s+i-p, b*s+j-p, c*s+k-p]
template <typename X, typename W>
DenseResult direct_conv3d(const X& x, const std::vector<std::size_t>& xs, const W& w,
                          const std::vector<std::size_t>& ws, const std::vector<double>& bias, std::size_t s,
                          std::size_t p) {
  const long N = xs[0], C = xs[1], D0 = xs[2], D1 = xs[3], D2 = xs[4];
  const long F = ws[0], K = ws[2];
  const long O0 = (D0 + 2 * (long)p - K) / (long)s + 1;
  const long O1 = (D1 + 2 * (long)p - K) / (long)s + 1;
  const long O2 = (D2 + 2 * (long)p - K) / (long)s + 1;
  DenseResult r;
  r.shape = {(std::size_t)N, (std::size_t)F, (std::size_t)O0, (std::size_t)O1, (std::size_t)O2};
  r.values.assign(N * F * O0 * O1 * O2, 0.0);
  for (long n = 0; n < N; ++n)
    for (long f = 0; f < F; ++f)
      for (long a = 0; a < O0; ++a)
        for (long b = 0; b < O1; ++b)
          for (long c = 0; c < O2; ++c) {
            double acc = bias.empty() ? 0.0 : bias[f];
            for (long ch = 0; ch < C; ++ch)
              for (long i = 0; i < K; ++i)
                for (long j = 0; j < K; ++j)
                  for (long k = 0; k < K; ++k) {
                    const long u = a * (long)s + i - (long)p, v = b * (long)s + j - (long)p,
                               q = c * (long)s + k - (long)p;
                    if (u < 0 || v < 0 || q < 0 || u >= D0 || v >= D1 || q >= D2) continue;
                    acc += (double)w[(((f * C + ch) * K + i) * K + j) * K + k] *
                           (double)x[(((n * C + ch) * D0 + u) * D1 + v) * D2 + q];
                  }
            r.values[(((n * F + f) * O0 + a) * O1 + b) * O2 + c] = acc;
          }
  return r;
}

}  // namespace mriseq::testing
