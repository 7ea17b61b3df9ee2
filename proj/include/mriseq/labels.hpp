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

#include <algorithm>
#include <array>
#include <cctype>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mriseq {

/// The eight body-MRI series types. The enumerator value is the canonical
/// class index used on every confusion-matrix and probability axis.
enum class SeriesLabel : int {
  T1wPre = 0,
  T1wArt = 1,
  T1wVen = 2,
  T1wDel = 3,
  T2w = 4,
  T2fs = 5,
  DWI = 6,
  ADC = 7,
};

inline constexpr int kNumClasses = 8;

inline constexpr std::array<std::string_view, kNumClasses> kLabelNames{
    "T1w-pre", "T1w-art", "T1w-ven", "T1w-del", "T2w", "T2fs", "DWI", "ADC"};

constexpr int label_index(SeriesLabel l) { return static_cast<int>(l); }

inline SeriesLabel label_from_index(int i) {
  if (i < 0 || i >= kNumClasses)
    throw std::out_of_range("series label index out of range: " + std::to_string(i));
  return static_cast<SeriesLabel>(i);
}

constexpr std::string_view label_name(SeriesLabel l) {
  return kLabelNames[static_cast<std::size_t>(l)];
}

/// Case-insensitive parse; returns nullopt for unknown strings.
inline std::optional<SeriesLabel> parse_label(std::string_view s) {
  auto lower = [](std::string_view v) {
    std::string out(v);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
  };
  const std::string key = lower(s);
  for (int i = 0; i < kNumClasses; ++i)
    if (lower(kLabelNames[static_cast<std::size_t>(i)]) == key) return static_cast<SeriesLabel>(i);
  return std::nullopt;
}

inline constexpr std::array<SeriesLabel, kNumClasses> kAllLabels{
    SeriesLabel::T1wPre, SeriesLabel::T1wArt, SeriesLabel::T1wVen, SeriesLabel::T1wDel,
    SeriesLabel::T2w,    SeriesLabel::T2fs,   SeriesLabel::DWI,    SeriesLabel::ADC};

}  // namespace mriseq
