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

#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "mriseq/error.hpp"
#include "mriseq/labels.hpp"
#include "mriseq/volume.hpp"

namespace mriseq {

/// One labeled series. Acquisition metadata is carried for bookkeeping only;
/// nothing in the model or preprocessing path reads it.
struct SeriesRecord {
  std::string volume_path;
  std::string patient_id;
  std::string study_id;
  SeriesLabel label = SeriesLabel::T1wPre;
  std::string scanner_domain;
  std::optional<std::string> body_region;
  std::optional<double> b_value;
  std::optional<double> tr_ms;
  std::optional<double> te_ms;
  std::optional<double> flip_deg;

  friend bool operator==(const SeriesRecord&, const SeriesRecord&) = default;
};

struct DatasetManifest {
  std::vector<SeriesRecord> records;
  std::filesystem::path root_dir;

  /// Resolved location of a record's volume header.
  std::filesystem::path resolve(const SeriesRecord& r) const {
    std::filesystem::path p(r.volume_path);
    return p.is_absolute() ? p : root_dir / p;
  }

  /// Distinct patient ids in order of first appearance.
  std::vector<std::string> patients() const {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& r : records)
      if (seen.insert(r.patient_id).second) out.push_back(r.patient_id);
    return out;
  }
};

inline constexpr std::string_view kManifestHeader =
    "volume_path,patient_id,study_id,label,scanner_domain,body_region,b_value,tr_ms,te_ms,flip_deg";

namespace csv {

/// Splits one CSV line. Double-quoted fields may contain commas and "" escapes.
inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline std::string escape(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

/// Reads a whole CSV file as rows; the first row is the header.
inline std::vector<std::vector<std::string>> read_rows(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    rows.push_back(split_line(line));
  }
  return rows;
}

/// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace csv

namespace detail {

inline std::optional<double> parse_optional_double(const std::string& s, std::size_t row,
                                                   const char* column) {
  if (s.empty()) return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("manifest row " + std::to_string(row) + ": bad " + column + " value '" + s + "'");
  }
}

}  // namespace detail

/// Parses a manifest CSV. Rows keep file order. `check_paths` verifies every
/// volume header resolves under the manifest's directory.
inline DatasetManifest load_manifest(const std::filesystem::path& path, bool check_paths = true) {
  const auto rows = csv::read_rows(path);
  if (rows.empty()) throw DataError("manifest '" + path.string() + "' is empty");
  const auto& header = rows.front();
  std::vector<int> col(10, -1);
  const auto names = csv::split_line(std::string(kManifestHeader));
  for (std::size_t i = 0; i < header.size(); ++i)
    for (std::size_t k = 0; k < names.size(); ++k)
      if (header[i] == names[k]) col[k] = static_cast<int>(i);
  for (std::size_t k = 0; k < 5; ++k)
    if (col[k] < 0) throw DataError("manifest '" + path.string() + "' lacks column " + names[k]);

  DatasetManifest m;
  m.root_dir = path.parent_path();
  std::set<std::tuple<std::string, std::string, std::string>> keys;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    auto cell = [&](int k) -> std::string {
      const int c = col[static_cast<std::size_t>(k)];
      return (c >= 0 && static_cast<std::size_t>(c) < row.size()) ? row[static_cast<std::size_t>(c)] : "";
    };
    SeriesRecord rec;
    rec.volume_path = cell(0);
    rec.patient_id = cell(1);
    rec.study_id = cell(2);
    const auto label = parse_label(cell(3));
    if (!label)
      throw DataError("manifest row " + std::to_string(r) + ": unknown label '" + cell(3) + "'");
    rec.label = *label;
    rec.scanner_domain = cell(4);
    if (auto br = cell(5); !br.empty()) rec.body_region = br;
    rec.b_value = detail::parse_optional_double(cell(6), r, "b_value");
    rec.tr_ms = detail::parse_optional_double(cell(7), r, "tr_ms");
    rec.te_ms = detail::parse_optional_double(cell(8), r, "te_ms");
    rec.flip_deg = detail::parse_optional_double(cell(9), r, "flip_deg");
    if (rec.volume_path.empty() || rec.patient_id.empty())
      throw DataError("manifest row " + std::to_string(r) + ": volume_path and patient_id required");
    if (!keys.emplace(rec.patient_id, rec.study_id, rec.volume_path).second)
      throw DataError("manifest row " + std::to_string(r) + ": duplicate record '" +
                      rec.volume_path + "'");
    if (check_paths && !std::filesystem::exists(volume_header_path(m.resolve(rec))))
      throw DataError("manifest row " + std::to_string(r) + ": cannot resolve '" +
                      rec.volume_path + "'");
    m.records.push_back(std::move(rec));
  }
  if (m.records.empty()) throw DataError("manifest '" + path.string() + "' has no records");
  return m;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write '" + path.string() + "'");
  auto opt = [](const std::optional<double>& v) { return v ? csv::format_double(*v) : std::string(); };
  os << kManifestHeader << '\n';
  for (const auto& r : m.records) {
    os << csv::escape(r.volume_path) << ',' << csv::escape(r.patient_id) << ','
       << csv::escape(r.study_id) << ',' << label_name(r.label) << ','
       << csv::escape(r.scanner_domain) << ',' << csv::escape(r.body_region.value_or("")) << ','
       << opt(r.b_value) << ',' << opt(r.tr_ms) << ',' << opt(r.te_ms) << ',' << opt(r.flip_deg)
       << '\n';
  }
}

/// Concatenation of two manifests with paths made absolute, used to mix
/// scanner datasets.
inline DatasetManifest merge_manifests(const DatasetManifest& a, const DatasetManifest& b) {
  DatasetManifest out;
  out.root_dir = a.root_dir;
  std::set<std::tuple<std::string, std::string, std::string>> keys;
  for (const auto* m : {&a, &b}) {
    for (auto r : m->records) {
      r.volume_path = std::filesystem::absolute(m->resolve(r)).lexically_normal().string();
      if (!keys.emplace(r.patient_id, r.study_id, r.volume_path).second)
        throw DataError("duplicate record '" + r.volume_path + "' when merging manifests");
      out.records.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace mriseq
