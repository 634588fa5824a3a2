// ----------------------------------------------------------------------------
//  sllm-desk
//  Copyright (c) sllm-desk contributors 2026
//
//   Licensed under the Apache License, Version 2.0 (the "License");
//   you may not use this file except in compliance with the License.
//
//   You may obtain a copy of the License at
//
//                   http://www.apache.org/licenses/LICENSE-2.0
//
//   Unless required by applicable law or agreed to in writing, software
//   distributed under the License is distributed on an "AS IS" BASIS,
//   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
//   See the License for the specific language governing permissions and
//   limitations under the License.
//  ----------------------------------------------------------------------------

#pragma once

#include <boost/crc.hpp>

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sllm {

// Error categories map onto CLI exit codes: Usage -> 1, everything else -> 2.
enum class ErrorKind {
  Usage,
  InvalidArgument,
  Io,
  Format,
  Corruption,
  Capacity,
  State,
  NotFound,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline constexpr std::uint64_t KiB = 1024ULL;
inline constexpr std::uint64_t MiB = 1024ULL * KiB;
inline constexpr std::uint64_t GiB = 1024ULL * MiB;
inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

// Token counts derived from a duration ratio are floored after a tiny nudge so
// that 1.0 / 0.1 lands on 10 rather than 9.
inline constexpr double kFloorEpsilon = 1e-9;

inline std::uint64_t floor_ratio(double num, double den) {
  if (num <= 0.0) return 0;
  return static_cast<std::uint64_t>(std::floor(num / den + kFloorEpsilon));
}

// CRC-32C (Castagnoli), reflected, init/xorout 0xFFFFFFFF.
using Crc32c = boost::crc_optimal<32, 0x1EDC6F41, 0xFFFFFFFF, 0xFFFFFFFF, true, true>;

inline std::uint32_t crc32c(std::span<const std::byte> data) {
  Crc32c crc;
  crc.process_bytes(data.data(), data.size());
  return crc.checksum();
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r' || s[b] == '\n')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r' || s[e - 1] == '\n')) --e;
  return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split_ws(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.emplace_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

inline double parse_double(std::string_view s, std::string_view what) {
  std::string tmp(s);
  char* end = nullptr;
  double v = std::strtod(tmp.c_str(), &end);
  if (tmp.empty() || end != tmp.c_str() + tmp.size() || !std::isfinite(v)) {
    fail(ErrorKind::Format, "invalid number for " + std::string(what) + ": '" + tmp + "'");
  }
  return v;
}

inline std::uint64_t parse_u64(std::string_view s, std::string_view what) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    fail(ErrorKind::Format, "invalid integer for " + std::string(what) + ": '" + std::string(s) + "'");
  }
  return v;
}

// Accepts plain numbers ("4096", "50e9") and unit suffixes: B, KB/MB/GB/TB
// (powers of 1000) and KiB/MiB/GiB/TiB (powers of 1024). Case-insensitive.
inline double parse_quantity(std::string_view s, std::string_view what) {
  static const std::map<std::string, double> units = {
      {"", 1.0},          {"b", 1.0},          {"kb", 1e3},
      {"mb", 1e6},        {"gb", 1e9},         {"tb", 1e12},
      {"kib", 1024.0},    {"mib", 1048576.0},  {"gib", 1073741824.0},
      {"tib", 1099511627776.0}};
  std::size_t split_at = s.size();
  while (split_at > 0) {
    char c = s[split_at - 1];
    if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z')) {
      --split_at;
    } else {
      break;
    }
  }
  std::string unit;
  for (char c : s.substr(split_at)) unit.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  // "1e9" ends in a digit so the exponent marker never reaches the unit.
  auto it = units.find(unit);
  if (it == units.end()) {
    fail(ErrorKind::Format, "unknown unit '" + unit + "' for " + std::string(what));
  }
  double base = parse_double(s.substr(0, split_at), what);
  if (base < 0) fail(ErrorKind::Format, std::string(what) + " must be non-negative");
  return base * it->second;
}

inline std::uint64_t parse_bytes(std::string_view s, std::string_view what) {
  double v = parse_quantity(s, what);
  if (v > 1.8e19) fail(ErrorKind::Format, std::string(what) + " too large");
  return static_cast<std::uint64_t>(std::llround(v));
}

inline std::string format_seconds(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9f", v);
  return buf;
}

inline std::string format_double(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}

// key=value fields after a leading record tag, e.g. "tier kind=dram capacity_bytes=64GiB".
class Record {
 public:
  Record(std::string tag, std::map<std::string, std::string> fields, std::size_t line)
      : tag_(std::move(tag)), fields_(std::move(fields)), line_(line) {}

  static Record parse(std::string_view text, std::size_t line) {
    auto tokens = split_ws(text);
    if (tokens.empty()) fail(ErrorKind::Format, "line " + std::to_string(line) + ": empty record");
    std::map<std::string, std::string> fields;
    for (std::size_t i = 1; i < tokens.size(); ++i) {
      auto eq = tokens[i].find('=');
      if (eq == std::string::npos || eq == 0) {
        fail(ErrorKind::Format, "line " + std::to_string(line) + ": expected key=value, got '" + tokens[i] + "'");
      }
      auto key = tokens[i].substr(0, eq);
      if (fields.count(key)) {
        fail(ErrorKind::Format, "line " + std::to_string(line) + ": duplicate key '" + key + "'");
      }
      fields[key] = tokens[i].substr(eq + 1);
    }
    return Record(tokens[0], std::move(fields), line);
  }

  const std::string& tag() const { return tag_; }
  std::size_t line() const { return line_; }
  bool has(const std::string& key) const { return fields_.count(key) != 0; }

  const std::string& str(const std::string& key) const {
    auto it = fields_.find(key);
    if (it == fields_.end()) {
      fail(ErrorKind::Format, "line " + std::to_string(line_) + ": '" + tag_ + "' record missing '" + key + "'");
    }
    return it->second;
  }
  std::string str_or(const std::string& key, std::string fallback) const {
    return has(key) ? str(key) : std::move(fallback);
  }
  double number(const std::string& key) const { return parse_quantity(str(key), where(key)); }
  double number_or(const std::string& key, double fallback) const {
    return has(key) ? number(key) : fallback;
  }
  std::uint64_t bytes(const std::string& key) const { return parse_bytes(str(key), where(key)); }
  std::uint64_t integer(const std::string& key) const { return parse_u64(str(key), where(key)); }
  std::uint64_t integer_or(const std::string& key, std::uint64_t fallback) const {
    return has(key) ? integer(key) : fallback;
  }

  // Rejects keys outside `allowed` so typos do not silently fall back to defaults.
  void expect_keys(std::initializer_list<std::string_view> allowed) const {
    for (const auto& [k, v] : fields_) {
      bool ok = false;
      for (auto a : allowed) ok = ok || (k == a);
      if (!ok) fail(ErrorKind::Format, "line " + std::to_string(line_) + ": unknown key '" + k + "' in '" + tag_ + "' record");
    }
  }

 private:
  std::string where(const std::string& key) const {
    return "line " + std::to_string(line_) + " " + tag_ + "." + key;
  }

  std::string tag_;
  std::map<std::string, std::string> fields_;
  std::size_t line_;
};

}  // namespace sllm
