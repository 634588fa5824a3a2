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

// Simulator inputs: cluster config, request traces (parsed or generated) and
// failure plans. All formats are line-oriented UTF-8 text; '#' starts a comment.

#include "sllm/cluster_model.hpp"
#include "sllm/common.hpp"
#include "sllm/inference_engine.hpp"
#include "sllm/migration.hpp"
#include "sllm/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace sllm::sim {

using cluster::TierKind;
using cluster::TierSpec;

namespace detail {

// Non-empty, comment-stripped lines with their 1-based line numbers.
inline std::vector<std::pair<std::size_t, std::string>> content_lines(std::istream& in) {
  std::vector<std::pair<std::size_t, std::string>> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    auto t = trim(line);
    if (!t.empty()) out.emplace_back(n, std::move(t));
  }
  return out;
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::NotFound, "cannot open " + path.string());
  return in;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Cluster config
//
//   engine per_token_time=0.1 recompute_rate=1000 kv_bytes_per_token=1MiB
//   migration gap_threshold=10 max_rounds=16 link_latency=0
//   link src=0 dst=1 latency=0.002
//   model id=opt-6.7b size_bytes=13GB a=0.0005 b_intercept=0.05 seed=1
//   server id=0 gpus=4
//   tier kind=dram capacity_bytes=512GB bandwidth_Bps=50e9    (applies to last server)
//   resident model=opt-6.7b tier=ssd                           (applies to last server)
//   warm model=opt-6.7b                                        (idle GPU instance)

struct ServerSpec {
  int id = 0;
  std::size_t gpus = 1;
  std::vector<TierSpec> tiers;  // empty: default_tiers(gpus)
  std::vector<std::pair<std::string, TierKind>> residents;
  std::vector<std::string> warm;
};

struct ClusterConfig {
  engine::EngineParams engine;
  migration::MigrationConfig migration;
  double link_latency = 0.0;
  std::map<std::pair<int, int>, double> links;
  sched::ModelCatalog models;
  std::vector<ServerSpec> servers;

  double latency(int a, int b) const {
    if (auto it = links.find({std::min(a, b), std::max(a, b)}); it != links.end()) return it->second;
    return link_latency;
  }
};

inline ClusterConfig parse_cluster_config(std::istream& in, const std::string& origin = "config") {
  ClusterConfig cfg;
  auto where = [&](std::size_t line) { return origin + ":" + std::to_string(line) + ": "; };
  for (auto& [lineno, text] : detail::content_lines(in)) {
    Record r = Record::parse(text, lineno);
    try {
      const auto& tag = r.tag();
      if (tag == "engine") {
        r.expect_keys({"per_token_time", "recompute_rate", "kv_bytes_per_token"});
        cfg.engine.per_token_time = r.number_or("per_token_time", cfg.engine.per_token_time);
        cfg.engine.recompute_rate = r.number_or("recompute_rate", cfg.engine.recompute_rate);
        if (r.has("kv_bytes_per_token")) cfg.engine.kv_bytes_per_token = r.bytes("kv_bytes_per_token");
      } else if (tag == "migration") {
        r.expect_keys({"gap_threshold", "max_rounds", "link_latency"});
        cfg.migration.gap_threshold = r.integer_or("gap_threshold", cfg.migration.gap_threshold);
        cfg.migration.max_rounds = r.integer_or("max_rounds", cfg.migration.max_rounds);
        cfg.link_latency = r.number_or("link_latency", cfg.link_latency);
      } else if (tag == "link") {
        r.expect_keys({"src", "dst", "latency"});
        int a = static_cast<int>(r.integer("src")), b = static_cast<int>(r.integer("dst"));
        cfg.links[{std::min(a, b), std::max(a, b)}] = r.number("latency");
      } else if (tag == "model") {
        r.expect_keys({"id", "size_bytes", "a", "b_intercept", "seed"});
        sched::ModelInfo m;
        m.id = r.str("id");
        m.size_bytes = r.bytes("size_bytes");
        m.a = r.number_or("a", 0.0);
        m.b_intercept = r.number_or("b_intercept", 0.0);
        m.seed = r.integer_or("seed", 0);
        if (cfg.models.count(m.id)) fail(ErrorKind::Format, "duplicate model '" + m.id + "'");
        cfg.models[m.id] = m;
      } else if (tag == "server") {
        r.expect_keys({"id", "gpus"});
        ServerSpec s;
        s.id = static_cast<int>(r.integer("id"));
        s.gpus = r.integer_or("gpus", 1);
        if (s.gpus == 0) fail(ErrorKind::Format, "server needs at least one GPU");
        if (s.id != static_cast<int>(cfg.servers.size())) {
          fail(ErrorKind::Format, "server ids must be 0, 1, 2, ... in order; got " + std::to_string(s.id));
        }
        cfg.servers.push_back(std::move(s));
      } else if (tag == "tier" || tag == "resident" || tag == "warm") {
        if (cfg.servers.empty()) fail(ErrorKind::Format, "'" + tag + "' record before any 'server' record");
        auto& s = cfg.servers.back();
        if (tag == "tier") {
          r.expect_keys({"kind", "capacity_bytes", "bandwidth_Bps"});
          TierSpec t;
          t.kind = cluster::parse_tier(r.str("kind"));
          t.capacity_bytes = t.kind == TierKind::Remote ? 0 : r.bytes("capacity_bytes");
          t.read_bandwidth = r.number("bandwidth_Bps");
          s.tiers.push_back(t);
        } else if (tag == "resident") {
          r.expect_keys({"model", "tier"});
          auto k = cluster::parse_tier(r.str("tier"));
          if (k != TierKind::Dram && k != TierKind::Ssd) fail(ErrorKind::Format, "resident tier must be dram or ssd (use 'warm' for GPUs)");
          s.residents.emplace_back(r.str("model"), k);
        } else {
          r.expect_keys({"model"});
          s.warm.push_back(r.str("model"));
        }
      } else {
        fail(ErrorKind::Format, "unknown record '" + tag + "'");
      }
    } catch (const Error& e) {
      fail(e.kind(), where(lineno) + e.what());
    }
  }
  cfg.engine.validate();
  for (const auto& s : cfg.servers) {
    for (const auto& [m, k] : s.residents) {
      if (!cfg.models.count(m)) fail(ErrorKind::Format, origin + ": server " + std::to_string(s.id) + " references unknown model '" + m + "'");
    }
    for (const auto& m : s.warm) {
      if (!cfg.models.count(m)) fail(ErrorKind::Format, origin + ": server " + std::to_string(s.id) + " references unknown model '" + m + "'");
    }
  }
  return cfg;
}

inline ClusterConfig parse_cluster_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_cluster_config(in);
}

inline ClusterConfig load_cluster_config(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  return parse_cluster_config(in, path.string());
}

// Builds initial server state; residency changes are recorded in `log`.
inline std::vector<cluster::ServerState> build_servers(const ClusterConfig& cfg, cluster::StatusStore* log = nullptr) {
  std::vector<cluster::ServerState> out;
  for (const auto& spec : cfg.servers) {
    auto tiers = spec.tiers.empty() ? cluster::default_tiers(spec.gpus) : spec.tiers;
    auto s = cluster::make_server(spec.id, spec.gpus, tiers);
    if (!s.has_tier(TierKind::Device)) fail(ErrorKind::Format, "server " + std::to_string(spec.id) + " has no device tier");
    for (const auto& [m, k] : spec.residents) cluster::admit_model(s, m, cfg.models.at(m).size_bytes, k, 0.0, log);
    for (const auto& m : spec.warm) {
      auto it = std::find_if(s.slots.begin(), s.slots.end(), [](const cluster::GpuSlot& g) { return g.empty(); });
      if (it == s.slots.end()) fail(ErrorKind::Capacity, "more warm instances than GPUs on server " + std::to_string(spec.id));
      const auto slot = static_cast<std::size_t>(it - s.slots.begin());
      cluster::begin_slot_load(s, slot, m, cfg.models.at(m).size_bytes, 0.0, log);
      cluster::finish_slot_load(s, slot, 0.0, log);
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Traces: "arrival_ms request_id model_id in_tokens out_tokens"

struct TraceRecord {
  std::uint64_t arrival_ms = 0;
  std::string request_id;
  std::string model_id;
  std::uint64_t in_tokens = 0;
  std::uint64_t out_tokens = 0;

  bool operator==(const TraceRecord&) const = default;
};

inline std::vector<TraceRecord> parse_trace(std::istream& in, const std::string& origin = "trace",
                                            std::vector<std::string>* warnings = nullptr) {
  std::vector<TraceRecord> out;
  bool sorted = true;
  for (auto& [lineno, text] : detail::content_lines(in)) {
    auto tok = split_ws(text);
    auto here = origin + ":" + std::to_string(lineno);
    if (tok.size() != 5) {
      fail(ErrorKind::Format, here + ": expected 'arrival_ms request_id model_id in_tokens out_tokens', got " +
                                  std::to_string(tok.size()) + " fields");
    }
    TraceRecord r;
    try {
      r.arrival_ms = parse_u64(tok[0], "arrival_ms");
      r.request_id = tok[1];
      r.model_id = tok[2];
      r.in_tokens = parse_u64(tok[3], "in_tokens");
      r.out_tokens = parse_u64(tok[4], "out_tokens");
    } catch (const Error& e) {
      fail(e.kind(), here + ": " + e.what());
    }
    if (r.out_tokens == 0) fail(ErrorKind::Format, here + ": out_tokens must be >= 1");
    if (!out.empty() && r.arrival_ms < out.back().arrival_ms) sorted = false;
    out.push_back(std::move(r));
  }
  if (!sorted) {
    std::stable_sort(out.begin(), out.end(), [](const TraceRecord& a, const TraceRecord& b) { return a.arrival_ms < b.arrival_ms; });
    if (warnings) warnings->push_back(origin + ": arrivals not monotone; trace sorted by arrival_ms");
  }
  std::map<std::string, std::size_t> seen;
  for (const auto& r : out) {
    if (seen[r.request_id]++) fail(ErrorKind::Format, origin + ": duplicate request id '" + r.request_id + "'");
  }
  return out;
}

inline std::vector<TraceRecord> load_trace(const std::filesystem::path& path, std::vector<std::string>* warnings = nullptr) {
  auto in = detail::open_input(path);
  return parse_trace(in, path.string(), warnings);
}

inline void write_trace(std::ostream& os, const std::vector<TraceRecord>& trace) {
  for (const auto& r : trace) {
    os << r.arrival_ms << ' ' << r.request_id << ' ' << r.model_id << ' ' << r.in_tokens << ' ' << r.out_tokens << '\n';
  }
}

// Generator spec:
//   trace duration_s=600 seed=7
//   model id=opt-6.7b rate=0.2 in_min=32 in_max=512 out_min=16 out_max=256
struct ModelWorkload {
  std::string model_id;
  double rate = 0.0;  // requests per second
  std::uint64_t in_min = 1, in_max = 1;
  std::uint64_t out_min = 1, out_max = 1;
};

struct TraceSpec {
  double duration_s = 0.0;
  std::uint64_t seed = 0;
  std::vector<ModelWorkload> models;
};

inline TraceSpec parse_trace_spec(std::istream& in, const std::string& origin = "trace spec") {
  TraceSpec spec;
  for (auto& [lineno, text] : detail::content_lines(in)) {
    Record r = Record::parse(text, lineno);
    try {
      if (r.tag() == "trace") {
        r.expect_keys({"duration_s", "seed"});
        spec.duration_s = r.number("duration_s");
        spec.seed = r.integer_or("seed", spec.seed);
      } else if (r.tag() == "model") {
        r.expect_keys({"id", "rate", "in_min", "in_max", "out_min", "out_max"});
        ModelWorkload m;
        m.model_id = r.str("id");
        m.rate = r.number("rate");
        m.in_min = r.integer_or("in_min", 1);
        m.in_max = r.integer_or("in_max", m.in_min);
        m.out_min = r.integer_or("out_min", 1);
        m.out_max = r.integer_or("out_max", m.out_min);
        if (m.in_min > m.in_max || m.out_min > m.out_max) fail(ErrorKind::Format, "min exceeds max");
        if (m.out_min == 0) fail(ErrorKind::Format, "out_min must be >= 1");
        spec.models.push_back(m);
      } else {
        fail(ErrorKind::Format, "unknown record '" + r.tag() + "'");
      }
    } catch (const Error& e) {
      fail(e.kind(), origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return spec;
}

inline TraceSpec load_trace_spec(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  return parse_trace_spec(in, path.string());
}

namespace detail {
// Portable draws: std distributions are implementation-defined, so traces
// would differ between standard libraries.
inline double uniform01(std::mt19937_64& g) { return static_cast<double>(g() >> 11) * 0x1.0p-53; }
inline std::uint64_t uniform_int(std::mt19937_64& g, std::uint64_t lo, std::uint64_t hi) { return lo + g() % (hi - lo + 1); }
}  // namespace detail

// Independent Poisson process per model, merged by arrival time.
inline std::vector<TraceRecord> generate_trace(const TraceSpec& spec) {
  if (spec.duration_s < 0) fail(ErrorKind::InvalidArgument, "duration must be >= 0");
  struct Draw {
    std::uint64_t ms;
    std::size_t model;
    std::size_t seq;
    TraceRecord rec;
  };
  std::vector<Draw> draws;
  for (std::size_t i = 0; i < spec.models.size(); ++i) {
    const auto& m = spec.models[i];
    if (m.rate < 0) fail(ErrorKind::InvalidArgument, "rate must be >= 0");
    if (m.rate == 0) continue;
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32), static_cast<std::uint32_t>(i)};
    std::mt19937_64 g(seq);
    double t = 0.0;
    for (std::size_t k = 0;; ++k) {
      t += -std::log(1.0 - detail::uniform01(g)) / m.rate;
      if (t >= spec.duration_s) break;
      TraceRecord r;
      r.arrival_ms = static_cast<std::uint64_t>(std::floor(t * 1000.0));
      r.model_id = m.model_id;
      r.in_tokens = detail::uniform_int(g, m.in_min, m.in_max);
      r.out_tokens = detail::uniform_int(g, m.out_min, m.out_max);
      draws.push_back(Draw{r.arrival_ms, i, k, std::move(r)});
    }
  }
  std::sort(draws.begin(), draws.end(), [](const Draw& a, const Draw& b) {
    return std::tie(a.ms, a.model, a.seq) < std::tie(b.ms, b.model, b.seq);
  });
  std::vector<TraceRecord> out;
  out.reserve(draws.size());
  for (std::size_t i = 0; i < draws.size(); ++i) {
    auto r = std::move(draws[i].rec);
    r.request_id = "r" + std::to_string(i);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Failure plans: "time_s server_id scope", scope = server | load

enum class FailureScope { Server, Load };

struct FailureInjection {
  double time = 0.0;
  int server = 0;
  FailureScope scope = FailureScope::Server;
};

inline std::vector<FailureInjection> parse_failure_plan(std::istream& in, const std::string& origin = "failure plan") {
  std::vector<FailureInjection> out;
  for (auto& [lineno, text] : detail::content_lines(in)) {
    auto tok = split_ws(text);
    auto here = origin + ":" + std::to_string(lineno);
    if (tok.size() != 3) fail(ErrorKind::Format, here + ": expected 'time_s server_id scope'");
    FailureInjection f;
    try {
      f.time = parse_double(tok[0], "time");
      f.server = static_cast<int>(parse_u64(tok[1], "server_id"));
    } catch (const Error& e) {
      fail(e.kind(), here + ": " + e.what());
    }
    if (f.time < 0) fail(ErrorKind::Format, here + ": time must be >= 0");
    if (tok[2] == "server") {
      f.scope = FailureScope::Server;
    } else if (tok[2] == "load") {
      f.scope = FailureScope::Load;
    } else {
      fail(ErrorKind::Format, here + ": scope must be 'server' or 'load'");
    }
    out.push_back(f);
  }
  return out;
}

inline std::vector<FailureInjection> load_failure_plan(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  return parse_failure_plan(in, path.string());
}

}  // namespace sllm::sim
