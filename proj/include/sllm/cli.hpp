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

// Command-line front end: convert, bench-load, gen-trace, simulate, compare,
// calibrate. Exit status: 0 ok, 1 usage error, 2 data error.

#include "sllm/ckpt_format.hpp"
#include "sllm/common.hpp"
#include "sllm/scheduler.hpp"
#include "sllm/simulation.hpp"
#include "sllm/workload.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <unistd.h>
#include <vector>

namespace sllm::cli {

namespace fs = std::filesystem;

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

inline LogLevel log_level_from_env() {
  const char* v = std::getenv("SLLM_SIM_LOG_LEVEL");
  if (!v || !*v) return LogLevel::Info;
  std::string s(v);
  if (s == "error") return LogLevel::Error;
  if (s == "info") return LogLevel::Info;
  if (s == "debug") return LogLevel::Debug;
  fail(ErrorKind::Usage, "SLLM_SIM_LOG_LEVEL must be error, info or debug (got '" + s + "')");
}

// ---------------------------------------------------------------------------
// Loader benchmark

struct BenchConfig {
  std::uint64_t size = 256 * MiB;
  std::uint64_t tensor_size = 64 * KiB;
  std::uint64_t chunk = 16 * MiB;
  std::uint32_t workers = 4;
  std::uint32_t reps = 5;
  fs::path work_dir;   // generated files live here
  fs::path naive_dir;  // optional: benchmark an existing naive checkpoint
  bool drop_cache = true;
};

struct BenchSample {
  std::string loader;
  std::uint32_t rep = 0;
  std::uint64_t bytes = 0;
  double seconds = 0.0;
  double throughput = 0.0;
};

struct BenchResult {
  std::vector<BenchSample> samples;
  double naive_median = 0.0;     // bytes/s
  double pipelined_median = 0.0;  // bytes/s
  double speedup = 0.0;
  std::uint64_t tensor_count = 0;
  bool direct_io_used = false;
  bool direct_io_fallback = false;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline void fill_pattern(const std::string& name, std::span<std::byte> out) {
  std::uint64_t x = 0;
  for (char c : name) x = engine::splitmix64(x ^ static_cast<std::uint8_t>(c));
  for (std::size_t i = 0; i < out.size(); i += 8) {
    x = engine::splitmix64(x);
    const auto n = std::min<std::size_t>(8, out.size() - i);
    std::memcpy(out.data() + i, &x, n);
  }
}

// Naive per-tensor loads versus the chunked pipeline, alternating per
// repetition, each from a cold page cache where the platform allows it.
inline BenchResult bench_load(const BenchConfig& cfg) {
  if (cfg.reps == 0) fail(ErrorKind::Usage, "--reps must be >= 1");
  if (cfg.workers == 0) fail(ErrorKind::Usage, "--workers must be >= 1");
  const fs::path naive = cfg.naive_dir.empty() ? cfg.work_dir / "naive" : cfg.naive_dir;
  const fs::path ckpt = cfg.work_dir / "ckpt";
  BenchResult res;
  if (cfg.naive_dir.empty()) {
    if (cfg.tensor_size == 0 || cfg.size < cfg.tensor_size) fail(ErrorKind::Usage, "--size must be at least one 64 KiB tensor");
    std::vector<ckpt::TensorSpec> tensors;
    const auto count = cfg.size / cfg.tensor_size;
    char name[32];
    for (std::uint64_t i = 0; i < count; ++i) {
      std::snprintf(name, sizeof(name), "t%06llu", static_cast<unsigned long long>(i));
      tensors.push_back(ckpt::TensorSpec::make(name, ckpt::DType::U8, {cfg.tensor_size}));
    }
    fs::remove_all(naive);
    ckpt::write_naive(naive, tensors, [](const ckpt::TensorSpec& t, std::span<std::byte> out) { fill_pattern(t.name, out); });
  }
  fs::remove_all(ckpt);
  auto manifest = ckpt::convert_from_naive(naive, ckpt, "bench", cfg.chunk, ckpt::kDefaultAlignment, ckpt::kDefaultMaxPartitionBytes, true);
  res.tensor_count = manifest.index.size();

  std::vector<double> naive_tp, pipe_tp;
  for (std::uint32_t rep = 0; rep < cfg.reps; ++rep) {
    if (cfg.drop_cache) ckpt::drop_directory_cache(naive);
    auto a = ckpt::naive_load(naive);
    res.samples.push_back(BenchSample{"naive", rep, a.report.bytes, a.report.wall_time, a.report.throughput});
    naive_tp.push_back(a.report.throughput);

    if (cfg.drop_cache) ckpt::drop_directory_cache(ckpt);
    ckpt::LoadOptions opt;
    opt.worker_count = cfg.workers;
    auto b = ckpt::load_checkpoint(ckpt, opt, "bench");
    res.samples.push_back(BenchSample{"pipelined", rep, manifest.buffer_bytes(), b.report.wall_time,
                                      static_cast<double>(manifest.buffer_bytes()) / std::max(b.report.wall_time, 1e-12)});
    pipe_tp.push_back(res.samples.back().throughput);
    res.direct_io_used = res.direct_io_used || b.report.direct_io_used;
    res.direct_io_fallback = res.direct_io_fallback || b.report.direct_io_fallback;
    if (rep == 0) {
      // The two loaders must agree byte for byte before their speed matters.
      for (const auto& e : manifest.index) {
        if (std::memcmp(a.buffer.data() + e.buffer_offset, b.buffer.data() + e.buffer_offset, e.spec.byte_length) != 0) {
          fail(ErrorKind::Corruption, "pipelined load differs from naive load in tensor " + e.spec.name);
        }
      }
    }
  }
  res.naive_median = median(naive_tp);
  res.pipelined_median = median(pipe_tp);
  res.speedup = res.naive_median > 0 ? res.pipelined_median / res.naive_median : 0.0;
  return res;
}

// Measured-load mode: wall time of a cold load of each model's checkpoint
// found in `dir`, substituted for q + n/b in the simulation.
inline std::map<std::string, double> measure_model_loads(const fs::path& dir, const sim::ClusterConfig& cfg) {
  std::map<std::string, double> out;
  for (const auto& [id, m] : cfg.models) {
    if (!fs::exists(dir / ckpt::manifest_file_name(id))) continue;
    ckpt::drop_directory_cache(dir);
    auto r = ckpt::load_checkpoint(dir, {}, id);
    out[id] = r.report.wall_time;
  }
  if (out.empty()) fail(ErrorKind::NotFound, "--measured-load: no checkpoint in " + dir.string() + " matches a configured model");
  return out;
}

// ---------------------------------------------------------------------------

namespace detail {

inline void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << content;
  if (!f) fail(ErrorKind::Io, "cannot write " + path.string());
}

inline std::vector<sched::Policy> parse_policies(const std::string& list) {
  std::vector<sched::Policy> out;
  for (const auto& p : split(list, ',')) {
    auto t = trim(p);
    if (!t.empty()) out.push_back(sched::parse_policy(t));
  }
  return out;
}

inline void print_engine(std::ostream& out, const sim::ClusterConfig& cfg) {
  out << "# engine per_token_time=" << format_double(cfg.engine.per_token_time, 9) << " recompute_rate="
      << format_double(cfg.engine.recompute_rate, 3) << " kv_bytes_per_token=" << cfg.engine.kv_bytes_per_token << "\n"
      << "# migration gap_threshold=" << cfg.migration.gap_threshold << " max_rounds=" << cfg.migration.max_rounds
      << " link_latency=" << format_double(cfg.link_latency, 9) << "\n"
      << "# cluster servers=" << cfg.servers.size() << " models=" << cfg.models.size() << "\n";
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"sllm: checkpoint loading benchmarks and serverless inference cluster simulation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  std::string trace, config, policy = "live_migration", policies = "live_migration,availability,locality,preemption";
  std::string out_path, failure_plan, measured_load, size = "256MiB", chunk = "16MiB", positional, positional2;
  std::uint64_t seed = 0;
  std::uint32_t workers = 4, reps = 5;

  auto* convert = app.add_subcommand("convert", "Convert a naive per-tensor directory into a chunked checkpoint");
  convert->add_option("naive_dir", positional, "Directory with listing.txt and one file per tensor")->required();
  convert->add_option("model_id", positional2, "Model id for the checkpoint")->required();
  convert->add_option("--out", out_path, "Output directory")->required();
  convert->add_option("--chunk", chunk, "Chunk size (e.g. 16MiB)");

  auto* bench = app.add_subcommand("bench-load", "Benchmark per-tensor vs pipelined checkpoint loading");
  bench->add_option("naive_dir", positional, "Existing naive directory to benchmark instead of a generated one");
  bench->add_option("--size", size, "Generated checkpoint size (64 KiB tensors)");
  bench->add_option("--chunk", chunk, "Chunk size");
  bench->add_option("--workers", workers, "Reader threads");
  bench->add_option("--reps", reps, "Repetitions");
  bench->add_option("--out", out_path, "Working directory for generated files");

  auto* gen = app.add_subcommand("gen-trace", "Generate a Poisson request trace from a generator spec");
  gen->add_option("--config", config, "Generator spec file")->required();
  auto* gen_seed = gen->add_option("--seed", seed, "Seed (overrides the spec)");
  gen->add_option("--out", out_path, "Output trace file (default stdout)");

  auto* simulate = app.add_subcommand("simulate", "Replay a trace under one policy");
  simulate->add_option("--trace", trace, "Trace file")->required();
  simulate->add_option("--config", config, "Cluster config file")->required();
  simulate->add_option("--policy", policy, "availability | locality | preemption | live_migration");
  simulate->add_option("--seed", seed, "Simulation seed");
  simulate->add_option("--failure-plan", failure_plan, "Failure injection plan");
  simulate->add_option("--measured-load", measured_load, "Directory of checkpoints whose measured load times replace q + n/b");
  simulate->add_option("--out", out_path, "Output directory for events.log, metrics.csv, requests.csv");

  auto* compare = app.add_subcommand("compare", "Replay a trace under several policies");
  compare->add_option("--trace", trace, "Trace file")->required();
  compare->add_option("--config", config, "Cluster config file")->required();
  compare->add_option("--policies", policies, "Comma-separated policies; ratios are relative to the first");
  compare->add_option("--seed", seed, "Simulation seed");
  compare->add_option("--failure-plan", failure_plan, "Failure injection plan");
  compare->add_option("--out", out_path, "Output directory for comparison.csv");

  auto* calibrate = app.add_subcommand("calibrate", "Fit resume-time parameters a and b from samples");
  calibrate->add_option("samples", positional, "File of 'tokens resume_seconds' lines")->required();

  if (argc <= 1) {
    err << app.help();
    return 1;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return 0;
    }
    app.exit(e, out, err);
    return 1;
  }

  try {
    const auto level = log_level_from_env();
    auto info = [&](const std::string& msg) {
      if (level >= LogLevel::Info) err << "[info] " << msg << "\n";
    };

    if (*convert) {
      const auto c = parse_bytes(chunk, "--chunk");
      out << "# convert naive_dir=" << positional << " model_id=" << positional2 << " out=" << out_path << " chunk=" << c << "\n";
      auto m = ckpt::convert_from_naive(positional, out_path, positional2, c);
      out << "tensors=" << m.index.size() << " partitions=" << m.partitions.size() << " payload_bytes=" << m.buffer_bytes()
          << " total_bytes=" << m.total_bytes << "\n";
      return 0;
    }

    if (*bench) {
      BenchConfig bc;
      bc.size = parse_bytes(size, "--size");
      bc.chunk = parse_bytes(chunk, "--chunk");
      bc.workers = workers;
      bc.reps = reps;
      bc.naive_dir = positional;
      bool temp = out_path.empty();
      bc.work_dir = temp ? fs::temp_directory_path() / ("sllm-bench-" + std::to_string(::getpid())) : fs::path(out_path);
      out << "# bench-load size=" << bc.size << " tensor_size=" << bc.tensor_size << " chunk=" << bc.chunk << " workers=" << bc.workers
          << " reps=" << bc.reps << " work_dir=" << bc.work_dir.string() << (positional.empty() ? "" : " naive_dir=" + positional) << "\n";
      info("writing benchmark checkpoint");
      BenchResult r;
      try {
        r = bench_load(bc);
      } catch (...) {
        if (temp) fs::remove_all(bc.work_dir);
        throw;
      }
      if (temp) fs::remove_all(bc.work_dir);
      out << "loader,rep,bytes,seconds,throughput_MBps\n";
      for (const auto& s : r.samples) {
        out << s.loader << ',' << s.rep << ',' << s.bytes << ',' << format_seconds(s.seconds) << ',' << format_double(s.throughput / 1e6, 3)
            << "\n";
      }
      out << "summary tensors=" << r.tensor_count << " naive_median_MBps=" << format_double(r.naive_median / 1e6, 3)
          << " pipelined_median_MBps=" << format_double(r.pipelined_median / 1e6, 3) << " speedup=" << format_double(r.speedup, 3)
          << " direct_io=" << (r.direct_io_used ? "yes" : "no") << (r.direct_io_fallback ? " (fallback to buffered reads)" : "") << "\n";
      return 0;
    }

    if (*gen) {
      auto spec = sim::load_trace_spec(config);
      if (gen_seed->count() > 0) spec.seed = seed;
      auto t = sim::generate_trace(spec);
      std::ostringstream body;
      body << "# gen-trace spec=" << config << " seed=" << spec.seed << " duration_s=" << format_double(spec.duration_s, 3)
           << " models=" << spec.models.size() << " requests=" << t.size() << "\n";
      sim::write_trace(body, t);
      if (out_path.empty()) {
        out << body.str();
      } else {
        detail::write_file(out_path, body.str());
        out << "# gen-trace spec=" << config << " seed=" << spec.seed << " out=" << out_path << " requests=" << t.size() << "\n";
      }
      return 0;
    }

    if (*simulate || *compare) {
      std::vector<std::string> warnings;
      auto t = sim::load_trace(trace, &warnings);
      for (const auto& w : warnings) err << "[warn] " << w << "\n";
      auto cfg = sim::load_cluster_config(config);
      sim::SimOptions opt;
      opt.seed = seed;
      if (!failure_plan.empty()) opt.failures = sim::load_failure_plan(failure_plan);

      if (*simulate) {
        auto p = sched::parse_policy(policy);
        if (!measured_load.empty()) opt.measured_load_seconds = measure_model_loads(measured_load, cfg);
        out << "# simulate trace=" << trace << " config=" << config << " policy=" << sched::policy_name(p) << " seed=" << seed
            << " failure_plan=" << (failure_plan.empty() ? "none" : failure_plan)
            << " measured_load=" << (measured_load.empty() ? "off" : measured_load) << " out=" << (out_path.empty() ? "stdout" : out_path)
            << " requests=" << t.size() << "\n";
        detail::print_engine(out, cfg);
        for (const auto& [m, s] : opt.measured_load_seconds) out << "# measured_load " << m << " " << format_seconds(s) << "\n";
        auto res = sim::run_simulation(t, cfg, p, opt);
        if (level >= LogLevel::Debug) sim::write_event_log(err, res.event_log);
        sim::write_metrics_table(out, {{p, &res.metrics}});
        std::ostringstream csv;
        csv << sim::kMetricsCsvHeader << "\n" << sim::metrics_csv_row(p, res.metrics) << "\n";
        if (out_path.empty()) {
          out << csv.str();
        } else {
          std::ostringstream log, reqs;
          sim::write_event_log(log, res.event_log);
          sim::write_requests_csv(reqs, res.metrics);
          detail::write_file(fs::path(out_path) / "events.log", log.str());
          detail::write_file(fs::path(out_path) / "metrics.csv", csv.str());
          detail::write_file(fs::path(out_path) / "requests.csv", reqs.str());
          info("wrote events.log, metrics.csv, requests.csv to " + out_path);
        }
        return 0;
      }

      auto ps = detail::parse_policies(policies);
      out << "# compare trace=" << trace << " config=" << config << " policies=" << policies << " seed=" << seed
          << " failure_plan=" << (failure_plan.empty() ? "none" : failure_plan) << " out=" << (out_path.empty() ? "stdout" : out_path)
          << " requests=" << t.size() << "\n";
      detail::print_engine(out, cfg);
      auto c = sim::compare_policies(t, cfg, ps, opt);
      std::vector<std::pair<sched::Policy, const sim::Metrics*>> rows;
      std::vector<double> ratios;
      for (const auto& r : c.rows) {
        rows.emplace_back(r.policy, &r.metrics);
        ratios.push_back(r.p99_startup_ratio);
      }
      sim::write_metrics_table(out, rows, ratios);
      std::ostringstream csv;
      sim::write_comparison_csv(csv, c);
      out << csv.str();
      if (!out_path.empty()) {
        detail::write_file(fs::path(out_path) / "comparison.csv", csv.str());
        info("wrote comparison.csv to " + out_path);
      }
      return 0;
    }

    if (*calibrate) {
      auto samples = sched::read_calibration_samples(positional);
      out << "# calibrate samples=" << positional << " n=" << samples.size() << "\n";
      auto r = sched::calibrate_resume_params(samples);
      out << "a=" << format_double(r.a, 12) << " b_intercept=" << format_double(r.b_intercept, 9) << " r_squared=" << format_double(r.r_squared, 6)
          << " rmse=" << format_double(r.rmse, 9) << "\n";
      out << "tokens,measured,predicted,residual\n";
      for (std::size_t i = 0; i < samples.size(); ++i) {
        out << format_double(samples[i].first, 3) << ',' << format_double(samples[i].second, 9) << ','
            << format_double(r.a * samples[i].first + r.b_intercept, 9) << ',' << format_double(r.residuals[i], 9) << "\n";
      }
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::Usage ? 1 : 2;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace sllm::cli
