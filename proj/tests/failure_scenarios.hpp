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

// Five scripted runs on the two-server fixture: each failure side during each
// migration phase, plus a task that finishes on its source mid-migration.
// Timelines (live migration of A from server 1 to server 0 begins at 5.0,
// A's DRAM load on server 0 ends at 5.2147483648, round 1 runs past 5.3):
//  src_fails_loading   server 1 dies at 5.1: A lost, B re-placed on server 0 from SSD
//  src_fails_rounds    server 1 dies at 5.3: A lost, dest KV and copy dropped, same for B
//  dest_fails_loading  server 0 dies at 5.1: A runs on to 20.0, B queues behind it
//  dest_fails_rounds   server 0 dies at 5.3: as above
//  completes_on_src    A (3000 in, 80 out) ends at 8.0 inside round 1

#include "sllm/simulation.hpp"

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

namespace sllm::testing {

struct FailureCase {
  std::string name;
  sim::ClusterConfig cfg;
  std::vector<sim::TraceRecord> trace;
  std::vector<sim::FailureInjection> failures;
  // expectations
  bool a_completes = false;
  double a_completion = 0.0;
  int b_server = 0;
  double b_first_token = 0.0;
  migration::Phase migration_phase = migration::Phase::Aborted;
  bool dest_keeps_a = false;
};

inline std::vector<FailureCase> failure_cases(const std::filesystem::path& fixtures) {
  const auto cfg = sim::load_cluster_config(fixtures / "scenario_cluster.txt");
  const auto trace = sim::load_trace(fixtures / "scenario_trace.txt");
  using sim::FailureScope;
  const double dram = 10.0 * GiB / 50e9, ssd = 10.0 * GiB / 5e9, t = 0.1;
  std::vector<FailureCase> out;
  out.push_back({"src_fails_loading", cfg, trace, {{5.1, 1, FailureScope::Server}}, false, 0.0, 0, 5.1 + ssd + t,
                 migration::Phase::Aborted, false});
  out.push_back({"src_fails_rounds", cfg, trace, {{5.3, 1, FailureScope::Server}}, false, 0.0, 0, 5.3 + ssd + t,
                 migration::Phase::Aborted, false});
  out.push_back({"dest_fails_loading", cfg, trace, {{5.1, 0, FailureScope::Server}}, true, 20.0, 1, 20.0 + dram + t,
                 migration::Phase::Aborted, false});
  out.push_back({"dest_fails_rounds", cfg, trace, {{5.3, 0, FailureScope::Server}}, true, 20.0, 1, 20.0 + dram + t,
                 migration::Phase::Aborted, false});
  auto cheap = cfg;
  cheap.models["A"].a = 0.0001;
  out.push_back({"completes_on_src", cheap, {{0, "reqA", "A", 3000, 80}, {5000, "reqB", "B", 50, 50}}, {}, true, 8.0, 1, 8.0 + dram + t,
                 migration::Phase::CompletedBeforeMigration, true});
  return out;
}

// Runs one case with the invariant sweep on; returns a list of problems.
inline std::vector<std::string> check_failure_case(const FailureCase& fc) {
  std::vector<std::string> bad;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) bad.push_back(fc.name + ": " + what);
  };
  auto near = [](double a, double b) { return std::abs(a - b) <= 1e-6; };
  sim::SimOptions opt;
  opt.check_invariants = true;
  opt.keep_tokens = true;
  opt.failures = fc.failures;
  sim::SimResult res;
  try {
    res = sim::run_simulation(fc.trace, fc.cfg, sched::Policy::LiveMigration, opt);
  } catch (const std::exception& e) {
    return {fc.name + ": run failed: " + e.what()};
  }
  // Reference output for A: a run where it is never touched.
  sim::SimOptions ref_opt;
  ref_opt.keep_tokens = true;
  auto ref = sim::run_simulation(fc.trace, fc.cfg, sched::Policy::Availability, ref_opt);

  const auto& a = res.metrics.requests.at(0);
  const auto& b = res.metrics.requests.at(1);
  expect(res.migrations.size() == 1, "expected exactly one migration");
  if (!res.migrations.empty()) {
    expect(res.migrations[0].phase == fc.migration_phase,
           std::string("migration ended ") + std::string(migration::phase_name(res.migrations[0].phase)));
  }
  if (fc.a_completes) {
    expect(a.status == sim::RequestStatus::Completed, "A should complete");
    expect(near(a.completion, fc.a_completion), "A completion " + format_seconds(a.completion));
    expect(!a.migrated, "A must not be flagged migrated");
    expect(a.output == ref.metrics.requests.at(0).output, "A output differs from the undisturbed run");
  } else {
    expect(a.status == sim::RequestStatus::Aborted, "A should be lost with its source");
  }
  expect(b.status == sim::RequestStatus::Completed, "B should complete");
  expect(b.server == fc.b_server, "B ran on server " + std::to_string(b.server));
  expect(near(b.first_token, fc.b_first_token), "B first token " + format_seconds(b.first_token));

  const auto& dest = res.final_servers.at(0);
  bool dest_has_a = false;
  for (const auto& g : dest.slots) dest_has_a = dest_has_a || g.model_id == "A";
  expect(dest_has_a == fc.dest_keeps_a, fc.dest_keeps_a ? "dest should keep A as an idle instance" : "dest still holds A");
  for (const auto& s : res.final_servers) {
    auto v = cluster::check_invariants(s);
    expect(v.empty(), v.empty() ? "" : v.front());
    for (const auto& g : s.slots) expect(!g.pinned(), "slot left pinned at end of run");
  }
  expect(res.router_releases == res.metrics.counters.completed + res.metrics.counters.aborted, "router releases do not balance");
  return bad;
}

}  // namespace sllm::testing
