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

// Startup-time-optimized placement. Every server is scored with the loading
// estimate q + n/b and, where a running task would have to move first, the
// resume estimate a * (t_in + t_out) + b; the cheapest option wins. The three
// baseline policies reuse the same enumeration with different selection rules.

#include "sllm/cluster_model.hpp"
#include "sllm/common.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace sllm::sched {

using cluster::ServerState;
using cluster::TierKind;

enum class Policy { Availability, Locality, Preemption, LiveMigration };

inline std::string_view policy_name(Policy p) {
  switch (p) {
    case Policy::Availability: return "availability";
    case Policy::Locality: return "locality";
    case Policy::Preemption: return "preemption";
    case Policy::LiveMigration: return "live_migration";
  }
  return "?";
}

inline Policy parse_policy(std::string_view s) {
  for (auto p : {Policy::Availability, Policy::Locality, Policy::Preemption, Policy::LiveMigration}) {
    if (policy_name(p) == s) return p;
  }
  fail(ErrorKind::Usage, "unknown policy '" + std::string(s) + "' (expected availability, locality, preemption, live_migration)");
}

// ---------------------------------------------------------------------------
// Estimators

struct LoadEstimate {
  double q = 0.0;  // queueing delay, s
  double n = 0.0;  // model bytes
  double b = 1.0;  // bytes/s
  double value = 0.0;
};

struct ResumeEstimate {
  double a = 0.0;            // s per token
  double b_intercept = 0.0;  // s
  std::uint64_t t_in = 0;
  std::uint64_t t_out = 0;
  double value = 0.0;
};

inline double est_load_time(double q, double n, double b) {
  if (!(b > 0)) fail(ErrorKind::InvalidArgument, "bandwidth must be > 0");
  if (n < 0 || q < 0) fail(ErrorKind::InvalidArgument, "queue time and model size must be >= 0");
  return q + n / b;
}

inline LoadEstimate make_load_estimate(double q, double n, double b) { return LoadEstimate{q, n, b, est_load_time(q, n, b)}; }

// t_out = d / t, floored: only completed tokens count.
inline std::uint64_t est_out_tokens(double d, double t) {
  if (!(t > 0)) fail(ErrorKind::InvalidArgument, "per-token time must be > 0");
  return floor_ratio(d, t);
}

inline double est_resume_time(double a, double b_intercept, std::uint64_t t_in, std::uint64_t t_out) {
  if (a < 0) fail(ErrorKind::InvalidArgument, "resume slope must be >= 0");
  return a * static_cast<double>(t_in + t_out) + b_intercept;
}

inline ResumeEstimate make_resume_estimate(double a, double b_intercept, std::uint64_t t_in, std::uint64_t t_out) {
  return ResumeEstimate{a, b_intercept, t_in, t_out, est_resume_time(a, b_intercept, t_in, t_out)};
}

struct CalibrationResult {
  double a = 0.0;
  double b_intercept = 0.0;
  std::size_t samples = 0;
  std::vector<double> residuals;
  double rss = 0.0;
  double rmse = 0.0;
  double r_squared = 1.0;
};

// Ordinary least squares for seconds = a * tokens + b over (tokens, seconds).
inline CalibrationResult calibrate_resume_params(std::span<const std::pair<double, double>> samples) {
  if (samples.size() < 2) fail(ErrorKind::InvalidArgument, "calibration needs at least 2 samples");
  const double n = static_cast<double>(samples.size());
  double mx = 0, my = 0;
  for (auto [x, y] : samples) {
    mx += x;
    my += y;
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (auto [x, y] : samples) {
    sxx += (x - mx) * (x - mx);
    sxy += (x - mx) * (y - my);
    syy += (y - my) * (y - my);
  }
  if (sxx == 0) fail(ErrorKind::InvalidArgument, "degenerate calibration samples: all token counts equal");
  CalibrationResult r;
  r.a = sxy / sxx;
  r.b_intercept = my - r.a * mx;
  r.samples = samples.size();
  for (auto [x, y] : samples) {
    double e = y - (r.a * x + r.b_intercept);
    r.residuals.push_back(e);
    r.rss += e * e;
  }
  r.rmse = std::sqrt(r.rss / n);
  r.r_squared = syy > 0 ? 1.0 - r.rss / syy : 1.0;
  return r;
}

// "tokens resume_seconds" per line; blank lines and '#' comments skipped.
inline std::vector<std::pair<double, double>> read_calibration_samples(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::NotFound, "cannot open calibration file " + path.string());
  std::vector<std::pair<double, double>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto tok = split_ws(t);
    if (tok.size() != 2) fail(ErrorKind::Format, path.string() + ":" + std::to_string(lineno) + ": expected 'tokens resume_seconds'");
    out.emplace_back(parse_double(tok[0], "tokens"), parse_double(tok[1], "resume_seconds"));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plans

struct ModelInfo {
  std::string id;
  std::uint64_t size_bytes = 0;
  double a = 0.0;
  double b_intercept = 0.0;
  std::uint64_t seed = 0;
};

using ModelCatalog = std::map<std::string, ModelInfo>;

// What the scheduler learns about a running task from the request router.
struct RunningTaskView {
  std::string request_id;
  std::string model_id;
  int server = 0;
  std::size_t slot = 0;
  std::uint64_t input_tokens = 0;
  double duration = 0.0;        // d
  double per_token_time = 0.1;  // t
  std::uint64_t remaining_tokens = 0;
  bool migratable = true;  // false while already migrating; its slot is then promised to another request
};

struct ClusterView {
  const std::vector<ServerState>& servers;
  const ModelCatalog& models;
  std::map<std::string, RunningTaskView> tasks;
  double now = 0.0;
  std::map<int, std::size_t> queued;  // requests already waiting for a slot, per server
};

struct ScheduleRequest {
  std::string request_id;
  std::string model_id;
  std::uint64_t size_bytes = 0;
};

enum class PlanKind { FreeGpu = 0, MigrateThenLoad = 1, Queue = 2 };

inline std::string_view plan_kind_name(PlanKind k) {
  switch (k) {
    case PlanKind::FreeGpu: return "FREE_GPU";
    case PlanKind::MigrateThenLoad: return "MIGRATE_THEN_LOAD";
    case PlanKind::Queue: return "QUEUE";
  }
  return "?";
}

struct CandidatePlan {
  PlanKind kind = PlanKind::FreeGpu;
  int server_id = 0;
  TierKind source_tier = TierKind::Remote;  // where the requested model would load from
  LoadEstimate load;                        // requested model on this server
  std::optional<std::string> displaced_task;  // migrated (MIGRATE) or awaited (QUEUE) task
  int displaced_dest = -1;
  LoadEstimate displaced_load;
  ResumeEstimate resume;
  double wait = 0.0;  // QUEUE: time until the awaited task finishes
  double startup_estimate = 0.0;
};

inline const ModelInfo& model_info(const ModelCatalog& models, const std::string& id) {
  auto it = models.find(id);
  if (it == models.end()) fail(ErrorKind::NotFound, "unknown model '" + id + "'");
  return it->second;
}

// Load estimate for putting `model` onto a free slot of `s` right now.
inline std::pair<TierKind, LoadEstimate> load_estimate_on(const ServerState& s, const std::string& model, std::uint64_t size,
                                                          double now) {
  auto src = cluster::load_source(s, model);
  if (src == TierKind::Device) return {src, make_load_estimate(0.0, static_cast<double>(size), kInfinity)};
  if (src == TierKind::Remote && !s.has_tier(TierKind::Remote)) {
    fail(ErrorKind::InvalidArgument, "server " + std::to_string(s.server_id) + " has no remote tier for model " + model);
  }
  return {src, make_load_estimate(s.queue_delay(now), static_cast<double>(size), cluster::effective_bandwidth(s, src))};
}

inline bool can_host(const ServerState& s, std::uint64_t size) { return s.up && size <= s.slot_capacity(); }

// Best free-GPU destination for a task displaced from `exclude`. Chains are
// not considered: the destination must already have a free slot.
inline std::optional<std::pair<int, LoadEstimate>> migration_dest(const ClusterView& v, int exclude, const std::string& model,
                                                                  std::uint64_t size) {
  std::optional<std::pair<int, LoadEstimate>> best;
  for (const auto& d : v.servers) {
    if (d.server_id == exclude || !can_host(d, size) || d.free_slot_count() == 0) continue;
    auto est = load_estimate_on(d, model, size, v.now).second;
    if (!best || est.value < best->second.value) best = std::make_pair(d.server_id, est);
  }
  return best;
}

// Per server: a FREE_GPU plan if a slot is free; a MIGRATE_THEN_LOAD plan per
// running task that has somewhere to go; and a QUEUE plan when every slot is
// busy. A queued request gets the k-th earliest finishing slot, k counting the
// requests already queued there; slots of migrating tasks are promised elsewhere.
inline std::vector<CandidatePlan> enumerate_plans(const ClusterView& v, const ScheduleRequest& req) {
  std::vector<CandidatePlan> plans;
  for (const auto& s : v.servers) {
    if (!can_host(s, req.size_bytes)) continue;
    auto [src, local] = load_estimate_on(s, req.model_id, req.size_bytes, v.now);

    if (s.free_slot_count() > 0) {
      CandidatePlan p;
      p.kind = PlanKind::FreeGpu;
      p.server_id = s.server_id;
      p.source_tier = src;
      p.load = local;
      p.startup_estimate = local.value;
      plans.push_back(p);
    }

    std::vector<std::pair<double, const RunningTaskView*>> finishing;
    for (const auto& slot : s.slots) {
      if (slot.status != cluster::SlotStatus::Running) continue;
      auto it = v.tasks.find(slot.task_id);
      if (it == v.tasks.end()) continue;
      const auto& task = it->second;
      if (!task.migratable) continue;
      finishing.emplace_back(static_cast<double>(task.remaining_tokens) * task.per_token_time, &task);
      const auto& info = model_info(v.models, task.model_id);
      auto dest = migration_dest(v, s.server_id, task.model_id, info.size_bytes);
      if (!dest) continue;
      // After the task leaves, its model is unloaded from this slot, so the
      // requested model's source is computed without that instance.
      CandidatePlan p;
      p.kind = PlanKind::MigrateThenLoad;
      p.server_id = s.server_id;
      p.source_tier = src;
      p.load = local;
      p.displaced_task = task.request_id;
      p.displaced_dest = dest->first;
      p.displaced_load = dest->second;
      p.resume = make_resume_estimate(info.a, info.b_intercept, task.input_tokens,
                                      est_out_tokens(task.duration, task.per_token_time));
      p.startup_estimate = p.displaced_load.value + p.resume.value + p.load.value;
      plans.push_back(p);
    }

    // Waiters ahead of us take the earliest finishers, one each.
    std::size_t ahead = 0;
    if (auto q = v.queued.find(s.server_id); q != v.queued.end()) ahead = q->second;
    std::stable_sort(finishing.begin(), finishing.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    if (s.free_slot_count() == 0 && ahead < finishing.size()) {
      CandidatePlan p;
      p.kind = PlanKind::Queue;
      p.server_id = s.server_id;
      p.source_tier = src;
      p.load = local;
      p.displaced_task = finishing[ahead].second->request_id;
      p.wait = finishing[ahead].first;
      p.startup_estimate = p.wait + local.value;
      plans.push_back(p);
    }
  }
  return plans;
}

enum class Action { StartOnFreeGpu, MigrateThenLoad, PreemptThenLoad, Queue, Paused };

inline std::string_view action_name(Action a) {
  switch (a) {
    case Action::StartOnFreeGpu: return "START";
    case Action::MigrateThenLoad: return "MIGRATE";
    case Action::PreemptThenLoad: return "PREEMPT";
    case Action::Queue: return "QUEUE";
    case Action::Paused: return "PAUSED";
  }
  return "?";
}

struct Selection {
  Action action = Action::Paused;
  std::optional<CandidatePlan> plan;
  double score = kInfinity;

  bool paused() const { return action == Action::Paused; }
};

// Ties go to the lowest server id, then FREE_GPU < MIGRATE_THEN_LOAD < QUEUE,
// then enumeration order.
inline Selection select_plan(const std::vector<CandidatePlan>& plans, Policy policy) {
  using Key = std::tuple<int, double, int, int, std::size_t>;
  std::optional<Key> best_key;
  Selection best;
  for (std::size_t i = 0; i < plans.size(); ++i) {
    const auto& p = plans[i];
    int rank = 0;  // leading key component; only the locality policy uses it
    double score = p.startup_estimate;
    Action action = Action::StartOnFreeGpu;
    switch (policy) {
      case Policy::LiveMigration:
        action = p.kind == PlanKind::FreeGpu ? Action::StartOnFreeGpu
                 : p.kind == PlanKind::MigrateThenLoad ? Action::MigrateThenLoad
                                                       : Action::Queue;
        break;
      case Policy::Availability:
        if (p.kind != PlanKind::FreeGpu) continue;
        break;
      case Policy::Locality:
        if (p.kind == PlanKind::MigrateThenLoad) continue;
        rank = static_cast<int>(p.source_tier);
        action = p.kind == PlanKind::FreeGpu ? Action::StartOnFreeGpu : Action::Queue;
        break;
      case Policy::Preemption:
        if (p.kind == PlanKind::MigrateThenLoad) continue;
        if (p.kind == PlanKind::Queue) {
          // Kill the running task now instead of waiting for it.
          score = p.load.value;
          action = Action::PreemptThenLoad;
        }
        break;
    }
    Key key{rank, score, p.server_id, static_cast<int>(p.kind), i};
    if (!best_key || key < *best_key) {
      best_key = key;
      best = Selection{action, p, score};
    }
  }
  return best;
}

}  // namespace sllm::sched
