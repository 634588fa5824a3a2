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

// Deterministic discrete-event simulation of a serverless inference cluster.
// Events run in (time, sequence) order on a single thread; loads are timed
// with q + n/b, generation with the engine's per-token time, and migrations
// with the round protocol from migration.hpp.

#include "sllm/cluster_model.hpp"
#include "sllm/common.hpp"
#include "sllm/inference_engine.hpp"
#include "sllm/migration.hpp"
#include "sllm/router.hpp"
#include "sllm/scheduler.hpp"
#include "sllm/workload.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <optional>
#include <ostream>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

namespace sllm::sim {

using engine::InferenceTask;
using engine::Token;
using sched::Policy;

enum class EventKind { Arrival, LoadDone, RoundDone, TokenBatch, TaskDone, FailureInject, Retry };

inline std::string_view event_kind_name(EventKind k) {
  switch (k) {
    case EventKind::Arrival: return "ARRIVAL";
    case EventKind::LoadDone: return "LOAD_DONE";
    case EventKind::RoundDone: return "ROUND_DONE";
    case EventKind::TokenBatch: return "TOKEN_BATCH";
    case EventKind::TaskDone: return "TASK_DONE";
    case EventKind::FailureInject: return "FAILURE_INJECT";
    case EventKind::Retry: return "RETRY";
  }
  return "?";
}

struct Event {
  double time = 0.0;
  std::uint64_t seq = 0;
  EventKind kind = EventKind::Arrival;
  std::string request_id;
  int server = -1;
  std::size_t slot = 0;
  std::uint64_t token = 0;  // staleness guard: request epoch, job id or migration round
  std::uint64_t migration = 0;
  bool final_round = false;
  std::size_t index = 0;
};

// ---------------------------------------------------------------------------
// Metrics

// Nearest rank on the sorted samples: sorted[ceil(p/100 * n)], 1-indexed.
inline double percentile(std::vector<double> samples, double p) {
  if (samples.empty()) fail(ErrorKind::InvalidArgument, "percentile of an empty sample");
  if (!(p > 0 && p <= 100)) fail(ErrorKind::InvalidArgument, "percentile p must be in (0, 100]");
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, samples.size());
  return samples[rank - 1];
}

struct LatencySummary {
  std::size_t count = 0;
  double mean = 0.0;
  double p50 = 0.0;
  double p99 = 0.0;
  double max = 0.0;
};

inline LatencySummary summarize(const std::vector<double>& v) {
  LatencySummary s;
  if (v.empty()) return s;
  s.count = v.size();
  double sum = 0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  s.p50 = percentile(v, 50);
  s.p99 = percentile(v, 99);
  s.max = *std::max_element(v.begin(), v.end());
  return s;
}

enum class RequestStatus { Pending, Completed, Aborted };

struct RequestResult {
  std::string request_id;
  std::string model_id;
  std::uint64_t in_tokens = 0;
  std::uint64_t out_tokens = 0;
  double arrival = 0.0;
  double first_token = -1.0;
  double completion = -1.0;
  RequestStatus status = RequestStatus::Pending;
  int server = -1;  // where it finished
  std::size_t attempts = 0;
  bool migrated = false;
  std::vector<Token> output;  // SimOptions::keep_tokens only

  double startup() const { return first_token - arrival; }
  double total() const { return completion - arrival; }
};

struct Counters {
  std::size_t completed = 0;
  std::size_t aborted = 0;
  std::size_t cold_starts = 0;
  std::size_t warm_starts = 0;
  std::size_t migrations = 0;
  std::size_t migration_stalls = 0;
  std::size_t migration_aborts = 0;
  std::size_t preemptions = 0;
  std::size_t pauses = 0;
  std::size_t queued = 0;
};

struct Metrics {
  std::vector<RequestResult> requests;  // trace order
  Counters counters;
  LatencySummary startup;
  LatencySummary total;
  double makespan = 0.0;
};

struct MigrationRecord {
  std::uint64_t id = 0;
  std::string request_id;
  std::string waiting_request;
  int src = 0;
  int dest = 0;
  double began = 0.0;
  double dest_ready = 0.0;
  double finished = 0.0;
  std::size_t rounds = 0;
  std::vector<std::size_t> gaps;
  bool stalled = false;
  migration::Phase phase = migration::Phase::DestLoading;
  std::uint64_t bytes_transferred = 0;
  std::size_t context_at_handoff = 0;
};

struct SimOptions {
  std::uint64_t seed = 0;
  std::vector<FailureInjection> failures;
  bool check_invariants = false;  // sweep cluster/router/status-store invariants after every event
  bool keep_tokens = false;
  std::map<std::string, double> measured_load_seconds;  // measured-load mode: per-model wall time
};

struct SimResult {
  Metrics metrics;
  std::vector<std::string> event_log;
  std::vector<MigrationRecord> migrations;
  std::vector<cluster::StatusRecord> status_log;
  std::vector<cluster::ServerState> final_servers;
  std::size_t router_releases = 0;
};

// ---------------------------------------------------------------------------
// Event loop

namespace detail {

struct EventAfter {
  bool operator()(const Event& a, const Event& b) const { return std::tie(a.time, a.seq) > std::tie(b.time, b.seq); }
};

class Simulator {
 public:
  Simulator(const ClusterConfig& cfg, Policy policy, const SimOptions& opt) : cfg_(cfg), policy_(policy), opt_(opt) {
    servers_ = build_servers(cfg_, &store_);
    server_queue_.resize(servers_.size());
  }

  SimResult run(const std::vector<TraceRecord>& trace) {
    for (std::size_t i = 0; i < trace.size(); ++i) {
      const auto& t = trace[i];
      if (!cfg_.models.count(t.model_id)) fail(ErrorKind::Format, "trace request " + t.request_id + " references unknown model '" + t.model_id + "'");
      if (reqs_.count(t.request_id)) fail(ErrorKind::Format, "duplicate request id '" + t.request_id + "'");
      Req r;
      r.trace = t;
      r.result.request_id = t.request_id;
      r.result.model_id = t.model_id;
      r.result.in_tokens = t.in_tokens;
      r.result.out_tokens = t.out_tokens;
      r.result.arrival = static_cast<double>(t.arrival_ms) / 1000.0;
      reqs_.emplace(t.request_id, std::move(r));
      order_.push_back(t.request_id);
      Event e;
      e.kind = EventKind::Arrival;
      e.time = static_cast<double>(t.arrival_ms) / 1000.0;
      e.request_id = t.request_id;
      push(e);
    }
    for (std::size_t i = 0; i < opt_.failures.size(); ++i) {
      const auto& f = opt_.failures[i];
      if (f.server < 0 || f.server >= static_cast<int>(servers_.size())) {
        fail(ErrorKind::Format, "failure plan references unknown server " + std::to_string(f.server));
      }
      Event e;
      e.kind = EventKind::FailureInject;
      e.time = f.time;
      e.server = f.server;
      e.index = i;
      push(e);
    }

    while (!queue_.empty()) {
      Event e = queue_.top();
      queue_.pop();
      if (e.time < now_) fail(ErrorKind::State, "causality violation: event before current time");
      now_ = e.time;
      dispatch(e);
      if (opt_.check_invariants) sweep_invariants();
    }

    SimResult out;
    for (const auto& id : order_) {
      auto& r = reqs_.at(id);
      if (r.result.status == RequestStatus::Pending) {
        // Only reachable when failures leave no server able to host the model.
        r.result.status = RequestStatus::Aborted;
        ++counters_.aborted;
        log("ABORT", id + " reason=unserved");
      }
      out.metrics.requests.push_back(r.result);
    }
    std::vector<double> startup, total;
    for (const auto& r : out.metrics.requests) {
      if (r.status != RequestStatus::Completed) continue;
      startup.push_back(r.startup());
      total.push_back(r.total());
      out.metrics.makespan = std::max(out.metrics.makespan, r.completion);
    }
    out.metrics.counters = counters_;
    out.metrics.startup = summarize(startup);
    out.metrics.total = summarize(total);
    out.event_log = std::move(log_);
    for (auto& [id, m] : migs_) out.migrations.push_back(m.record);
    out.status_log = store_.records();
    out.final_servers = servers_;
    out.router_releases = router_.release_count();
    return out;
  }

 private:
  enum class ReqPhase { Waiting, Paused, Queued, AwaitMigration, Loading, Running, Done };

  struct Req {
    TraceRecord trace;
    RequestResult result;
    ReqPhase phase = ReqPhase::Waiting;
    std::uint64_t epoch = 0;
    std::optional<InferenceTask> task;
    int server = -1;
    std::size_t slot = 0;
    double last_advance = 0.0;
    bool stopped = false;        // source halted while the final tokens are shipped
    std::uint64_t migration = 0;  // active session where this task is the source
    bool preempted = false;
  };

  enum class JobKind { Start, MigrationDest };

  // Why a slot is pinned in LOADING: a real transfer or a reserved idle instance.
  struct SlotJob {
    std::uint64_t id = 0;
    JobKind kind = JobKind::Start;
    std::string request_id;
    std::uint64_t migration = 0;
    bool real_load = false;
    bool done = false;  // transfer finished, slot held for the migration hand-off
    cluster::TierKind source = cluster::TierKind::Remote;
    double load_start = 0.0;
    double load_end = 0.0;
  };

  struct Claim {
    std::size_t slot = 0;
    bool warm = false;
    double start = 0.0;
    double done_at = 0.0;
    cluster::TierKind source = cluster::TierKind::Device;
  };

  struct Mig {
    migration::MigrationSession session;
    std::string request_id;
    std::string waiting;
    int src = 0;
    std::size_t src_slot = 0;
    int dest = 0;
    std::size_t dest_slot = 0;
    std::uint64_t round = 0;
    bool finalized = false;
    std::optional<migration::MigrationOutcome> outcome;
    bool over = false;
    MigrationRecord record;
  };

  // -- plumbing ------------------------------------------------------------

  void push(Event e) {
    e.seq = seq_++;
    queue_.push(std::move(e));
  }

  void log(std::string_view kind, const std::string& payload) {
    log_.push_back(format_seconds(now_) + " " + std::string(kind) + " " + payload);
  }

  const sched::ModelInfo& model(const std::string& id) const { return cfg_.models.at(id); }

  std::uint64_t task_seed(const std::string& model_id) const { return engine::splitmix64(opt_.seed ^ engine::splitmix64(model(model_id).seed)); }

  double load_seconds(const cluster::ServerState& s, cluster::TierKind source, const std::string& model_id) const {
    if (source == cluster::TierKind::Device) return 0.0;
    if (auto it = opt_.measured_load_seconds.find(model_id); it != opt_.measured_load_seconds.end()) return it->second;
    return static_cast<double>(model(model_id).size_bytes) / cluster::effective_bandwidth(s, source);
  }

  void advance(Req& r) {
    if (!r.task || r.stopped) return;
    auto st = r.task->state();
    if (st == engine::TaskState::Running || st == engine::TaskState::Migrating) r.task->advance(now_ - r.last_advance, cfg_.engine);
    r.last_advance = now_;
  }

  void advance_all() {
    for (auto& [id, r] : reqs_) {
      if (r.phase == ReqPhase::Running) advance(r);
    }
  }

  sched::ClusterView view() {
    advance_all();
    sched::ClusterView v{servers_, cfg_.models, {}, now_, {}};
    for (std::size_t i = 0; i < server_queue_.size(); ++i) {
      if (!server_queue_[i].empty()) v.queued[static_cast<int>(i)] = server_queue_[i].size();
    }
    for (auto& [id, r] : reqs_) {
      if (r.phase != ReqPhase::Running) continue;
      router_.update_measurement(id, r.task->duration(), cfg_.engine.per_token_time);
      auto m = router_.measurement(id);
      sched::RunningTaskView t;
      t.request_id = id;
      t.model_id = r.trace.model_id;
      t.server = r.server;
      t.slot = r.slot;
      t.input_tokens = r.task->input_count();
      t.duration = m.duration;
      t.per_token_time = m.per_token_time;
      t.remaining_tokens = r.task->remaining_count();
      t.migratable = r.migration == 0 && r.task->state() == engine::TaskState::Running;
      v.tasks.emplace(id, t);
    }
    return v;
  }

  void retry_later() {
    Event e;
    e.kind = EventKind::Retry;
    e.time = now_;
    push(e);
  }

  // -- dispatch ------------------------------------------------------------

  void dispatch(const Event& e) {
    switch (e.kind) {
      case EventKind::Arrival: {
        auto& r = reqs_.at(e.request_id);
        log("ARRIVAL", e.request_id + " model=" + r.trace.model_id + " in=" + std::to_string(r.trace.in_tokens) +
                           " out=" + std::to_string(r.trace.out_tokens));
        schedule(e.request_id);
        break;
      }
      case EventKind::LoadDone: on_load_done(e); break;
      case EventKind::RoundDone: on_round_done(e); break;
      case EventKind::TokenBatch: {
        auto& r = reqs_.at(e.request_id);
        if (r.epoch != e.token || r.phase != ReqPhase::Running) break;
        r.result.first_token = now_;
        log("TOKEN_BATCH", e.request_id + " server=" + std::to_string(r.server) + " first_token");
        break;
      }
      case EventKind::TaskDone: on_task_done(e); break;
      case EventKind::FailureInject: on_failure(opt_.failures.at(e.index)); break;
      case EventKind::Retry: {
        if (paused_.empty()) break;
        log("RETRY", "paused=" + std::to_string(paused_.size()));
        std::deque<std::string> pending;
        pending.swap(paused_);
        for (const auto& id : pending) schedule(id);
        break;
      }
    }
  }

  // -- scheduling ----------------------------------------------------------

  void schedule(const std::string& id) {
    auto& r = reqs_.at(id);
    const auto& info = model(r.trace.model_id);
    auto v = view();
    auto plans = sched::enumerate_plans(v, sched::ScheduleRequest{id, r.trace.model_id, info.size_bytes});
    auto sel = sched::select_plan(plans, policy_);
    if (policy_ == Policy::Preemption && r.preempted) {
      // A restarting victim does not preempt in turn: free GPU or queue, whichever is sooner.
      std::erase_if(plans, [](const sched::CandidatePlan& p) { return p.kind == sched::PlanKind::MigrateThenLoad; });
      sel = sched::select_plan(plans, Policy::LiveMigration);
    }
    std::string payload = id + " policy=" + std::string(sched::policy_name(policy_)) + " plans=" + std::to_string(plans.size()) +
                          " action=" + std::string(sched::action_name(sel.action));
    if (sel.plan) payload += " server=" + std::to_string(sel.plan->server_id) + " est=" + format_seconds(sel.score);
    log("SCHEDULE", payload);

    switch (sel.action) {
      case sched::Action::Paused:
        r.phase = ReqPhase::Paused;
        paused_.push_back(id);
        ++counters_.pauses;
        break;
      case sched::Action::StartOnFreeGpu: assign(id, sel.plan->server_id); break;
      case sched::Action::Queue:
        r.phase = ReqPhase::Queued;
        server_queue_[static_cast<std::size_t>(sel.plan->server_id)].push_back(id);
        ++counters_.queued;
        break;
      case sched::Action::MigrateThenLoad: start_migration(*sel.plan, id); break;
      case sched::Action::PreemptThenLoad: preempt(sel.plan->server_id, id); break;
    }
  }

  std::uint64_t new_job(int server, std::size_t slot, SlotJob job) {
    job.id = next_job_++;
    jobs_[{server, slot}] = job;
    return job.id;
  }

  // Claims a slot on `server` for `model`: an idle instance if one exists,
  // otherwise an empty slot (evicting the LRU idle instance if needed).
  // Returns the slot, whether it was warm, and the transfer window.
  Claim claim_slot(int server, const std::string& model_id) {
    auto& s = servers_[static_cast<std::size_t>(server)];
    for (std::size_t i = 0; i < s.slots.size(); ++i) {
      auto& g = s.slots[i];
      if (g.idle_instance() && g.model_id == model_id) {
        g.status = cluster::SlotStatus::Loading;  // reserved
        g.last_use = now_;
        return Claim{i, true, now_, now_, cluster::TierKind::Device};
      }
    }
    const auto source = cluster::load_source(s, model_id);
    const auto size = model(model_id).size_bytes;
    cluster::evict_for(s, cluster::TierKind::Device, size, now_, &store_);
    std::size_t slot = s.slots.size();
    for (std::size_t i = 0; i < s.slots.size(); ++i) {
      if (s.slots[i].empty()) {
        slot = i;
        break;
      }
    }
    cluster::begin_slot_load(s, slot, model_id, size, now_, &store_);
    const double start = std::max(now_, s.load_busy_until);
    const double end = start + load_seconds(s, source, model_id);
    s.load_busy_until = end;
    return Claim{slot, false, start, end, source};
  }

  void assign(const std::string& id, int server) {
    auto& r = reqs_.at(id);
    const auto claim = claim_slot(server, r.trace.model_id);
    const auto [slot, warm, start, done_at, source] = claim;
    warm ? ++counters_.warm_starts : ++counters_.cold_starts;
    r.phase = ReqPhase::Loading;
    r.server = server;
    r.slot = slot;
    router_.route_to(id, r.trace.model_id, server);
    SlotJob job;
    job.kind = JobKind::Start;
    job.request_id = id;
    job.real_load = !warm;
    job.source = source;
    job.load_start = start;
    job.load_end = done_at;
    auto jid = new_job(server, slot, job);
    log("LOAD_BEGIN", id + " model=" + r.trace.model_id + " server=" + std::to_string(server) + " slot=" + std::to_string(slot) +
                          " source=" + std::string(cluster::tier_name(source)) + " done_at=" + format_seconds(done_at));
    Event e;
    e.kind = EventKind::LoadDone;
    e.time = done_at;
    e.server = server;
    e.slot = slot;
    e.token = jid;
    push(e);
  }

  void start_request(const std::string& id, int server, std::size_t slot) {
    auto& r = reqs_.at(id);
    auto& s = servers_[static_cast<std::size_t>(server)];
    const auto seed = task_seed(r.trace.model_id);
    r.task.emplace(id, r.trace.model_id, seed, engine::synth_input_tokens(seed, id, r.trace.in_tokens), r.trace.out_tokens);
    r.task->set_state(engine::TaskState::Running);
    r.task->set_start_time(now_);
    r.last_advance = now_;
    r.stopped = false;
    r.phase = ReqPhase::Running;
    r.server = server;
    r.slot = slot;
    ++r.epoch;
    ++r.result.attempts;
    s.slots[slot].status = cluster::SlotStatus::Free;
    cluster::start_task(s, slot, id, now_);
    log("START", id + " server=" + std::to_string(server) + " slot=" + std::to_string(slot) + " attempt=" + std::to_string(r.result.attempts));
    arm_task_events(r, r.task->generated_count() == 0);
  }

  void arm_task_events(Req& r, bool first_token_pending) {
    if (first_token_pending) {
      Event t;
      t.kind = EventKind::TokenBatch;
      t.time = now_ + cfg_.engine.per_token_time - r.task->remainder();
      t.request_id = r.trace.request_id;
      t.token = r.epoch;
      push(t);
    }
    Event d;
    d.kind = EventKind::TaskDone;
    d.time = now_ + r.task->time_to_complete(cfg_.engine);
    d.request_id = r.trace.request_id;
    d.token = r.epoch;
    push(d);
  }

  // Frees a slot for the next local waiter, then lets paused requests retry.
  void on_slot_free(int server) {
    auto& q = server_queue_[static_cast<std::size_t>(server)];
    auto& s = servers_[static_cast<std::size_t>(server)];
    while (!q.empty() && s.up && s.free_slot_count() > 0) {
      auto id = q.front();
      q.pop_front();
      assign(id, server);
    }
    retry_later();
  }

  void preempt(int server, const std::string& id) {
    Req* victim = nullptr;
    for (auto& [rid, r] : reqs_) {
      if (r.phase != ReqPhase::Running || r.server != server || r.migration != 0 || r.stopped) continue;
      advance(r);
      if (!victim || r.task->generated_count() < victim->task->generated_count()) victim = &r;
    }
    if (!victim) {
      // Every task there is mid-migration; wait for a slot instead.
      reqs_.at(id).phase = ReqPhase::Queued;
      server_queue_[static_cast<std::size_t>(server)].push_back(id);
      ++counters_.queued;
      return;
    }
    const std::string vid = victim->trace.request_id;
    log("PREEMPT", vid + " server=" + std::to_string(server) + " lost_tokens=" + std::to_string(victim->task->generated_count()) +
                       " for=" + id);
    ++counters_.preemptions;
    router_.drop(vid);
    cluster::end_task(servers_[static_cast<std::size_t>(server)], victim->slot, now_);
    victim->task.reset();
    victim->phase = ReqPhase::Waiting;
    victim->preempted = true;
    victim->result.first_token = -1.0;
    ++victim->epoch;
    assign(id, server);
    schedule(vid);
  }

  // -- loads -----------------------------------------------------------------

  void on_load_done(const Event& e) {
    auto it = jobs_.find({e.server, e.slot});
    if (it == jobs_.end() || it->second.id != e.token) return;
    SlotJob job = it->second;
    auto& s = servers_[static_cast<std::size_t>(e.server)];
    log("LOAD_DONE", "server=" + std::to_string(e.server) + " slot=" + std::to_string(e.slot) + " model=" + s.slots[e.slot].model_id +
                         " for=" + job.request_id);
    if (job.real_load) {
      cluster::finish_slot_load(s, e.slot, now_, &store_);
      const auto& m = s.slots[e.slot].model_id;
      const auto size = model(m).size_bytes;
      auto admit = [&](cluster::TierKind k) {
        if (s.has_tier(k) && size <= s.tier(k).spec.capacity_bytes) cluster::admit_model(s, m, size, k, now_, &store_);
      };
      if (job.source == cluster::TierKind::Remote) admit(cluster::TierKind::Ssd);
      admit(cluster::TierKind::Dram);
    }
    if (job.kind == JobKind::Start) {
      jobs_.erase(it);
      start_request(job.request_id, e.server, e.slot);
      return;
    }
    auto mit = migs_.find(job.migration);
    if (mit == migs_.end() || mit->second.over) {
      // The migration ended while the model loaded: keep it as an idle instance.
      jobs_.erase(it);
      s.slots[e.slot].status = cluster::SlotStatus::Free;
      on_slot_free(e.server);
      return;
    }
    it->second.done = true;
    s.slots[e.slot].status = cluster::SlotStatus::Loading;  // held for the hand-off
    auto& mig = mit->second;
    auto& r = reqs_.at(mig.request_id);
    advance(r);
    migration::dest_loaded(mig.session, *r.task, now_);
    mig.record.dest_ready = now_;
    if (mig.session.phase == migration::Phase::Rounds) begin_round(mig);
  }

  // -- migration -------------------------------------------------------------

  void start_migration(const sched::CandidatePlan& plan, const std::string& waiting) {
    auto& vr = reqs_.at(*plan.displaced_task);
    advance(vr);
    const std::uint64_t mid = next_mig_++;
    const int dest = plan.displaced_dest;
    const auto claim = claim_slot(dest, vr.trace.model_id);
    const auto [slot, warm, start, done_at, source] = claim;

    migration::BeginRequest br;
    br.request_id = vr.trace.request_id;
    br.model_id = vr.trace.model_id;
    br.src = vr.server;
    br.dest = dest;
    br.dest_has_idle_instance = warm;
    br.dest_has_free_slot = true;
    br.dest_load_time = done_at - now_;
    br.link_latency = cfg_.latency(vr.server, dest);

    Mig m;
    m.session = migration::begin_migration(br, *vr.task, cfg_.migration, now_, mid);
    m.request_id = vr.trace.request_id;
    m.waiting = waiting;
    m.src = vr.server;
    m.src_slot = vr.slot;
    m.dest = dest;
    m.dest_slot = slot;
    m.record.id = mid;
    m.record.request_id = m.request_id;
    m.record.waiting_request = waiting;
    m.record.src = m.src;
    m.record.dest = dest;
    m.record.began = now_;
    vr.migration = mid;
    auto& w = reqs_.at(waiting);
    w.phase = ReqPhase::AwaitMigration;
    ++counters_.migrations;

    SlotJob job;
    job.kind = JobKind::MigrationDest;
    job.request_id = m.request_id;
    job.migration = mid;
    job.real_load = !warm;
    job.source = source;
    job.load_start = start;
    job.load_end = done_at;
    job.done = warm;
    auto jid = new_job(dest, slot, job);
    log("MIGRATE_BEGIN", m.request_id + " src=" + std::to_string(m.src) + " dest=" + std::to_string(dest) + " dest_slot=" +
                             std::to_string(slot) + " warm=" + (warm ? "1" : "0") + " for=" + waiting);
    auto& stored = migs_.emplace(mid, std::move(m)).first->second;
    if (warm) {
      stored.record.dest_ready = now_;
      begin_round(stored);
    } else {
      Event e;
      e.kind = EventKind::LoadDone;
      e.time = done_at;
      e.server = dest;
      e.slot = slot;
      e.token = jid;
      push(e);
    }
  }

  void begin_round(Mig& m) {
    auto& r = reqs_.at(m.request_id);
    advance(r);
    auto w = migration::start_round(m.session, *r.task, cfg_.engine, now_);
    ++m.round;
    Event e;
    e.kind = EventKind::RoundDone;
    e.time = w.end_time;
    e.migration = m.record.id;
    e.token = m.round;
    push(e);
  }

  void on_round_done(const Event& e) {
    auto it = migs_.find(e.migration);
    if (it == migs_.end()) return;
    auto& m = it->second;
    if (m.over || e.token != m.round) return;
    auto& r = reqs_.at(m.request_id);
    if (e.final_round) {
      handoff(m);
      return;
    }
    advance(r);
    migration::close_round(m.session, *r.task, now_);
    log("ROUND_DONE", m.request_id + " round=" + std::to_string(m.session.rounds_executed) + " gap=" + std::to_string(m.session.last_gap) +
                          " phase=" + std::string(migration::phase_name(m.session.phase)));
    using migration::Phase;
    if (m.session.phase == Phase::CompletedBeforeMigration) return;  // TASK_DONE at this instant settles it
    if (m.session.phase == Phase::Rounds) {
      begin_round(m);
      return;
    }
    if (m.session.stalled) ++counters_.migration_stalls;
    // The source stops generating and ships the last tokens.
    r.stopped = true;
    ++r.epoch;
    m.outcome = migration::finalize(m.session, *r.task, cfg_.engine, now_);
    m.finalized = true;
    ++m.round;
    Event f;
    f.kind = EventKind::RoundDone;
    f.time = m.outcome->handoff_time;
    f.migration = m.record.id;
    f.token = m.round;
    f.final_round = true;
    push(f);
  }

  void close_record(Mig& m) {
    m.over = true;
    m.record.finished = now_;
    m.record.rounds = m.session.rounds_executed;
    m.record.gaps = m.session.gaps;
    m.record.stalled = m.session.stalled;
    m.record.phase = m.session.phase;
    m.record.bytes_transferred = m.session.bytes_transferred();
  }

  void handoff(Mig& m) {
    auto& r = reqs_.at(m.request_id);
    auto& src = servers_[static_cast<std::size_t>(m.src)];
    auto& dst = servers_[static_cast<std::size_t>(m.dest)];
    router::InferenceResponse resp{m.request_id, m.outcome->all_tokens, router::ResponseFlag::Migrated, m.dest};
    router_.apply_response(resp);
    m.record.context_at_handoff = m.outcome->all_tokens.size();
    cluster::unload_slot(src, m.src_slot, now_, &store_);
    jobs_.erase({m.dest, m.dest_slot});
    dst.slots[m.dest_slot].status = cluster::SlotStatus::Free;
    cluster::start_task(dst, m.dest_slot, m.request_id, now_);
    r.task = std::move(*m.outcome->dest_task);
    r.server = m.dest;
    r.slot = m.dest_slot;
    r.last_advance = now_;
    r.stopped = false;
    r.migration = 0;
    r.result.migrated = true;
    ++r.epoch;
    close_record(m);
    log("HANDOFF", m.request_id + " src=" + std::to_string(m.src) + " dest=" + std::to_string(m.dest) + " tokens=" +
                       std::to_string(m.record.context_at_handoff) + " rounds=" + std::to_string(m.record.rounds) +
                       " bytes=" + std::to_string(m.record.bytes_transferred));
    arm_task_events(r, r.task->generated_count() == 0);
    assign(m.waiting, m.src);
  }

  // Session over without a hand-off; the waiting request is planned afresh.
  void release_waiting(Mig& m) {
    auto& w = reqs_.at(m.waiting);
    if (w.phase == ReqPhase::AwaitMigration) {
      w.phase = ReqPhase::Waiting;
      schedule(m.waiting);
    }
  }

  // Returns the destination slot of a session that will not hand off.
  void release_dest(Mig& m, bool unload) {
    auto it = jobs_.find({m.dest, m.dest_slot});
    if (it == jobs_.end() || it->second.migration != m.record.id) return;
    auto& dst = servers_[static_cast<std::size_t>(m.dest)];
    if (!it->second.done) {
      if (unload) {
        cluster::fail_slot_load(dst, m.dest_slot, now_, &store_);
        // A cancelled transfer at the tail of the queue gives its time back.
        if (dst.load_busy_until == it->second.load_end) dst.load_busy_until = std::max(now_, it->second.load_start);
        jobs_.erase(it);
      }
      // Otherwise leave the load running; LOAD_DONE turns it into an idle instance.
      return;
    }
    jobs_.erase(it);
    dst.slots[m.dest_slot].status = cluster::SlotStatus::Free;
    if (unload) cluster::unload_slot(dst, m.dest_slot, now_, &store_);
    if (dst.up) on_slot_free(m.dest);
  }

  // -- completion ------------------------------------------------------------

  void on_task_done(const Event& e) {
    auto& r = reqs_.at(e.request_id);
    if (r.epoch != e.token || r.phase != ReqPhase::Running) return;
    advance(r);
    if (r.task->state() != engine::TaskState::Completed) fail(ErrorKind::State, "TASK_DONE before the last token of " + e.request_id);
    auto& s = servers_[static_cast<std::size_t>(r.server)];
    r.phase = ReqPhase::Done;
    r.result.status = RequestStatus::Completed;
    r.result.completion = now_;
    r.result.server = r.server;
    if (opt_.keep_tokens) r.result.output.assign(r.task->output_tokens().begin(), r.task->output_tokens().end());
    ++counters_.completed;
    cluster::end_task(s, r.slot, now_);
    router::InferenceResponse resp{e.request_id, {r.task->tokens().begin(), r.task->tokens().end()}, router::ResponseFlag::Completed, -1};
    router_.apply_response(resp);
    log("TASK_DONE", e.request_id + " server=" + std::to_string(r.server) + " tokens=" + std::to_string(r.task->generated_count()));

    if (r.migration != 0) {
      auto& m = migs_.at(r.migration);
      migration::complete_on_src(m.session, *r.task, now_);
      close_record(m);
      log("MIGRATE_END", e.request_id + " outcome=COMPLETED_ON_SRC dest=" + std::to_string(m.dest));
      r.migration = 0;
      release_dest(m, false);
      // The freed source GPU goes to the request that was waiting for it.
      assign(m.waiting, m.src);
      retry_later();
    } else {
      on_slot_free(r.server);
    }
    r.task.reset();
  }

  void abort_request(Req& r, const std::string& why) {
    r.phase = ReqPhase::Done;
    r.result.status = RequestStatus::Aborted;
    r.result.completion = now_;
    r.result.server = r.server;
    ++counters_.aborted;
    ++r.epoch;
    router::InferenceResponse resp{r.trace.request_id, {}, router::ResponseFlag::Aborted, -1};
    router_.apply_response(resp);
    log("ABORT", r.trace.request_id + " server=" + std::to_string(r.server) + " reason=" + why);
    r.task.reset();
  }

  // -- failures ----------------------------------------------------------------

  void on_failure(const FailureInjection& f) {
    auto& s = servers_[static_cast<std::size_t>(f.server)];
    log("FAILURE_INJECT", "server=" + std::to_string(f.server) + " scope=" + (f.scope == FailureScope::Server ? "server" : "load"));
    if (!s.up) return;
    std::vector<std::string> replan;

    if (f.scope == FailureScope::Load) {
      std::vector<std::pair<std::size_t, SlotJob>> failing;
      for (auto& [key, job] : jobs_) {
        if (key.first == f.server && job.real_load && !job.done) failing.emplace_back(key.second, job);
      }
      for (auto& [slot, job] : failing) {
        if (job.kind == JobKind::Start) {
          cluster::fail_slot_load(s, slot, now_, &store_);
          jobs_.erase({f.server, slot});
          router_.drop(job.request_id);
          reqs_.at(job.request_id).phase = ReqPhase::Waiting;
          replan.push_back(job.request_id);
        } else {
          auto& m = migs_.at(job.migration);
          abort_migration(m, migration::FailedSide::Dest, replan);
        }
      }
      s.load_busy_until = now_;
      for (const auto& id : replan) schedule(id);
      retry_later();
      return;
    }

    s.up = false;
    // Sessions touching the failed server.
    for (auto& [mid, m] : migs_) {
      if (m.over) continue;
      if (m.src == f.server) {
        abort_migration(m, migration::FailedSide::Src, replan);
      } else if (m.dest == f.server) {
        abort_migration(m, migration::FailedSide::Dest, replan);
      }
    }
    // Tasks and loads on the failed server.
    for (auto& [id, r] : reqs_) {
      if (r.server != f.server) continue;
      if (r.phase == ReqPhase::Running) {
        abort_request(r, "server_failure");
      } else if (r.phase == ReqPhase::Loading) {
        router_.drop(id);
        r.phase = ReqPhase::Waiting;
        replan.push_back(id);
      }
    }
    for (const auto& id : server_queue_[static_cast<std::size_t>(f.server)]) {
      reqs_.at(id).phase = ReqPhase::Waiting;
      replan.push_back(id);
    }
    server_queue_[static_cast<std::size_t>(f.server)].clear();
    // Device and host memory are lost; SSD contents survive a restart.
    for (std::size_t i = 0; i < s.slots.size(); ++i) {
      auto& g = s.slots[i];
      if (g.model_id.empty()) continue;
      auto jit = jobs_.find({f.server, i});
      if (g.status == cluster::SlotStatus::Loading && jit != jobs_.end() && jit->second.real_load && !jit->second.done) {
        cluster::fail_slot_load(s, i, now_, &store_);
      } else {
        g.status = cluster::SlotStatus::Free;
        cluster::unload_slot(s, i, now_, &store_);
      }
      if (jit != jobs_.end()) jobs_.erase(jit);
    }
    if (s.has_tier(cluster::TierKind::Dram)) {
      auto& dram = s.tier(cluster::TierKind::Dram);
      for (const auto& [m, res] : dram.residents) {
        store_.transition(cluster::StatusRecord{f.server, m, cluster::Phase::Unloaded, now_, cluster::TierKind::Dram, -1});
      }
      dram.residents.clear();
    }
    s.load_busy_until = now_;
    for (const auto& id : replan) schedule(id);
    retry_later();
  }

  void abort_migration(Mig& m, migration::FailedSide side, std::vector<std::string>& replan) {
    auto& r = reqs_.at(m.request_id);
    advance(r);
    if (m.session.active()) {
      auto res = migration::handle_failure(m.session, *r.task, side, now_);
      (void)res;
    } else {
      // Failed between the final shipment and the hand-off.
      m.session.phase = migration::Phase::Aborted;
      m.session.history.push_back(migration::Phase::Aborted);
    }
    ++counters_.migration_aborts;
    close_record(m);
    log("MIGRATE_ABORT", m.request_id + " failed=" + (side == migration::FailedSide::Src ? "src" : "dest") +
                             " src=" + std::to_string(m.src) + " dest=" + std::to_string(m.dest));
    r.migration = 0;
    if (side == migration::FailedSide::Src) {
      release_dest(m, true);
      abort_request(r, "source_failure");
    } else {
      release_dest(m, true);
      if (r.task->state() == engine::TaskState::Migrating) r.task->set_state(engine::TaskState::Running);
      if (r.stopped) {
        r.stopped = false;
        r.last_advance = now_;
        ++r.epoch;
        arm_task_events(r, r.task->generated_count() == 0);
      }
    }
    auto& w = reqs_.at(m.waiting);
    if (w.phase == ReqPhase::AwaitMigration) {
      w.phase = ReqPhase::Waiting;
      replan.push_back(m.waiting);
    }
  }

  // -- debug sweep ---------------------------------------------------------------

  void sweep_invariants() {
    std::vector<std::string> bad;
    for (const auto& s : servers_) {
      auto v = cluster::check_invariants(s);
      bad.insert(bad.end(), v.begin(), v.end());
    }
    for (const auto& [id, r] : reqs_) {
      if (r.phase != ReqPhase::Running) continue;
      auto routed = router_.server_of(id);
      if (!routed || *routed != r.server) bad.push_back("request " + id + " running without a matching routing entry");
      const auto& g = servers_[static_cast<std::size_t>(r.server)].slots[r.slot];
      if (g.status != cluster::SlotStatus::Running || g.task_id != id) bad.push_back("request " + id + " not on its slot");
    }
    if (cluster::StatusStore::replay(store_.records()) != cluster::residency_snapshot(servers_)) {
      bad.push_back("status store replay disagrees with cluster residency");
    }
    if (!bad.empty()) fail(ErrorKind::State, "invariant violation at t=" + format_seconds(now_) + ": " + bad.front());
  }

  const ClusterConfig& cfg_;
  Policy policy_;
  SimOptions opt_;
  std::vector<cluster::ServerState> servers_;
  cluster::StatusStore store_;
  router::Router router_;
  std::priority_queue<Event, std::vector<Event>, EventAfter> queue_;
  std::uint64_t seq_ = 0;
  double now_ = 0.0;
  std::vector<std::string> log_;
  std::map<std::string, Req> reqs_;
  std::vector<std::string> order_;
  std::deque<std::string> paused_;
  std::vector<std::deque<std::string>> server_queue_;
  std::map<std::pair<int, std::size_t>, SlotJob> jobs_;
  std::uint64_t next_job_ = 1;
  std::map<std::uint64_t, Mig> migs_;
  std::uint64_t next_mig_ = 1;
  Counters counters_;
};

}  // namespace detail

inline SimResult run_simulation(const std::vector<TraceRecord>& trace, const ClusterConfig& cfg, Policy policy,
                                const SimOptions& opt = {}) {
  detail::Simulator sim(cfg, policy, opt);
  return sim.run(trace);
}

// ---------------------------------------------------------------------------
// Output

inline void write_event_log(std::ostream& os, const std::vector<std::string>& log) {
  for (const auto& line : log) os << line << '\n';
}

inline const char* kMetricsCsvHeader =
    "policy,requests,completed,aborted,cold_starts,warm_starts,migrations,migration_stalls,migration_aborts,preemptions,pauses,"
    "queued,startup_mean,startup_p50,startup_p99,total_mean,total_p50,total_p99";

inline std::string metrics_csv_row(Policy policy, const Metrics& m) {
  const auto& c = m.counters;
  std::ostringstream os;
  os << sched::policy_name(policy) << ',' << m.requests.size() << ',' << c.completed << ',' << c.aborted << ',' << c.cold_starts << ','
     << c.warm_starts << ',' << c.migrations << ',' << c.migration_stalls << ',' << c.migration_aborts << ',' << c.preemptions << ','
     << c.pauses << ',' << c.queued << ',' << format_seconds(m.startup.mean) << ',' << format_seconds(m.startup.p50) << ','
     << format_seconds(m.startup.p99) << ',' << format_seconds(m.total.mean) << ',' << format_seconds(m.total.p50) << ','
     << format_seconds(m.total.p99);
  return os.str();
}

inline void write_requests_csv(std::ostream& os, const Metrics& m) {
  os << "request_id,model_id,status,server,attempts,migrated,arrival,first_token,completion,startup,total\n";
  for (const auto& r : m.requests) {
    const bool ok = r.status == RequestStatus::Completed;
    os << r.request_id << ',' << r.model_id << ',' << (ok ? "completed" : "aborted") << ',' << r.server << ',' << r.attempts << ','
       << (r.migrated ? 1 : 0) << ',' << format_seconds(r.arrival) << ',' << (ok ? format_seconds(r.first_token) : "") << ','
       << (ok ? format_seconds(r.completion) : "") << ',' << (ok ? format_seconds(r.startup()) : "") << ','
       << (ok ? format_seconds(r.total()) : "") << '\n';
  }
}

struct PolicyRow {
  Policy policy = Policy::LiveMigration;
  Metrics metrics;
  double p99_startup_ratio = 1.0;   // vs the first policy
  double mean_startup_ratio = 1.0;
};

struct Comparison {
  std::vector<PolicyRow> rows;
};

inline double ratio(double value, double base) {
  if (base > 0) return value / base;
  return value == 0 ? 1.0 : kInfinity;
}

// One independent run per policy over the same trace, config and seed.
inline Comparison compare_policies(const std::vector<TraceRecord>& trace, const ClusterConfig& cfg, const std::vector<Policy>& policies,
                                   const SimOptions& opt = {}) {
  if (policies.size() < 2) fail(ErrorKind::Usage, "compare needs at least 2 policies");
  Comparison c;
  for (auto p : policies) c.rows.push_back(PolicyRow{p, run_simulation(trace, cfg, p, opt).metrics, 1.0, 1.0});
  const auto& base = c.rows.front().metrics.startup;
  for (auto& row : c.rows) {
    row.p99_startup_ratio = ratio(row.metrics.startup.p99, base.p99);
    row.mean_startup_ratio = ratio(row.metrics.startup.mean, base.mean);
  }
  return c;
}

inline void write_comparison_csv(std::ostream& os, const Comparison& c) {
  os << kMetricsCsvHeader << ",p99_startup_ratio,mean_startup_ratio\n";
  for (const auto& row : c.rows) {
    os << metrics_csv_row(row.policy, row.metrics) << ',' << format_double(row.p99_startup_ratio) << ','
       << format_double(row.mean_startup_ratio) << '\n';
  }
}

inline void write_metrics_table(std::ostream& os, const std::vector<std::pair<Policy, const Metrics*>>& rows,
                                const std::vector<double>& p99_ratios = {}) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-15s %6s %6s %5s %5s %5s %5s %10s %10s %10s %10s%s\n", "policy", "done", "abort", "cold", "warm",
                "migr", "preem", "start_mean", "start_p50", "start_p99", "total_p99", p99_ratios.empty() ? "" : "  p99_ratio");
  os << buf;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& m = *rows[i].second;
    const auto& c = m.counters;
    std::snprintf(buf, sizeof(buf), "%-15s %6zu %6zu %5zu %5zu %5zu %5zu %10.4f %10.4f %10.4f %10.4f", std::string(sched::policy_name(rows[i].first)).c_str(),
                  c.completed, c.aborted, c.cold_starts, c.warm_starts, c.migrations, c.preemptions, m.startup.mean, m.startup.p50,
                  m.startup.p99, m.total.p99);
    os << buf;
    if (i < p99_ratios.size()) {
      std::snprintf(buf, sizeof(buf), "  %9.4f", p99_ratios[i]);
      os << buf;
    }
    os << '\n';
  }
}

}  // namespace sllm::sim
