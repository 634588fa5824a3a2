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

// Live migration of an in-flight inference task by shipping tokens instead of
// the KV cache. The destination loads the model, then recomputes the KV cache
// over several rounds while the source keeps generating; once the gap of
// unsent tokens is small the source stops and the destination takes over.

#include "sllm/common.hpp"
#include "sllm/inference_engine.hpp"

#include <optional>
#include <string>
#include <vector>

namespace sllm::migration {

using engine::InferenceTask;
using engine::Token;

enum class Phase { DestLoading, Rounds, Finalizing, Completed, Aborted, CompletedBeforeMigration };

inline std::string_view phase_name(Phase p) {
  switch (p) {
    case Phase::DestLoading: return "DEST_LOADING";
    case Phase::Rounds: return "ROUNDS";
    case Phase::Finalizing: return "FINALIZING";
    case Phase::Completed: return "COMPLETED";
    case Phase::Aborted: return "ABORTED";
    case Phase::CompletedBeforeMigration: return "COMPLETED_BEFORE_MIGRATION";
  }
  return "?";
}

inline bool is_terminal(Phase p) {
  return p == Phase::Completed || p == Phase::Aborted || p == Phase::CompletedBeforeMigration;
}

struct MigrationConfig {
  std::size_t gap_threshold = 10;  // K
  std::size_t max_rounds = 16;
};

struct BeginRequest {
  std::string request_id;
  std::string model_id;
  int src = 0;
  int dest = 0;
  bool dest_has_idle_instance = false;
  bool dest_has_free_slot = false;
  double dest_load_time = 0.0;  // estimated or simulated time to load the model on dest
  double link_latency = 0.0;    // one-way message delay src <-> dest
};

struct MigrationSession {
  std::uint64_t session_id = 0;
  std::string request_id;
  std::string model_id;
  int src = 0;
  int dest = 0;
  Phase phase = Phase::DestLoading;
  std::size_t rounds_executed = 0;
  std::size_t last_sent_token_count = 0;
  std::size_t gap_threshold = 10;
  std::size_t max_rounds = 16;
  double link_latency = 0.0;

  double began_at = 0.0;
  double dest_ready_at = 0.0;
  double finished_at = 0.0;

  std::size_t round_snapshot = 0;  // src context length read at round start
  std::size_t last_gap = 0;
  std::vector<std::size_t> gaps;
  bool stalled = false;            // max_rounds hit without convergence
  std::uint64_t tokens_sent = 0;
  std::uint64_t dest_kv_tokens = 0;  // KV entries currently recomputed on dest
  std::vector<Phase> history;

  bool active() const { return !is_terminal(phase); }
  std::uint64_t bytes_transferred() const { return tokens_sent * engine::kTokenWireBytes; }
};

struct ResumeRequest {
  std::string request_id;
  std::vector<Token> intermediate_tokens;  // prompt + outputs so far
};

enum class Flag { Migrated, CompletedOnSrc, Aborted };

inline std::string_view flag_name(Flag f) {
  switch (f) {
    case Flag::Migrated: return "MIGRATED";
    case Flag::CompletedOnSrc: return "COMPLETED_ON_SRC";
    case Flag::Aborted: return "ABORTED";
  }
  return "?";
}

struct MigrationOutcome {
  Flag flag = Flag::Aborted;
  std::vector<Token> all_tokens;
  double total_migration_time = 0.0;
  double handoff_time = 0.0;  // when dest owns the task and resumes generating
  std::optional<InferenceTask> dest_task;
};

namespace detail {
inline void enter(MigrationSession& s, Phase p) {
  if (!s.active()) fail(ErrorKind::State, "migration " + std::to_string(s.session_id) + " already finished");
  auto rank = [](Phase x) {
    switch (x) {
      case Phase::DestLoading: return 0;
      case Phase::Rounds: return 1;
      case Phase::Finalizing: return 2;
      default: return 3;
    }
  };
  if (p != Phase::Aborted && rank(p) < rank(s.phase)) {
    fail(ErrorKind::State, "backward migration transition " + std::string(phase_name(s.phase)) + " -> " + std::string(phase_name(p)));
  }
  s.phase = p;
  s.history.push_back(p);
}
}  // namespace detail

// Step 1. The destination starts loading the model unless it already has an
// idle instance, in which case the session goes straight to the rounds.
inline MigrationSession begin_migration(const BeginRequest& req, InferenceTask& task, const MigrationConfig& cfg,
                                        double now, std::uint64_t session_id = 0) {
  if (task.state() != engine::TaskState::Running) {
    fail(ErrorKind::State, "task " + task.request_id() + " is not running on the source");
  }
  if (!req.dest_has_idle_instance && !req.dest_has_free_slot) {
    fail(ErrorKind::State, "destination server " + std::to_string(req.dest) + " has no free GPU and no idle instance");
  }
  if (req.src == req.dest) fail(ErrorKind::InvalidArgument, "source and destination are the same server");
  if (cfg.max_rounds == 0) fail(ErrorKind::InvalidArgument, "max_rounds must be >= 1");

  MigrationSession s;
  s.session_id = session_id;
  s.request_id = req.request_id;
  s.model_id = req.model_id;
  s.src = req.src;
  s.dest = req.dest;
  s.gap_threshold = cfg.gap_threshold;
  s.max_rounds = cfg.max_rounds;
  s.link_latency = req.link_latency;
  s.began_at = now;
  s.history.push_back(Phase::DestLoading);
  if (req.dest_has_idle_instance) {
    s.dest_ready_at = now;
    detail::enter(s, Phase::Rounds);
    task.set_state(engine::TaskState::Migrating);
  } else {
    s.dest_ready_at = now + req.dest_load_time;
  }
  return s;
}

// Step 2-3: the model is up on dest; the source is told to migrate and marks
// the task as migrating. A task that already finished never enters the rounds.
inline void dest_loaded(MigrationSession& s, InferenceTask& task, double now) {
  if (s.phase != Phase::DestLoading) fail(ErrorKind::State, "dest_loaded outside DEST_LOADING");
  s.dest_ready_at = now;
  if (task.state() == engine::TaskState::Completed) {
    detail::enter(s, Phase::CompletedBeforeMigration);
    s.finished_at = now;
    return;
  }
  detail::enter(s, Phase::Rounds);
  task.set_state(engine::TaskState::Migrating);
}

struct RoundWindow {
  double end_time = 0.0;
  std::size_t tokens_sent = 0;
};

// Snapshots the source's context length and ships the unsent tokens; the
// destination's recompute of them defines the round's length.
inline RoundWindow start_round(MigrationSession& s, const InferenceTask& task, const engine::EngineParams& p, double now) {
  if (s.phase != Phase::Rounds) fail(ErrorKind::State, "start_round outside ROUNDS");
  if (task.state() == engine::TaskState::Completed) fail(ErrorKind::State, "start_round on a completed task");
  s.round_snapshot = task.context_length();
  const auto fresh = s.round_snapshot - s.last_sent_token_count;
  s.tokens_sent += fresh;
  return RoundWindow{now + s.link_latency + engine::recompute_duration(fresh, p), fresh};
}

// Called once the source task has been advanced to the end of the round.
// Tokens produced during the recompute are the gap carried into the next round.
inline void close_round(MigrationSession& s, const InferenceTask& task, double now) {
  if (s.phase != Phase::Rounds) fail(ErrorKind::State, "close_round outside ROUNDS");
  s.last_gap = task.context_length() - s.round_snapshot;
  s.gaps.push_back(s.last_gap);
  s.last_sent_token_count = s.round_snapshot;
  s.dest_kv_tokens = s.round_snapshot;
  ++s.rounds_executed;
  if (task.state() == engine::TaskState::Completed) {
    detail::enter(s, Phase::CompletedBeforeMigration);
    s.finished_at = now;
  } else if (s.last_gap <= s.gap_threshold) {
    detail::enter(s, Phase::Finalizing);
  } else if (s.rounds_executed >= s.max_rounds) {
    s.stalled = true;
    detail::enter(s, Phase::Finalizing);
  }
}

struct RoundResult {
  double end_time = 0.0;
  std::size_t gap = 0;
};

// One full round with the source generating throughout. If the task finishes
// inside the window the session ends COMPLETED_BEFORE_MIGRATION at that time.
inline RoundResult run_round(MigrationSession& s, InferenceTask& task, const engine::EngineParams& p, double now) {
  auto w = start_round(s, task, p, now);
  double end = w.end_time;
  const double finish = now + task.time_to_complete(p);
  if (finish <= end) end = finish;
  task.advance(end - now, p);
  close_round(s, task, end);
  return RoundResult{end, s.last_gap};
}

inline ResumeRequest make_resume_request(const InferenceTask& task) {
  return ResumeRequest{task.request_id(), std::vector<Token>(task.tokens().begin(), task.tokens().end())};
}

// Steps 4-5: the source halts, ships the last <= K tokens, and the destination
// recomputes them. The returned dest_task is rebuilt purely from the resume
// request and continues exactly after the last source token.
inline MigrationOutcome finalize(MigrationSession& s, const InferenceTask& task, const engine::EngineParams& p, double now) {
  if (s.phase != Phase::Finalizing) fail(ErrorKind::State, "finalize outside FINALIZING");
  const auto remaining = task.context_length() - s.last_sent_token_count;
  s.tokens_sent += remaining;
  const double handoff = now + s.link_latency + engine::recompute_duration(remaining, p);

  auto resume = make_resume_request(task);
  MigrationOutcome out;
  out.flag = Flag::Migrated;
  out.all_tokens = resume.intermediate_tokens;
  out.handoff_time = handoff;
  out.total_migration_time = handoff - s.began_at;
  auto dest = InferenceTask::resume_from(resume.request_id, task.model_id(), task.seed(), std::move(resume.intermediate_tokens),
                                         task.input_count(), task.target_output_count(), task.duration());
  dest.set_start_time(task.start_time());
  dest.set_state(engine::TaskState::Running);
  out.dest_task = std::move(dest);

  s.dest_kv_tokens = task.context_length();
  s.last_sent_token_count = task.context_length();
  s.finished_at = handoff;
  detail::enter(s, Phase::Completed);
  return out;
}

// The task finished on the source mid-migration: the destination is told to
// stop resuming and the response carries no "migrated" flag.
inline MigrationOutcome complete_on_src(MigrationSession& s, const InferenceTask& task, double now) {
  if (task.state() != engine::TaskState::Completed) fail(ErrorKind::State, "task has not completed on the source");
  if (s.active()) {
    detail::enter(s, Phase::CompletedBeforeMigration);
    s.finished_at = now;
  } else if (s.phase != Phase::CompletedBeforeMigration) {
    fail(ErrorKind::State, "migration already finished as " + std::string(phase_name(s.phase)));
  }
  s.dest_kv_tokens = 0;
  MigrationOutcome out;
  out.flag = Flag::CompletedOnSrc;
  out.all_tokens.assign(task.tokens().begin(), task.tokens().end());
  out.total_migration_time = now - s.began_at;
  out.handoff_time = now;
  return out;
}

enum class FailedSide { Src, Dest };

struct FailureResolution {
  Phase phase_at_failure = Phase::DestLoading;
  bool cancel_dest_load = false;
  bool unload_dest_model = false;
  bool clear_dest_kv = false;
  bool src_continues = false;  // task keeps running on src, uninterrupted
  bool task_lost = false;      // src died with the task
};

// Failure paths while a session is active:
//  src fails while dest loads      -> abort, unload the model from dest
//  src fails during the rounds     -> dest clears resumed KV and unloads
//  dest fails while loading        -> migration cancelled, src carries on
//  dest fails while resuming       -> src notifies scheduler and carries on
inline FailureResolution handle_failure(MigrationSession& s, InferenceTask& task, FailedSide failed, double now) {
  if (!s.active()) fail(ErrorKind::State, "handle_failure on a finished migration");
  FailureResolution r;
  r.phase_at_failure = s.phase;
  const bool loading = s.phase == Phase::DestLoading;
  if (failed == FailedSide::Src) {
    r.task_lost = true;
    r.unload_dest_model = true;
    r.cancel_dest_load = loading;
    r.clear_dest_kv = !loading;
  } else {
    r.cancel_dest_load = loading;
    r.src_continues = true;
    if (task.state() == engine::TaskState::Migrating) task.set_state(engine::TaskState::Running);
  }
  s.dest_kv_tokens = 0;
  s.finished_at = now;
  detail::enter(s, Phase::Aborted);
  return r;
}

}  // namespace sllm::migration
