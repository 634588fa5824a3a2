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

// Deterministic stand-in for LLM decoding. Tokens are a stable hash of
// (seed, model, context), produced at a constant per-token time; the KV cache
// is only sized, never materialised, and can be "recomputed" at a fixed rate.

#include "sllm/common.hpp"

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sllm::engine {

using Token = std::uint32_t;

inline constexpr Token kVocabSize = 32000;
inline constexpr std::uint64_t kTokenWireBytes = 4;

struct EngineParams {
  double per_token_time = 0.1;    // t, seconds per generated token
  double recompute_rate = 1000.0;  // r, tokens per second of KV-cache recompute
  std::uint64_t kv_bytes_per_token = 1 * MiB;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(per_token_time > 0)) fail(ErrorKind::InvalidArgument, "per_token_time must be > 0");
    if (!(recompute_rate > 0)) fail(ErrorKind::InvalidArgument, "recompute_rate must be > 0");
  }
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// FNV-1a over seed, model id and the context tokens. Keeping the running state
// lets a task extend its context in O(1) per token while next() stays a pure
// function of the full context.
class TokenHasher {
 public:
  TokenHasher() = default;
  TokenHasher(std::uint64_t seed, std::string_view model_id) {
    for (int i = 0; i < 8; ++i) mix(static_cast<std::uint8_t>(seed >> (8 * i)));
    for (char c : model_id) mix(static_cast<std::uint8_t>(c));
    mix(0xFF);
  }

  void absorb(Token t) {
    for (int i = 0; i < 4; ++i) mix(static_cast<std::uint8_t>(t >> (8 * i)));
  }

  Token next() const { return static_cast<Token>(splitmix64(state_) % kVocabSize); }

 private:
  void mix(std::uint8_t b) {
    state_ ^= b;
    state_ *= 0x100000001B3ULL;
  }
  std::uint64_t state_ = 0xCBF29CE484222325ULL;
};

inline Token next_token(std::uint64_t seed, std::string_view model_id, std::span<const Token> context) {
  TokenHasher h(seed, model_id);
  for (auto t : context) h.absorb(t);
  return h.next();
}

// Prompt tokens for synthetic requests, derived from the request id.
inline std::vector<Token> synth_input_tokens(std::uint64_t seed, std::string_view request_id, std::size_t count) {
  std::uint64_t x = seed;
  for (char c : request_id) x = splitmix64(x ^ static_cast<std::uint8_t>(c));
  std::vector<Token> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    x = splitmix64(x);
    out.push_back(static_cast<Token>(x % kVocabSize));
  }
  return out;
}

enum class TaskState { Queued, Running, Migrating, Completed };

inline std::string_view task_state_name(TaskState s) {
  switch (s) {
    case TaskState::Queued: return "QUEUED";
    case TaskState::Running: return "RUNNING";
    case TaskState::Migrating: return "MIGRATING";
    case TaskState::Completed: return "COMPLETED";
  }
  return "?";
}

class InferenceTask {
 public:
  InferenceTask() = default;
  InferenceTask(std::string request_id, std::string model_id, std::uint64_t seed, std::vector<Token> input,
                std::size_t target_output_count)
      : request_id_(std::move(request_id)),
        model_id_(std::move(model_id)),
        seed_(seed),
        input_count_(input.size()),
        target_output_count_(target_output_count),
        tokens_(std::move(input)),
        hasher_(seed_, model_id_) {
    for (auto t : tokens_) hasher_.absorb(t);
    if (target_output_count_ == 0) state_ = TaskState::Completed;
  }

  // Rebuilds a task from the intermediate tokens (prompt + outputs so far),
  // the way a destination server does when it resumes a migrated request.
  static InferenceTask resume_from(std::string request_id, std::string model_id, std::uint64_t seed,
                                   std::vector<Token> all_tokens, std::size_t input_count,
                                   std::size_t target_output_count, double duration_so_far) {
    InferenceTask t(std::move(request_id), std::move(model_id), seed, std::move(all_tokens), target_output_count);
    t.input_count_ = input_count;
    t.duration_ = duration_so_far;
    t.state_ = t.generated_count() >= t.target_output_count_ ? TaskState::Completed : TaskState::Queued;
    return t;
  }

  const std::string& request_id() const { return request_id_; }
  const std::string& model_id() const { return model_id_; }
  std::uint64_t seed() const { return seed_; }
  TaskState state() const { return state_; }
  void set_state(TaskState s) { state_ = s; }

  std::size_t input_count() const { return input_count_; }
  std::size_t target_output_count() const { return target_output_count_; }
  std::size_t generated_count() const { return tokens_.size() - input_count_; }
  std::size_t remaining_count() const { return target_output_count_ - generated_count(); }
  std::size_t context_length() const { return tokens_.size(); }

  std::span<const Token> tokens() const { return tokens_; }
  std::span<const Token> input_tokens() const { return std::span<const Token>(tokens_).first(input_count_); }
  std::span<const Token> output_tokens() const { return std::span<const Token>(tokens_).subspan(input_count_); }

  double start_time() const { return start_time_; }
  void set_start_time(double t) { start_time_ = t; }
  double duration() const { return duration_; }
  double remainder() const { return remainder_; }

  std::uint64_t kv_cache_bytes(const EngineParams& p) const { return p.kv_bytes_per_token * tokens_.size(); }

  // Tokens a further `elapsed` seconds would add, without mutating the task.
  std::size_t projected_tokens(double elapsed, const EngineParams& p) const {
    if (state_ == TaskState::Completed || elapsed <= 0) return 0;
    auto n = floor_ratio(remainder_ + elapsed, p.per_token_time);
    return static_cast<std::size_t>(std::min<std::uint64_t>(n, remaining_count()));
  }

  // Seconds until the last token, generating from now without interruption.
  double time_to_complete(const EngineParams& p) const {
    if (state_ == TaskState::Completed) return 0.0;
    return std::max(0.0, static_cast<double>(remaining_count()) * p.per_token_time - remainder_);
  }

  // Appends floor((remainder + elapsed) / t) tokens, capped at the target, and
  // carries the fractional remainder so slicing elapsed time does not change
  // the outcome. Returns the number of tokens appended.
  std::size_t advance(double elapsed, const EngineParams& p) {
    if (state_ != TaskState::Running && state_ != TaskState::Migrating) {
      fail(ErrorKind::State, "advance on task " + request_id_ + " in state " + std::string(task_state_name(state_)));
    }
    if (elapsed < 0) fail(ErrorKind::InvalidArgument, "negative elapsed time");
    if (elapsed == 0) return 0;
    duration_ += elapsed;
    const double acc = remainder_ + elapsed;
    const auto n = floor_ratio(acc, p.per_token_time);
    const auto take = static_cast<std::size_t>(std::min<std::uint64_t>(n, remaining_count()));
    for (std::size_t i = 0; i < take; ++i) {
      auto t = hasher_.next();
      tokens_.push_back(t);
      hasher_.absorb(t);
    }
    if (generated_count() >= target_output_count_) {
      state_ = TaskState::Completed;
      remainder_ = 0.0;
    } else {
      remainder_ = std::max(0.0, acc - static_cast<double>(n) * p.per_token_time);
    }
    return take;
  }

 private:
  std::string request_id_;
  std::string model_id_;
  std::uint64_t seed_ = 0;
  std::size_t input_count_ = 0;
  std::size_t target_output_count_ = 0;
  std::vector<Token> tokens_;
  TokenHasher hasher_;
  TaskState state_ = TaskState::Queued;
  double start_time_ = 0.0;
  double duration_ = 0.0;   // d: time spent generating so far
  double remainder_ = 0.0;  // partial progress toward the next token
};

inline std::size_t advance(InferenceTask& task, double elapsed, const EngineParams& p) { return task.advance(elapsed, p); }

inline double recompute_duration(std::uint64_t token_count, const EngineParams& p) {
  return static_cast<double>(token_count) / p.recompute_rate;
}

}  // namespace sllm::engine
