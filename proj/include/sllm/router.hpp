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

// Central request router: one routing entry per in-flight request, token
// forwarding on migration, GPU-release notifications for the scheduler, and
// per-request (d, t) measurements.

#include "sllm/common.hpp"
#include "sllm/inference_engine.hpp"
#include "sllm/scheduler.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sllm::router {

using engine::Token;

enum class ResponseFlag { Migrated, Completed, Aborted };

inline std::string_view response_flag_name(ResponseFlag f) {
  switch (f) {
    case ResponseFlag::Migrated: return "MIGRATED";
    case ResponseFlag::Completed: return "COMPLETED";
    case ResponseFlag::Aborted: return "ABORTED";
  }
  return "?";
}

struct InferenceResponse {
  std::string request_id;
  std::vector<Token> tokens;
  ResponseFlag flag = ResponseFlag::Completed;
  int dest = -1;  // MIGRATED only
};

struct Notification {
  enum class Kind { ForwardTokens, GpuReleased };
  Kind kind = Kind::GpuReleased;
  int server = -1;
  std::string request_id;
  std::size_t token_count = 0;
};

struct Measurement {
  double duration = 0.0;        // d
  double per_token_time = 0.0;  // t
};

struct RouteEntry {
  int server = -1;
  std::string model_id;
};

class Router {
 public:
  // Requires a concrete assignment; a paused request stays queued.
  int route_request(const std::string& request_id, const std::string& model_id, const sched::Selection& sel) {
    if (sel.paused() || !sel.plan) {
      fail(ErrorKind::State, "request " + request_id + " is queued: no server assigned yet");
    }
    return route_to(request_id, model_id, sel.plan->server_id);
  }

  int route_to(const std::string& request_id, const std::string& model_id, int server) {
    if (table_.count(request_id)) fail(ErrorKind::State, "request " + request_id + " already routed");
    table_[request_id] = RouteEntry{server, model_id};
    return server;
  }

  std::vector<Notification> apply_response(const InferenceResponse& r) {
    auto it = table_.find(r.request_id);
    if (it == table_.end()) fail(ErrorKind::NotFound, "unknown request " + r.request_id);
    std::vector<Notification> out;
    switch (r.flag) {
      case ResponseFlag::Migrated:
        if (r.dest < 0) fail(ErrorKind::InvalidArgument, "MIGRATED response without destination");
        it->second.server = r.dest;
        forwarded_[r.request_id].push_back(r.dest);
        out.push_back(Notification{Notification::Kind::ForwardTokens, r.dest, r.request_id, r.tokens.size()});
        break;
      case ResponseFlag::Completed:
      case ResponseFlag::Aborted:
        out.push_back(Notification{Notification::Kind::GpuReleased, it->second.server, r.request_id, r.tokens.size()});
        table_.erase(it);
        measurements_.erase(r.request_id);
        ++releases_;
        break;
    }
    return out;
  }

  // A preempted request leaves the table without a release; it is re-routed
  // when it restarts.
  void drop(const std::string& request_id) {
    table_.erase(request_id);
    measurements_.erase(request_id);
  }

  void update_measurement(const std::string& request_id, double d, double t) { measurements_[request_id] = Measurement{d, t}; }

  Measurement measurement(const std::string& request_id) const {
    auto it = measurements_.find(request_id);
    if (it == measurements_.end()) fail(ErrorKind::NotFound, "no measurement for request " + request_id);
    return it->second;
  }

  std::optional<int> server_of(const std::string& request_id) const {
    auto it = table_.find(request_id);
    if (it == table_.end()) return std::nullopt;
    return it->second.server;
  }

  // Servers currently serving `model`, one entry per routed request.
  std::vector<int> instances(const std::string& model) const {
    std::vector<int> out;
    for (const auto& [id, e] : table_) {
      if (e.model_id == model) out.push_back(e.server);
    }
    return out;
  }

  const std::map<std::string, RouteEntry>& table() const { return table_; }
  std::size_t release_count() const { return releases_; }
  const std::vector<int>& forwarded_to(const std::string& request_id) const {
    static const std::vector<int> none;
    auto it = forwarded_.find(request_id);
    return it == forwarded_.end() ? none : it->second;
  }

 private:
  std::map<std::string, RouteEntry> table_;
  std::map<std::string, Measurement> measurements_;
  std::map<std::string, std::vector<int>> forwarded_;
  std::size_t releases_ = 0;
};

}  // namespace sllm::router
