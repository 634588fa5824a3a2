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

// Servers with a device/DRAM/SSD/remote storage hierarchy, LRU cache
// residency, pipelined-path bandwidth, and the append-only status store the
// scheduler replays after a crash.

#include "sllm/common.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <set>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <tuple>
#include <vector>

namespace sllm::cluster {

// Ordered by proximity to compute.
enum class TierKind : std::uint8_t { Device = 0, Dram = 1, Ssd = 2, Remote = 3 };

inline constexpr std::array<TierKind, 4> kAllTiers = {TierKind::Device, TierKind::Dram, TierKind::Ssd,
                                                       TierKind::Remote};

inline std::string_view tier_name(TierKind k) {
  switch (k) {
    case TierKind::Device: return "device";
    case TierKind::Dram: return "dram";
    case TierKind::Ssd: return "ssd";
    case TierKind::Remote: return "remote";
  }
  return "?";
}

inline TierKind parse_tier(std::string_view s) {
  std::string lower;
  for (char c : s) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  for (auto k : kAllTiers) {
    if (tier_name(k) == lower) return k;
  }
  fail(ErrorKind::Format, "unknown tier kind '" + std::string(s) + "'");
}

struct TierSpec {
  TierKind kind = TierKind::Dram;
  std::uint64_t capacity_bytes = 0;  // ignored for Remote (unbounded)
  double read_bandwidth = 1.0;       // bytes/s for loads sourced from (or, for Device, into) this tier
};

struct Resident {
  std::uint64_t size = 0;
  double last_use = 0.0;
};

struct TierState {
  TierSpec spec;
  std::map<std::string, Resident> residents;  // unused for Device and Remote

  std::uint64_t used() const {
    std::uint64_t u = 0;
    for (const auto& [id, r] : residents) u += r.size;
    return u;
  }
  std::uint64_t free_bytes() const {
    auto u = used();
    return spec.capacity_bytes > u ? spec.capacity_bytes - u : 0;
  }
};

enum class SlotStatus { Free, Loading, Running };

// A free slot that still holds a model is an idle (warm) instance of it.
struct GpuSlot {
  SlotStatus status = SlotStatus::Free;
  std::string model_id;
  std::uint64_t model_bytes = 0;
  std::string task_id;
  double last_use = 0.0;

  bool empty() const { return status == SlotStatus::Free && model_id.empty(); }
  bool idle_instance() const { return status == SlotStatus::Free && !model_id.empty(); }
  bool pinned() const { return status != SlotStatus::Free; }
};

struct ServerState {
  int server_id = 0;
  bool up = true;
  std::vector<GpuSlot> slots;
  std::array<std::optional<TierState>, 4> tiers;
  double load_busy_until = 0.0;  // end of this server's loading backlog

  bool has_tier(TierKind k) const { return tiers[static_cast<std::size_t>(k)].has_value(); }
  TierState& tier(TierKind k) {
    auto& t = tiers[static_cast<std::size_t>(k)];
    if (!t) fail(ErrorKind::InvalidArgument, "server " + std::to_string(server_id) + " has no " + std::string(tier_name(k)) + " tier");
    return *t;
  }
  const TierState& tier(TierKind k) const { return const_cast<ServerState*>(this)->tier(k); }

  // Device memory is split evenly across GPU slots.
  std::uint64_t slot_capacity() const {
    if (!has_tier(TierKind::Device) || slots.empty()) return 0;
    return tier(TierKind::Device).spec.capacity_bytes / slots.size();
  }

  // q: seconds until a newly queued load could start.
  double queue_delay(double now) const { return std::max(0.0, load_busy_until - now); }

  std::size_t free_slot_count() const {
    return static_cast<std::size_t>(std::count_if(slots.begin(), slots.end(), [](const GpuSlot& s) { return !s.pinned(); }));
  }
};

inline ServerState make_server(int id, std::size_t gpus, const std::vector<TierSpec>& tiers) {
  ServerState s;
  s.server_id = id;
  s.slots.resize(gpus);
  for (const auto& t : tiers) {
    if (t.read_bandwidth <= 0) fail(ErrorKind::InvalidArgument, "tier bandwidth must be > 0");
    auto& slot = s.tiers[static_cast<std::size_t>(t.kind)];
    if (slot) fail(ErrorKind::InvalidArgument, "duplicate " + std::string(tier_name(t.kind)) + " tier on server " + std::to_string(id));
    slot = TierState{t, {}};
  }
  return s;
}

// Server shaped after the 8-GPU machine used for the loading experiments: the
// 512 GB/s host-to-GPU aggregate is divided evenly across GPUs.
inline std::vector<TierSpec> default_tiers(std::size_t gpus = 8) {
  const double per_gpu_link = 512e9 / static_cast<double>(std::max<std::size_t>(gpus, 1));
  return {
      TierSpec{TierKind::Device, static_cast<std::uint64_t>(gpus) * 24 * GiB, per_gpu_link},
      TierSpec{TierKind::Dram, 4000000000000ULL, 512e9},
      TierSpec{TierKind::Ssd, 64000000000000ULL, 60e9},
      TierSpec{TierKind::Remote, 0, 5e9},
  };
}

// ---------------------------------------------------------------------------
// Status store

enum class Phase { Loading, Loaded, Unloaded, Failed };

inline std::string_view phase_name(Phase p) {
  switch (p) {
    case Phase::Loading: return "LOADING";
    case Phase::Loaded: return "LOADED";
    case Phase::Unloaded: return "UNLOADED";
    case Phase::Failed: return "FAILED";
  }
  return "?";
}

// Residency keys include the tier, and the GPU slot for device residency,
// so replaying the store reproduces per-tier residency exactly.
struct StatusRecord {
  int server_id = 0;
  std::string model_id;
  Phase phase = Phase::Loading;
  double timestamp = 0.0;
  TierKind tier = TierKind::Device;
  int slot = -1;
};

inline bool legal_transition(std::optional<Phase> from, Phase to) {
  switch (to) {
    case Phase::Loading: return !from || *from == Phase::Unloaded || *from == Phase::Failed;
    case Phase::Loaded: return from && *from == Phase::Loading;
    case Phase::Failed: return from && *from == Phase::Loading;
    case Phase::Unloaded: return from && *from == Phase::Loaded;
  }
  return false;
}

struct ResidencySnapshot {
  // server -> tier -> models (Device models are keyed by slot below)
  std::map<int, std::map<TierKind, std::set<std::string>>> host;
  std::map<int, std::map<int, std::string>> device;

  bool operator==(const ResidencySnapshot&) const = default;
};

class StatusStore {
 public:
  using Key = std::tuple<int, std::string, TierKind, int>;

  void transition(const StatusRecord& r) {
    std::unique_lock lk(mu_);
    Key key{r.server_id, r.model_id, r.tier, r.slot};
    std::optional<Phase> from;
    if (auto it = latest_.find(key); it != latest_.end()) from = it->second;
    if (!legal_transition(from, r.phase)) {
      fail(ErrorKind::State, "illegal status transition " + std::string(from ? phase_name(*from) : "NONE") + " -> " +
                                 std::string(phase_name(r.phase)) + " for model " + r.model_id + " on server " +
                                 std::to_string(r.server_id));
    }
    latest_[key] = r.phase;
    log_.push_back(r);
  }

  std::optional<Phase> latest(int server, const std::string& model, TierKind tier, int slot = -1) const {
    std::shared_lock lk(mu_);
    auto it = latest_.find(Key{server, model, tier, slot});
    if (it == latest_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<StatusRecord> records() const {
    std::shared_lock lk(mu_);
    return log_;
  }

  std::size_t size() const {
    std::shared_lock lk(mu_);
    return log_.size();
  }

  // Replays the append-only log from scratch (the scheduler's crash recovery
  // path): anything LOADING or LOADED is resident.
  static ResidencySnapshot replay(const std::vector<StatusRecord>& log) {
    std::map<Key, Phase> state;
    for (const auto& r : log) state[Key{r.server_id, r.model_id, r.tier, r.slot}] = r.phase;
    ResidencySnapshot snap;
    for (const auto& [key, phase] : state) {
      if (phase != Phase::Loading && phase != Phase::Loaded) continue;
      const auto& [server, model, tier, slot] = key;
      if (tier == TierKind::Device) {
        snap.device[server][slot] = model;
      } else {
        snap.host[server][tier].insert(model);
      }
    }
    return snap;
  }

 private:
  mutable std::shared_mutex mu_;
  std::vector<StatusRecord> log_;
  std::map<Key, Phase> latest_;
};

inline void kv_transition(StatusStore& store, const StatusRecord& record) { store.transition(record); }

inline ResidencySnapshot residency_snapshot(const std::vector<ServerState>& servers) {
  ResidencySnapshot snap;
  for (const auto& s : servers) {
    for (std::size_t i = 0; i < s.slots.size(); ++i) {
      if (!s.slots[i].model_id.empty()) snap.device[s.server_id][static_cast<int>(i)] = s.slots[i].model_id;
    }
    for (auto k : {TierKind::Dram, TierKind::Ssd}) {
      if (!s.has_tier(k)) continue;
      for (const auto& [id, r] : s.tier(k).residents) snap.host[s.server_id][k].insert(id);
    }
  }
  return snap;
}

namespace detail {
inline void log_status(StatusStore* store, const ServerState& s, const std::string& model, Phase phase, double now,
                       TierKind tier, int slot = -1) {
  if (store) store->transition(StatusRecord{s.server_id, model, phase, now, tier, slot});
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Residency operations

// Evicts least-recently-used unpinned models from `tier` until `bytes_needed`
// fit. For Device, "fit" means an empty GPU slot large enough exists; only
// idle instances are eligible, never a slot that is loading or running.
inline std::vector<std::string> evict_for(ServerState& s, TierKind tier, std::uint64_t bytes_needed, double now,
                                          StatusStore* log = nullptr) {
  std::vector<std::string> evicted;
  if (tier == TierKind::Remote) return evicted;
  if (tier == TierKind::Device) {
    if (bytes_needed > s.slot_capacity()) {
      fail(ErrorKind::Capacity, "need " + std::to_string(bytes_needed) + " B but a GPU slot holds " + std::to_string(s.slot_capacity()));
    }
    for (;;) {
      if (std::any_of(s.slots.begin(), s.slots.end(), [](const GpuSlot& g) { return g.empty(); })) return evicted;
      int victim = -1;
      for (std::size_t i = 0; i < s.slots.size(); ++i) {
        if (!s.slots[i].idle_instance()) continue;
        if (victim < 0 || s.slots[i].last_use < s.slots[static_cast<std::size_t>(victim)].last_use) victim = static_cast<int>(i);
      }
      if (victim < 0) {
        fail(ErrorKind::Capacity, "cannot free a GPU slot on server " + std::to_string(s.server_id) + ": all residents pinned");
      }
      auto& slot = s.slots[static_cast<std::size_t>(victim)];
      detail::log_status(log, s, slot.model_id, Phase::Unloaded, now, TierKind::Device, victim);
      evicted.push_back(slot.model_id);
      slot = GpuSlot{};
    }
  }
  auto& t = s.tier(tier);
  if (bytes_needed > t.spec.capacity_bytes) {
    fail(ErrorKind::Capacity, "need " + std::to_string(bytes_needed) + " B in " + std::string(tier_name(tier)) +
                                  " with capacity " + std::to_string(t.spec.capacity_bytes));
  }
  while (t.free_bytes() < bytes_needed) {
    auto victim = t.residents.end();
    for (auto it = t.residents.begin(); it != t.residents.end(); ++it) {
      if (victim == t.residents.end() || it->second.last_use < victim->second.last_use) victim = it;
    }
    if (victim == t.residents.end()) fail(ErrorKind::Capacity, "cannot satisfy eviction request");
    detail::log_status(log, s, victim->first, Phase::Unloaded, now, tier);
    evicted.push_back(victim->first);
    t.residents.erase(victim);
  }
  return evicted;
}

// Makes `model` resident in `tier`, evicting LRU residents first if needed.
// For Device the model lands in a GPU slot as an idle instance.
inline std::vector<std::string> admit_model(ServerState& s, const std::string& model, std::uint64_t size, TierKind tier,
                                            double now, StatusStore* log = nullptr) {
  if (tier == TierKind::Remote) return {};
  if (tier == TierKind::Device) {
    if (size > s.slot_capacity()) {
      fail(ErrorKind::Capacity, "model " + model + " (" + std::to_string(size) + " B) exceeds GPU slot capacity");
    }
    for (auto& g : s.slots) {
      if (g.idle_instance() && g.model_id == model) {
        g.last_use = now;
        return {};
      }
    }
    auto evicted = evict_for(s, TierKind::Device, size, now, log);
    for (std::size_t i = 0; i < s.slots.size(); ++i) {
      auto& g = s.slots[i];
      if (!g.empty()) continue;
      g.model_id = model;
      g.model_bytes = size;
      g.last_use = now;
      detail::log_status(log, s, model, Phase::Loading, now, TierKind::Device, static_cast<int>(i));
      detail::log_status(log, s, model, Phase::Loaded, now, TierKind::Device, static_cast<int>(i));
      break;
    }
    return evicted;
  }
  auto& t = s.tier(tier);
  if (auto it = t.residents.find(model); it != t.residents.end()) {
    it->second.last_use = now;
    return {};
  }
  if (size > t.spec.capacity_bytes) {
    fail(ErrorKind::Capacity, "model " + model + " (" + std::to_string(size) + " B) larger than " +
                                  std::string(tier_name(tier)) + " capacity " + std::to_string(t.spec.capacity_bytes));
  }
  auto evicted = evict_for(s, tier, size, now, log);
  t.residents[model] = Resident{size, now};
  detail::log_status(log, s, model, Phase::Loading, now, tier);
  detail::log_status(log, s, model, Phase::Loaded, now, tier);
  return evicted;
}

inline bool resident_in(const ServerState& s, const std::string& model, TierKind tier) {
  if (tier == TierKind::Remote) return false;
  if (tier == TierKind::Device) {
    return std::any_of(s.slots.begin(), s.slots.end(), [&](const GpuSlot& g) { return g.model_id == model; });
  }
  return s.has_tier(tier) && s.tier(tier).residents.count(model) != 0;
}

// Nearest tier holding the model; nullopt means a remote fetch is required.
inline std::optional<TierKind> best_tier(const ServerState& s, const std::string& model) {
  for (auto k : {TierKind::Device, TierKind::Dram, TierKind::Ssd}) {
    if (resident_in(s, model, k)) return k;
  }
  return std::nullopt;
}

// Where a load onto a free GPU slot would come from: an idle instance needs no
// transfer; a copy pinned by another running task does not count.
inline TierKind load_source(const ServerState& s, const std::string& model) {
  for (const auto& g : s.slots) {
    if (g.idle_instance() && g.model_id == model) return TierKind::Device;
  }
  for (auto k : {TierKind::Dram, TierKind::Ssd}) {
    if (resident_in(s, model, k)) return k;
  }
  return TierKind::Remote;
}

// Bottleneck rule: pipelined chunk loading overlaps hops, so steady-state
// bandwidth is the minimum along source -> ... -> Device.
inline double effective_bandwidth(const ServerState& s, TierKind source) {
  if (source == TierKind::Device) return kInfinity;
  if (!s.has_tier(source)) {
    fail(ErrorKind::InvalidArgument, "server " + std::to_string(s.server_id) + " has no " + std::string(tier_name(source)) + " tier");
  }
  double bw = kInfinity;
  for (auto k : kAllTiers) {
    if (static_cast<int>(k) > static_cast<int>(source)) break;
    if (s.has_tier(k)) bw = std::min(bw, s.tier(k).spec.read_bandwidth);
  }
  return bw;
}

// ---------------------------------------------------------------------------
// GPU slot lifecycle (device residency is tracked per slot)

inline void begin_slot_load(ServerState& s, std::size_t slot, const std::string& model, std::uint64_t size, double now,
                            StatusStore* log = nullptr) {
  auto& g = s.slots.at(slot);
  if (g.pinned()) fail(ErrorKind::State, "slot " + std::to_string(slot) + " on server " + std::to_string(s.server_id) + " is busy");
  if (size > s.slot_capacity()) fail(ErrorKind::Capacity, "model " + model + " exceeds GPU slot capacity");
  if (!g.model_id.empty()) detail::log_status(log, s, g.model_id, Phase::Unloaded, now, TierKind::Device, static_cast<int>(slot));
  g = GpuSlot{SlotStatus::Loading, model, size, {}, now};
  detail::log_status(log, s, model, Phase::Loading, now, TierKind::Device, static_cast<int>(slot));
}

inline void finish_slot_load(ServerState& s, std::size_t slot, double now, StatusStore* log = nullptr) {
  auto& g = s.slots.at(slot);
  if (g.status != SlotStatus::Loading) fail(ErrorKind::State, "slot is not loading");
  g.status = SlotStatus::Free;
  g.last_use = now;
  detail::log_status(log, s, g.model_id, Phase::Loaded, now, TierKind::Device, static_cast<int>(slot));
}

inline void fail_slot_load(ServerState& s, std::size_t slot, double now, StatusStore* log = nullptr) {
  auto& g = s.slots.at(slot);
  if (g.status != SlotStatus::Loading) fail(ErrorKind::State, "slot is not loading");
  detail::log_status(log, s, g.model_id, Phase::Failed, now, TierKind::Device, static_cast<int>(slot));
  g = GpuSlot{};
}

inline void start_task(ServerState& s, std::size_t slot, const std::string& task_id, double now) {
  auto& g = s.slots.at(slot);
  if (g.status != SlotStatus::Free || g.model_id.empty()) fail(ErrorKind::State, "slot has no idle instance to run on");
  g.status = SlotStatus::Running;
  g.task_id = task_id;
  g.last_use = now;
}

// Task finished or left: the model stays as an idle instance.
inline void end_task(ServerState& s, std::size_t slot, double now) {
  auto& g = s.slots.at(slot);
  g.status = SlotStatus::Free;
  g.task_id.clear();
  g.last_use = now;
}

inline void unload_slot(ServerState& s, std::size_t slot, double now, StatusStore* log = nullptr) {
  auto& g = s.slots.at(slot);
  if (g.model_id.empty()) return;
  if (g.status == SlotStatus::Loading) {
    fail_slot_load(s, slot, now, log);
    return;
  }
  detail::log_status(log, s, g.model_id, Phase::Unloaded, now, TierKind::Device, static_cast<int>(slot));
  g = GpuSlot{};
}

// Returns human-readable violations of the capacity and pin invariants.
inline std::vector<std::string> check_invariants(const ServerState& s) {
  std::vector<std::string> bad;
  for (auto k : {TierKind::Dram, TierKind::Ssd}) {
    if (!s.has_tier(k)) continue;
    const auto& t = s.tier(k);
    if (t.used() > t.spec.capacity_bytes) {
      bad.push_back("server " + std::to_string(s.server_id) + " " + std::string(tier_name(k)) + " over capacity");
    }
  }
  std::uint64_t device_used = 0;
  for (std::size_t i = 0; i < s.slots.size(); ++i) {
    const auto& g = s.slots[i];
    device_used += g.model_bytes;
    if (g.model_bytes > s.slot_capacity()) bad.push_back("server " + std::to_string(s.server_id) + " slot " + std::to_string(i) + " over capacity");
    if (g.status == SlotStatus::Running && (g.model_id.empty() || g.task_id.empty())) {
      bad.push_back("server " + std::to_string(s.server_id) + " slot " + std::to_string(i) + " running without a resident model");
    }
    if (g.status == SlotStatus::Loading && g.model_id.empty()) {
      bad.push_back("server " + std::to_string(s.server_id) + " slot " + std::to_string(i) + " loading nothing");
    }
  }
  if (s.has_tier(TierKind::Device) && device_used > s.tier(TierKind::Device).spec.capacity_bytes) {
    bad.push_back("server " + std::to_string(s.server_id) + " device over capacity");
  }
  return bad;
}

}  // namespace sllm::cluster
