/* Copyright 2025 The servesim Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <cstdint>
#include <list>
#include <map>
#include <set>
#include <unordered_map>
#include <vector>

#include "servesim/common.h"
#include "servesim/perf_model.h"
#include "servesim/request.h"

namespace servesim {

constexpr int64_t kDefaultBlockSize = 16;

// Hash-chained block identity: a block's hash commits to the whole prefix up
// to and including its tokens.
using BlockHash = uint64_t;
std::vector<BlockHash> block_hashes(const std::vector<int32_t>& tokens,
                                    int64_t block_size = kDefaultBlockSize);

enum class CacheTier { HBM = 0, DRAM = 1, SSD = 2 };

// Per-instance multi-level store with the inclusion invariant: every block
// resident in HBM is also resident in DRAM. Eviction is LRU per tier; a DRAM
// victim loses its HBM copy first and is demoted to SSD; SSD eviction
// discards.
class TieredStore {
 public:
  TieredStore(int64_t hbm_capacity_tokens, int64_t dram_capacity_tokens,
              int64_t ssd_capacity_tokens, int64_t block_size = kDefaultBlockSize);

  // Insert blocks at `tier`. HBM writes go through to DRAM.
  void put_blocks(const std::vector<BlockHash>& blocks, CacheTier tier);

  // Touch + promote: found blocks move up to DRAM (and HBM when
  // `for_compute`). Returns the subset found in any tier.
  std::vector<BlockHash> get_blocks(const std::vector<BlockHash>& hashes,
                                    bool for_compute = false);

  bool contains(CacheTier tier, BlockHash h) const;
  bool contains_any(BlockHash h) const;
  int64_t used_tokens(CacheTier tier) const;
  int64_t capacity_tokens(CacheTier tier) const { return capacity_[int(tier)]; }
  int64_t block_size() const { return block_size_; }
  std::vector<BlockHash> resident_blocks(CacheTier tier) const;
  void drop_tier(CacheTier tier);  // e.g. HBM contents lost on a device fault

 private:
  struct TierState {
    std::list<BlockHash> lru;  // front = most recently used
    std::unordered_map<BlockHash, std::list<BlockHash>::iterator> index;
  };

  void insert(CacheTier tier, BlockHash h);
  void touch(CacheTier tier, BlockHash h);
  void erase(CacheTier tier, BlockHash h);
  void evict_for_space(CacheTier tier);

  TierState tiers_[3];
  int64_t capacity_[3];
  int64_t block_size_;
};

// Instance -> advertised block hashes, refreshed only at heartbeat
// boundaries. Routing between heartbeats intentionally sees stale data.
struct GlobalCacheIndex {
  std::map<int, std::set<BlockHash>> blocks;
  std::map<int, TimeUs> as_of;

  void sync_instance(int instance_id, const std::vector<BlockHash>& advertised,
                     TimeUs now);
  void drop_instance(int instance_id);
};

// Longest chain of whole blocks of `tokens` advertised for one instance.
int64_t prefix_match(const std::vector<int32_t>& tokens,
                     const std::set<BlockHash>& instance_blocks,
                     int64_t block_size = kDefaultBlockSize);

// Candidate view of one instance for cache-aware routing.
struct RouteCandidate {
  int instance_id = 0;
  bool healthy = true;
  int64_t queued_prefill_tokens = 0;  // whole-prompt tokens already queued
};

struct RouteDecision {
  int instance_id = -1;
  int64_t matched_tokens = 0;
  double est_ttft_ms = 0.0;
};

// (1) prefix matching, (2) queuing + prefill estimate with the matched prefix
// discounted, (3) min estimate; ties -> higher reuse, then lowest id.
RouteDecision route_request(const std::vector<int32_t>& tokens,
                            const std::vector<RouteCandidate>& instances,
                            const GlobalCacheIndex& index,
                            const ModelProfile& profile,
                            int64_t block_size = kDefaultBlockSize);

struct RecoveryParams {
  double bytes_per_token = 1024.0;
  double bandwidth_bytes_per_ms = 64.0 * 1024.0;
  double setup_ms = 5.0;
};

enum class RecoveryAction { Recompute, Migrate };

struct RecoveryRequest {
  int64_t request_id = 0;
  RequestClass cls = RequestClass::Online;
  int64_t prefix_tokens = 0;
  std::vector<int32_t> tokens;  // prefix identity for target routing
  bool replica_survives = false;
};

struct RecoveryDecision {
  int64_t request_id = 0;
  RecoveryAction action = RecoveryAction::Recompute;
  int target_instance = -1;
  double cost_ms = 0.0;
  double alt_cost_ms = 0.0;  // the rejected branch, for auditing
};

// Per-request min(recompute, migrate) with migration feasible only when a
// DRAM/SSD replica survived. Online requests are planned before Offline.
// Requests with no target capacity come back with target_instance = -1
// (Failed).
std::vector<RecoveryDecision> plan_fault_recovery(
    const std::vector<RecoveryRequest>& resident,
    const std::vector<RouteCandidate>& targets, const GlobalCacheIndex& index,
    const ModelProfile& profile, const RecoveryParams& params,
    int64_t block_size = kDefaultBlockSize);

}  // namespace servesim
