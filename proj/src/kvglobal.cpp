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

#include "servesim/kvglobal.h"

#include <algorithm>

namespace servesim {

std::vector<BlockHash> block_hashes(const std::vector<int32_t>& tokens,
                                    int64_t block_size) {
  std::vector<BlockHash> out;
  uint64_t parent = 1469598103934665603ull;
  int64_t n_blocks = static_cast<int64_t>(tokens.size()) / block_size;
  out.reserve(n_blocks);
  for (int64_t b = 0; b < n_blocks; ++b) {
    uint64_t h = parent;
    for (int64_t i = b * block_size; i < (b + 1) * block_size; ++i) {
      h ^= static_cast<uint64_t>(static_cast<uint32_t>(tokens[i]));
      h *= 1099511628211ull;
    }
    out.push_back(h);
    parent = h;
  }
  return out;
}

TieredStore::TieredStore(int64_t hbm_capacity_tokens, int64_t dram_capacity_tokens,
                         int64_t ssd_capacity_tokens, int64_t block_size)
    : capacity_{hbm_capacity_tokens, dram_capacity_tokens, ssd_capacity_tokens},
      block_size_(block_size) {
  if (block_size < 1) throw InvalidConfig("block_size must be >= 1");
  // Inclusion requires DRAM to be able to shadow everything HBM holds.
  if (dram_capacity_tokens < hbm_capacity_tokens) {
    throw InvalidConfig("DRAM capacity must be >= HBM capacity");
  }
}

bool TieredStore::contains(CacheTier tier, BlockHash h) const {
  return tiers_[int(tier)].index.count(h) > 0;
}

bool TieredStore::contains_any(BlockHash h) const {
  return contains(CacheTier::HBM, h) || contains(CacheTier::DRAM, h) ||
         contains(CacheTier::SSD, h);
}

int64_t TieredStore::used_tokens(CacheTier tier) const {
  return static_cast<int64_t>(tiers_[int(tier)].index.size()) * block_size_;
}

std::vector<BlockHash> TieredStore::resident_blocks(CacheTier tier) const {
  const auto& t = tiers_[int(tier)];
  return {t.lru.begin(), t.lru.end()};
}

void TieredStore::insert(CacheTier tier, BlockHash h) {
  auto& t = tiers_[int(tier)];
  auto it = t.index.find(h);
  if (it != t.index.end()) {
    t.lru.splice(t.lru.begin(), t.lru, it->second);
    return;
  }
  evict_for_space(tier);
  if (capacity_[int(tier)] < block_size_) return;  // tier too small to hold a block
  t.lru.push_front(h);
  t.index[h] = t.lru.begin();
}

void TieredStore::touch(CacheTier tier, BlockHash h) {
  auto& t = tiers_[int(tier)];
  auto it = t.index.find(h);
  if (it != t.index.end()) t.lru.splice(t.lru.begin(), t.lru, it->second);
}

void TieredStore::erase(CacheTier tier, BlockHash h) {
  auto& t = tiers_[int(tier)];
  auto it = t.index.find(h);
  if (it == t.index.end()) return;
  t.lru.erase(it->second);
  t.index.erase(it);
}

void TieredStore::evict_for_space(CacheTier tier) {
  auto& t = tiers_[int(tier)];
  while (used_tokens(tier) + block_size_ > capacity_[int(tier)] && !t.lru.empty()) {
    BlockHash victim = t.lru.back();
    switch (tier) {
      case CacheTier::HBM:
        erase(CacheTier::HBM, victim);
        break;
      case CacheTier::DRAM:
        // Inclusion: the HBM copy goes first, then the victim demotes to SSD.
        erase(CacheTier::HBM, victim);
        erase(CacheTier::DRAM, victim);
        insert(CacheTier::SSD, victim);
        break;
      case CacheTier::SSD:
        erase(CacheTier::SSD, victim);
        break;
    }
  }
}

void TieredStore::put_blocks(const std::vector<BlockHash>& blocks, CacheTier tier) {
  for (BlockHash h : blocks) {
    switch (tier) {
      case CacheTier::HBM:
        insert(CacheTier::DRAM, h);  // write-through keeps inclusion
        insert(CacheTier::HBM, h);
        break;
      case CacheTier::DRAM:
        insert(CacheTier::DRAM, h);
        break;
      case CacheTier::SSD:
        insert(CacheTier::SSD, h);
        break;
    }
  }
}

std::vector<BlockHash> TieredStore::get_blocks(const std::vector<BlockHash>& hashes,
                                               bool for_compute) {
  std::vector<BlockHash> found;
  for (BlockHash h : hashes) {
    if (!contains_any(h)) continue;
    found.push_back(h);
    if (contains(CacheTier::SSD, h) && !contains(CacheTier::DRAM, h)) {
      erase(CacheTier::SSD, h);
      insert(CacheTier::DRAM, h);
    } else {
      touch(CacheTier::DRAM, h);
    }
    if (for_compute) {
      insert(CacheTier::HBM, h);
    } else {
      touch(CacheTier::HBM, h);
    }
  }
  return found;
}

void TieredStore::drop_tier(CacheTier tier) {
  tiers_[int(tier)].lru.clear();
  tiers_[int(tier)].index.clear();
  if (tier == CacheTier::DRAM) {
    // Inclusion: nothing may stay in HBM without a DRAM copy.
    tiers_[int(CacheTier::HBM)].lru.clear();
    tiers_[int(CacheTier::HBM)].index.clear();
  }
}

void GlobalCacheIndex::sync_instance(int instance_id,
                                     const std::vector<BlockHash>& advertised,
                                     TimeUs now) {
  blocks[instance_id] = std::set<BlockHash>(advertised.begin(), advertised.end());
  as_of[instance_id] = now;
}

void GlobalCacheIndex::drop_instance(int instance_id) {
  blocks.erase(instance_id);
  as_of.erase(instance_id);
}

int64_t prefix_match(const std::vector<int32_t>& tokens,
                     const std::set<BlockHash>& instance_blocks,
                     int64_t block_size) {
  auto hashes = block_hashes(tokens, block_size);
  int64_t matched = 0;
  for (BlockHash h : hashes) {
    if (!instance_blocks.count(h)) break;
    matched += block_size;
  }
  return matched;
}

RouteDecision route_request(const std::vector<int32_t>& tokens,
                            const std::vector<RouteCandidate>& instances,
                            const GlobalCacheIndex& index,
                            const ModelProfile& profile, int64_t block_size) {
  static const std::set<BlockHash> kEmpty;
  RouteDecision best;
  bool any_healthy = false;
  for (const auto& cand : instances) {
    if (!cand.healthy) continue;
    any_healthy = true;
    auto it = index.blocks.find(cand.instance_id);
    const auto& advertised = it == index.blocks.end() ? kEmpty : it->second;
    int64_t matched = prefix_match(tokens, advertised, block_size);
    int64_t effective = static_cast<int64_t>(tokens.size()) - matched;
    double est = estimate_prefill_time(cand.queued_prefill_tokens, profile) +
                 estimate_prefill_time(effective, profile);
    bool better = best.instance_id < 0 || est < best.est_ttft_ms ||
                  (est == best.est_ttft_ms && matched > best.matched_tokens) ||
                  (est == best.est_ttft_ms && matched == best.matched_tokens &&
                   cand.instance_id < best.instance_id);
    if (better) {
      best.instance_id = cand.instance_id;
      best.matched_tokens = matched;
      best.est_ttft_ms = est;
    }
  }
  if (!any_healthy) throw NoCapacity("no healthy instance");
  return best;
}

std::vector<RecoveryDecision> plan_fault_recovery(
    const std::vector<RecoveryRequest>& resident,
    const std::vector<RouteCandidate>& targets, const GlobalCacheIndex& index,
    const ModelProfile& profile, const RecoveryParams& params,
    int64_t block_size) {
  // SLO of high-priority traffic first: online requests are planned before
  // offline ones, in id order within a class.
  std::vector<RecoveryRequest> ordered = resident;
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const RecoveryRequest& a, const RecoveryRequest& b) {
                     if (a.cls != b.cls) return a.cls == RequestClass::Online;
                     return a.request_id < b.request_id;
                   });

  std::vector<RecoveryDecision> decisions;
  decisions.reserve(ordered.size());
  for (const auto& req : ordered) {
    RecoveryDecision d;
    d.request_id = req.request_id;
    RouteDecision route;
    try {
      route = route_request(req.tokens, targets, index, profile, block_size);
    } catch (const NoCapacity&) {
      d.target_instance = -1;  // request Failed
      decisions.push_back(d);
      continue;
    }
    d.target_instance = route.instance_id;
    double recompute_cost =
        estimate_prefill_time(req.prefix_tokens, profile);
    double migrate_cost =
        static_cast<double>(req.prefix_tokens) * params.bytes_per_token /
            params.bandwidth_bytes_per_ms +
        params.setup_ms;
    if (req.replica_survives && migrate_cost < recompute_cost) {
      d.action = RecoveryAction::Migrate;
      d.cost_ms = migrate_cost;
      d.alt_cost_ms = recompute_cost;
    } else {
      d.action = RecoveryAction::Recompute;
      d.cost_ms = recompute_cost;
      d.alt_cost_ms = req.replica_survives ? migrate_cost : recompute_cost;
    }
    decisions.push_back(d);
  }
  return decisions;
}

}  // namespace servesim
