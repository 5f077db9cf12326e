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

#include "servesim/balance.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

namespace servesim {

int64_t DPBatch::total_tokens() const {
  return std::accumulate(seq_tokens.begin(), seq_tokens.end(), int64_t{0});
}

int64_t DPGroup::token_load() const {
  int64_t sum = 0;
  for (const auto& b : batches) sum += b.total_tokens();
  return sum;
}

int assign_dp_group(int64_t needed_tokens, const std::vector<DPGroup>& groups) {
  int best = -1;
  int64_t best_free = -1;
  for (const auto& g : groups) {
    int64_t free = g.kv_free_tokens();
    if (free < needed_tokens) continue;
    if (free > best_free) {
      best_free = free;
      best = g.id;
    }
  }
  return best;
}

namespace {

double migration_saving_us(int64_t moved_tokens, const ModelProfile& profile) {
  return profile.attn_gamma_us_per_token_layer *
         static_cast<double>(moved_tokens) * profile.num_layers;
}

}  // namespace

std::vector<MigrationPlan> plan_migration(std::vector<DPGroup>& groups,
                                          int64_t threshold_tokens,
                                          const ModelProfile& profile,
                                          int64_t mla_block_size) {
  std::vector<MigrationPlan> plans;
  if (groups.size() < 2) return plans;

  for (;;) {
    size_t src = 0, dst = 0;
    int64_t max_load = std::numeric_limits<int64_t>::min();
    int64_t min_load = std::numeric_limits<int64_t>::max();
    for (size_t i = 0; i < groups.size(); ++i) {
      int64_t l = groups[i].token_load();
      if (l > max_load) {
        max_load = l;
        src = i;
      }
      if (l < min_load) {
        min_load = l;
        dst = i;
      }
    }
    int64_t gap = max_load - min_load;
    if (gap <= threshold_tokens) break;
    int64_t target = gap / 2;  // moving t shrinks the gap by 2t

    MigrationPlan plan;
    plan.src = groups[src].id;
    plan.dst = groups[dst].id;

    // Largest whole batch that fits inside half the gap.
    int batch_idx = -1;
    int64_t batch_best = 0;
    for (size_t b = 0; b < groups[src].batches.size(); ++b) {
      int64_t t = groups[src].batches[b].total_tokens();
      if (t > 0 && t <= target && t > batch_best) {
        batch_best = t;
        batch_idx = static_cast<int>(b);
      }
    }
    if (batch_idx >= 0) {
      plan.granularity = MigrationGranularity::Batch;
      plan.moved_tokens = batch_best;
      groups[dst].batches.push_back(std::move(groups[src].batches[batch_idx]));
      groups[src].batches.erase(groups[src].batches.begin() + batch_idx);
    } else {
      // Largest whole sequence that fits.
      int sb = -1, ss = -1;
      int64_t seq_best = 0;
      for (size_t b = 0; b < groups[src].batches.size(); ++b) {
        for (size_t s = 0; s < groups[src].batches[b].seq_tokens.size(); ++s) {
          int64_t t = groups[src].batches[b].seq_tokens[s];
          if (t > 0 && t <= target && t > seq_best) {
            seq_best = t;
            sb = static_cast<int>(b);
            ss = static_cast<int>(s);
          }
        }
      }
      if (sb >= 0) {
        plan.granularity = MigrationGranularity::Sequence;
        plan.moved_tokens = seq_best;
        auto& seqs = groups[src].batches[sb].seq_tokens;
        seqs.erase(seqs.begin() + ss);
        groups[dst].batches.push_back(DPBatch{{seq_best}});
      } else {
        // Partial MLA block slice off the largest sequence, sized to halve the
        // gap and rounded down to the block grid.
        int64_t slice = (target / mla_block_size) * mla_block_size;
        int lb = -1, ls = -1;
        int64_t longest = 0;
        for (size_t b = 0; b < groups[src].batches.size(); ++b) {
          for (size_t s = 0; s < groups[src].batches[b].seq_tokens.size(); ++s) {
            int64_t t = groups[src].batches[b].seq_tokens[s];
            if (t > longest) {
              longest = t;
              lb = static_cast<int>(b);
              ls = static_cast<int>(s);
            }
          }
        }
        slice = std::min(slice, longest - 1);
        slice = (slice / mla_block_size) * mla_block_size;
        if (slice <= 0 || lb < 0) break;  // no movable unit left
        plan.granularity = MigrationGranularity::MLABlock;
        plan.moved_tokens = slice;
        groups[src].batches[lb].seq_tokens[ls] -= slice;
        groups[dst].batches.push_back(DPBatch{{slice}});
      }
    }
    plan.est_saving_us = migration_saving_us(plan.moved_tokens, profile);
    plans.push_back(plan);
  }
  return plans;
}

std::vector<std::vector<CoreSlice>> split_kernel_load(
    const std::vector<int64_t>& seq_tokens, int num_cores) {
  if (num_cores < 1) throw InvalidConfig("num_cores must be >= 1");
  std::vector<std::vector<CoreSlice>> cores(num_cores);
  int64_t total = std::accumulate(seq_tokens.begin(), seq_tokens.end(), int64_t{0});
  if (total == 0) return cores;
  int64_t cap = (total + num_cores - 1) / num_cores;

  std::vector<int64_t> load(num_cores, 0);
  // Longest-processing-time order; ties by original index for determinism.
  std::vector<int> order(seq_tokens.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return seq_tokens[a] > seq_tokens[b];
  });

  for (int idx : order) {
    int64_t remaining = seq_tokens[idx];
    while (remaining > 0) {
      int core = 0;
      for (int c = 1; c < num_cores; ++c) {
        if (load[c] < load[core]) core = c;
      }
      int64_t take = std::min(remaining, cap - load[core]);
      cores[core].push_back(CoreSlice{idx, take});
      load[core] += take;
      remaining -= take;
    }
  }
  return cores;
}

int64_t max_core_load(const std::vector<std::vector<CoreSlice>>& assignment) {
  int64_t best = 0;
  for (const auto& core : assignment) {
    int64_t l = 0;
    for (const auto& s : core) l += s.tokens;
    best = std::max(best, l);
  }
  return best;
}

uint64_t RoutingTable::content_hash() const {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](uint64_t v) {
    h ^= v;
    h *= 1099511628211ull;
  };
  mix(version);
  for (const auto& replicas : experts) {
    mix(replicas.size());
    for (const auto& r : replicas) {
      mix(static_cast<uint64_t>(r.device));
      uint64_t bits;
      static_assert(sizeof(bits) == sizeof(r.weight));
      std::memcpy(&bits, &r.weight, sizeof(bits));
      mix(bits);
    }
  }
  return h;
}

std::vector<double> RoutingTable::device_loads(
    const std::vector<double>& expert_loads, int num_devices) const {
  std::vector<double> loads(num_devices, 0.0);
  for (size_t e = 0; e < experts.size(); ++e) {
    for (const auto& r : experts[e]) {
      loads.at(r.device) += expert_loads.at(e) * r.weight;
    }
  }
  return loads;
}

std::vector<double> ExpertLoadTracker::take_window() {
  std::vector<double> out = loads_;
  std::fill(loads_.begin(), loads_.end(), 0.0);
  return out;
}

RoutingTable initial_placement(int num_experts, int num_devices) {
  RoutingTable t;
  t.experts.resize(num_experts);
  for (int e = 0; e < num_experts; ++e) {
    t.experts[e].push_back(ExpertReplica{e % num_devices, 1.0});
  }
  return t;
}

namespace {

// Exhaustive search over replica multisets; used when the space is small so
// the plan is provably optimal there. Lexicographically first optimum wins.
RoutingTable eplb_exhaustive(const std::vector<double>& expert_loads,
                             int num_devices, int replica_budget) {
  int experts = static_cast<int>(expert_loads.size());
  RoutingTable best = initial_placement(experts, num_devices);
  auto max_load = [&](const RoutingTable& t) {
    auto loads = t.device_loads(expert_loads, num_devices);
    return *std::max_element(loads.begin(), loads.end());
  };
  double best_max = max_load(best);

  std::vector<std::pair<int, int>> adds;
  std::function<void(int)> rec = [&](int start) {
    if (!adds.empty()) {
      RoutingTable t = initial_placement(experts, num_devices);
      for (auto [e, d] : adds) t.experts[e].push_back(ExpertReplica{d, 0.0});
      for (auto& reps : t.experts) {
        double w = 1.0 / static_cast<double>(reps.size());
        for (auto& r : reps) r.weight = w;
      }
      double m = max_load(t);
      if (m < best_max - 1e-12) {
        best_max = m;
        best = std::move(t);
      }
    }
    if (static_cast<int>(adds.size()) == replica_budget) return;
    for (int c = start; c < experts * num_devices; ++c) {
      adds.emplace_back(c / num_devices, c % num_devices);
      rec(c);
      adds.pop_back();
    }
  };
  rec(0);
  return best;
}

}  // namespace

RoutingTable eplb_plan(const std::vector<double>& expert_loads, int num_devices,
                       int replica_budget) {
  // Small spaces get the exact answer; bigger ones the greedy heuristic.
  double space = 1.0;
  for (int b = 0; b < replica_budget; ++b) {
    space *= static_cast<double>(expert_loads.size()) * num_devices;
    if (space > 2e5) break;
  }
  if (space <= 2e5) {
    return eplb_exhaustive(expert_loads, num_devices, replica_budget);
  }

  RoutingTable table = initial_placement(static_cast<int>(expert_loads.size()),
                                         num_devices);
  auto max_load = [&](const RoutingTable& t) {
    auto loads = t.device_loads(expert_loads, num_devices);
    return *std::max_element(loads.begin(), loads.end());
  };
  double current_max = max_load(table);

  for (int b = 0; b < replica_budget; ++b) {
    // Hottest effective expert = load split across its current replicas.
    int hot = -1;
    double hot_eff = -1.0;
    for (size_t e = 0; e < expert_loads.size(); ++e) {
      double eff = expert_loads[e] / table.experts[e].size();
      if (eff > hot_eff) {
        hot_eff = eff;
        hot = static_cast<int>(e);
      }
    }
    if (hot < 0) break;

    auto loads = table.device_loads(expert_loads, num_devices);
    int target = -1;
    double target_load = std::numeric_limits<double>::infinity();
    for (int d = 0; d < num_devices; ++d) {
      bool hosts = false;
      for (const auto& r : table.experts[hot]) hosts |= (r.device == d);
      if (hosts) continue;
      if (loads[d] < target_load) {
        target_load = loads[d];
        target = d;
      }
    }
    if (target < 0) break;  // every device already hosts a replica

    RoutingTable candidate = table;
    candidate.experts[hot].push_back(ExpertReplica{target, 0.0});
    double w = 1.0 / candidate.experts[hot].size();
    for (auto& r : candidate.experts[hot]) r.weight = w;
    double cand_max = max_load(candidate);
    if (cand_max > current_max) break;  // replication would create a new hotspot
    table = std::move(candidate);
    current_max = cand_max;
  }
  return table;
}

DoubleBuffer::DoubleBuffer(RoutingTable initial, int num_workers)
    : active_(std::make_shared<const RoutingTable>(std::move(initial))),
      ready_(num_workers, false) {}

std::shared_ptr<const RoutingTable> DoubleBuffer::read() const {
  std::lock_guard<std::mutex> lock(mu_);
  return active_;
}

void DoubleBuffer::stage(RoutingTable table) {
  std::lock_guard<std::mutex> lock(mu_);
  staged_ = std::make_shared<RoutingTable>(std::move(table));
  std::fill(ready_.begin(), ready_.end(), false);
}

void DoubleBuffer::set_worker_ready(int worker) {
  std::lock_guard<std::mutex> lock(mu_);
  ready_.at(worker) = true;
}

bool DoubleBuffer::try_commit() {
  std::lock_guard<std::mutex> lock(mu_);
  if (!staged_) return false;
  for (bool r : ready_) {
    if (!r) return false;
  }
  staged_->version = active_->version + 1;
  active_ = std::shared_ptr<const RoutingTable>(std::move(staged_));
  staged_.reset();
  std::fill(ready_.begin(), ready_.end(), false);
  return true;
}

uint64_t DoubleBuffer::active_version() const {
  std::lock_guard<std::mutex> lock(mu_);
  return active_->version;
}

}  // namespace servesim
