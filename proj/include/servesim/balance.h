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

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "servesim/common.h"
#include "servesim/perf_model.h"

namespace servesim {

// ---------------------------------------------------------------------------
// Hierarchical DP load balancing
// ---------------------------------------------------------------------------

struct DPBatch {
  std::vector<int64_t> seq_tokens;
  int64_t total_tokens() const;
};

struct DPGroup {
  int id = 0;
  int64_t kv_capacity_tokens = 0;
  std::vector<DPBatch> batches;

  int64_t token_load() const;
  int64_t kv_free_tokens() const { return kv_capacity_tokens - token_load(); }
};

enum class MigrationGranularity { Batch, Sequence, MLABlock };

struct MigrationPlan {
  int src = 0;
  int dst = 0;
  MigrationGranularity granularity = MigrationGranularity::Sequence;
  int64_t moved_tokens = 0;
  double est_saving_us = 0.0;
};

// New-sequence placement: most available KV space wins, lowest id on ties.
// Returns -1 when no group fits.
int assign_dp_group(int64_t needed_tokens, const std::vector<DPGroup>& groups);

// Repeatedly move work from the most to the least loaded group until the gap
// drops below the threshold: a whole batch when it fits inside the gap, else a
// whole sequence, else an MLA block slice sized to halve the gap. Mutates the
// groups to reflect the plan.
std::vector<MigrationPlan> plan_migration(std::vector<DPGroup>& groups,
                                          int64_t threshold_tokens,
                                          const ModelProfile& profile,
                                          int64_t mla_block_size = 16);

// Kernel-level split: per-core slices with max core load = ceil(total/cores).
struct CoreSlice {
  int seq_index = 0;
  int64_t tokens = 0;
};
std::vector<std::vector<CoreSlice>> split_kernel_load(
    const std::vector<int64_t>& seq_tokens, int num_cores);

int64_t max_core_load(const std::vector<std::vector<CoreSlice>>& assignment);

// ---------------------------------------------------------------------------
// Dynamic EP load balancing
// ---------------------------------------------------------------------------

struct ExpertReplica {
  int device = 0;
  double weight = 1.0;
};

struct RoutingTable {
  std::vector<std::vector<ExpertReplica>> experts;  // expert -> replicas
  uint64_t version = 0;

  uint64_t content_hash() const;
  // Per-device load given per-expert token loads, traffic split by weight.
  std::vector<double> device_loads(const std::vector<double>& expert_loads,
                                   int num_devices) const;
};

// Cumulative per-expert token counts over one reporting window.
class ExpertLoadTracker {
 public:
  explicit ExpertLoadTracker(int num_experts) : loads_(num_experts, 0.0) {}
  void record(int expert, double tokens) { loads_.at(expert) += tokens; }
  const std::vector<double>& loads() const { return loads_; }
  std::vector<double> take_window();

 private:
  std::vector<double> loads_;
};

RoutingTable initial_placement(int num_experts, int num_devices);

// Greedy replication of the hottest effective expert (load / replica count)
// onto the least-loaded device; stops when the budget runs out or the next
// replica would raise the max device load.
RoutingTable eplb_plan(const std::vector<double>& expert_loads, int num_devices,
                       int replica_budget);

// Double-buffered routing-table publication. Readers always see one complete
// version; the switch happens only after every worker reported ready.
class DoubleBuffer {
 public:
  explicit DoubleBuffer(RoutingTable initial, int num_workers);

  std::shared_ptr<const RoutingTable> read() const;
  void stage(RoutingTable table);
  void set_worker_ready(int worker);
  // True if the switch happened; false when staged table missing or some
  // worker is not ready yet.
  bool try_commit();
  uint64_t active_version() const;

 private:
  mutable std::mutex mu_;
  std::shared_ptr<const RoutingTable> active_;
  std::shared_ptr<RoutingTable> staged_;
  std::vector<bool> ready_;
};

}  // namespace servesim
