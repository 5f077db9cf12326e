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

#include <vector>

#include "servesim/cluster.h"
#include "servesim/perf_model.h"

namespace servesim {

// Latency-relaxed instances carry prefill duty, latency-strict ones decode.
enum class PoolKind { LatencyRelaxed, LatencyStrict };

inline PoolKind pool_kind(PoolTag tag) {
  return serves_prefill(tag) ? PoolKind::LatencyRelaxed : PoolKind::LatencyStrict;
}

struct UtilizationSnapshot {
  double compute_util = 0.0;
  double memory_util = 0.0;

  double imbalance() const { return std::abs(compute_util - memory_util); }
};

// Roofline shares of one decode step: the max branch defines full
// utilization of the bounding resource.
UtilizationSnapshot batch_utilization(int64_t batch_tokens, int64_t kv_total_tokens,
                                      const ModelProfile& profile, bool graph_mode);

struct OfflineCandidate {
  int64_t request_id = 0;
  int64_t kv_tokens = 0;
};

// Greedy roofline-balancing admission: repeatedly admit the offline decode
// candidate that most reduces |compute_util - memory_util| while the step
// stays under the TPOT SLO; stops when nothing improves or fits. Returns the
// admitted request ids in admission order.
std::vector<int64_t> select_offline_for_batch(
    const std::vector<OfflineCandidate>& candidates, int64_t online_batch_tokens,
    int64_t online_kv_tokens, const ModelProfile& profile, double tpot_slo_ms,
    bool graph_mode);

struct ColocationConfig {
  double migrate_idle_threshold_ms = 200.0;

  void validate() const;
};

}  // namespace servesim
