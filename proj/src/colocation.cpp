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

#include "servesim/colocation.h"

#include <algorithm>
#include <cmath>
#include <limits>

namespace servesim {

void ColocationConfig::validate() const {
  if (migrate_idle_threshold_ms < 0.0) {
    throw InvalidConfig("migrate_idle_threshold_ms must be >= 0");
  }
}

UtilizationSnapshot batch_utilization(int64_t batch_tokens, int64_t kv_total_tokens,
                                      const ModelProfile& profile, bool graph_mode) {
  UtilizationSnapshot snap;
  if (batch_tokens <= 0) return snap;
  double launch = graph_mode ? profile.launch_overhead_graph_ms
                             : profile.launch_overhead_ms;
  double base = estimate_decode_step_time(batch_tokens, kv_total_tokens, profile,
                                          graph_mode) -
                launch;
  if (base <= 0.0) return snap;
  snap.compute_util = profile.decode_alpha * static_cast<double>(batch_tokens) / base;
  snap.memory_util = profile.decode_beta * static_cast<double>(kv_total_tokens) / base;
  return snap;
}

std::vector<int64_t> select_offline_for_batch(
    const std::vector<OfflineCandidate>& candidates, int64_t online_batch_tokens,
    int64_t online_kv_tokens, const ModelProfile& profile, double tpot_slo_ms,
    bool graph_mode) {
  std::vector<int64_t> admitted;
  std::vector<bool> used(candidates.size(), false);
  int64_t batch = online_batch_tokens;
  int64_t kv = online_kv_tokens;
  double cur_imbalance =
      batch > 0 ? batch_utilization(batch, kv, profile, graph_mode).imbalance()
                : std::numeric_limits<double>::infinity();

  for (;;) {
    int best = -1;
    double best_imbalance = cur_imbalance;
    for (size_t i = 0; i < candidates.size(); ++i) {
      if (used[i]) continue;
      int64_t nb = batch + 1;
      int64_t nkv = kv + candidates[i].kv_tokens;
      if (estimate_decode_step_time(nb, nkv, profile, graph_mode) > tpot_slo_ms) {
        continue;
      }
      double imb = batch_utilization(nb, nkv, profile, graph_mode).imbalance();
      if (imb < best_imbalance) {
        best_imbalance = imb;
        best = static_cast<int>(i);
      }
    }
    if (best < 0) break;
    used[best] = true;
    admitted.push_back(candidates[best].request_id);
    batch += 1;
    kv += candidates[best].kv_tokens;
    cur_imbalance = best_imbalance;
  }
  return admitted;
}

}  // namespace servesim
