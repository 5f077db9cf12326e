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

#include "servesim/pd_sched.h"

#include <algorithm>
#include <limits>

namespace servesim {

const char* to_string(PoolTag t) {
  switch (t) {
    case PoolTag::P: return "P";
    case PoolTag::D: return "D";
    case PoolTag::PtoD: return "PtoD";
    case PoolTag::DtoP: return "DtoP";
    case PoolTag::E: return "E";
  }
  return "?";
}

int64_t running_tokens(const Instance& inst, const std::vector<Request>& requests) {
  int64_t sum = 0;
  for (int64_t id : inst.decode_set) sum += requests[id].kv_tokens();
  return sum;
}

int64_t queued_prefill_tokens(const Instance& inst,
                              const std::vector<Request>& requests) {
  int64_t sum = 0;
  for (int64_t id : inst.prefill_queue) {
    sum += requests[id].prefill_left();
  }
  return sum;
}

void PDConfig::validate() const {
  if (min_decode_instances < 2) {
    throw InvalidConfig("min_decode_instances must be >= 2");
  }
  if (decode_capacity_headroom < 0.0 || decode_capacity_headroom > 1.0) {
    throw InvalidConfig("decode_capacity_headroom must be in [0, 1]");
  }
}

double predict_ttft(const Instance& inst, const std::vector<Request>& requests,
                    int64_t input_tokens, const ModelProfile& profile) {
  double queued = 0.0;
  for (int64_t id : inst.prefill_queue) {
    queued += estimate_prefill_time(requests[id].prefill_left(), profile);
  }
  return queued + estimate_prefill_time(input_tokens, profile);
}

namespace {

// Min predicted TTFT over instances with the given pool tag; -1 if none
// qualifies under the SLO bound (or none exists at all).
int best_in_pool(PoolTag tag, const Request& request,
                 const std::vector<Instance>& instances,
                 const std::vector<Request>& requests, double slo_bound_ms,
                 const ModelProfile& profile, bool* pool_seen) {
  int best = -1;
  double best_est = std::numeric_limits<double>::infinity();
  for (const auto& inst : instances) {
    if (!inst.healthy || inst.pool != tag) continue;
    *pool_seen = true;
    double est = predict_ttft(inst, requests, request.input_tokens, profile);
    if (est < best_est) {
      best_est = est;
      best = inst.id;
    }
  }
  if (best >= 0 && best_est > slo_bound_ms) return -1;
  return best;
}

}  // namespace

PrefillDispatch dispatch_prefill(const Request& request,
                                 const std::vector<Instance>& instances,
                                 const std::vector<Request>& requests,
                                 const SLOTargets& slo,
                                 const ModelProfile& profile) {
  bool any_healthy = false;
  for (const auto& inst : instances) any_healthy |= inst.healthy;
  if (!any_healthy) throw NoCapacity("no healthy instances");

  double bound = request.slo_ttft_ms > 0 ? request.slo_ttft_ms : slo.ttft_ms;
  bool seen = false;
  int pick = best_in_pool(PoolTag::P, request, instances, requests, bound,
                          profile, &seen);
  if (pick < 0) {
    pick = best_in_pool(PoolTag::DtoP, request, instances, requests, bound,
                        profile, &seen);
  }
  if (pick >= 0) return {false, pick};
  return {true, -1};
}

int dispatch_decode(const Request& request,
                    const std::vector<Instance>& instances,
                    const std::vector<Request>& requests) {
  int64_t need = request.kv_tokens() > 0 ? request.kv_tokens() : request.input_tokens;
  auto feasible = [&](const Instance& inst) {
    if (!inst.healthy) return false;
    if (inst.stats.kv_used_tokens + need > inst.kv_capacity_tokens) return false;
    // One decode token per resident request per iteration.
    if (static_cast<int64_t>(inst.decode_set.size()) + 1 > inst.token_budget) {
      return false;
    }
    return true;
  };

  // Staying on the origin avoids the KV transfer entirely.
  if (request.origin_instance) {
    const Instance& origin = instances[*request.origin_instance];
    if (feasible(origin)) return origin.id;
  }

  int best = -1;
  int64_t best_tokens = std::numeric_limits<int64_t>::max();
  for (const auto& inst : instances) {
    if (!serves_decode(inst.pool) || !feasible(inst)) continue;
    int64_t tokens = running_tokens(inst, requests);
    if (tokens < best_tokens) {
      best_tokens = tokens;
      best = inst.id;
    }
  }
  return best;
}

std::vector<RoleChange> maybe_switch_roles(const std::vector<Instance>& instances,
                                           const std::vector<Request>& requests,
                                           bool prefill_pressure,
                                           const SLOTargets& slo,
                                           const PDConfig& config, TimeUs now) {
  std::vector<RoleChange> changes;
  int decode_capable = 0;
  for (const auto& inst : instances) {
    if (inst.healthy && serves_decode(inst.pool)) ++decode_capable;
  }

  if (prefill_pressure) {
    // Flip the lightest-load decode instance back to prefill duty, preferring
    // the P->D pool, without dropping below the decode floor.
    if (decode_capable > config.min_decode_instances) {
      int best = -1;
      PoolTag best_tag = PoolTag::PtoD;
      int64_t best_load = std::numeric_limits<int64_t>::max();
      for (PoolTag tag : {PoolTag::PtoD, PoolTag::D}) {
        for (const auto& inst : instances) {
          if (!inst.healthy || inst.pool != tag) continue;
          if (inst.cooldown_until > now) continue;
          int64_t load = running_tokens(inst, requests);
          if (load < best_load) {
            best_load = load;
            best = inst.id;
            best_tag = tag;
          }
        }
        if (best >= 0) break;
      }
      if (best >= 0) {
        changes.push_back(RoleChange{
            best, best_tag,
            best_tag == PoolTag::PtoD ? PoolTag::P : PoolTag::DtoP});
      }
    }
    return changes;
  }

  // Decode-side pressure: kv headroom exhausted, token interval over TPOT, or
  // a prefill instance sitting idle.
  bool kv_pressure = false;
  bool tpot_pressure = false;
  for (const auto& inst : instances) {
    if (!inst.healthy || !serves_decode(inst.pool)) continue;
    double occupancy = inst.kv_capacity_tokens > 0
                           ? static_cast<double>(inst.stats.kv_used_tokens) /
                                 static_cast<double>(inst.kv_capacity_tokens)
                           : 0.0;
    if (occupancy > 1.0 - config.decode_capacity_headroom) kv_pressure = true;
    if (inst.stats.token_interval_ema_ms > slo.tpot_ms &&
        inst.stats.last_token_time >= 0) {
      tpot_pressure = true;
    }
  }
  int idle_prefill = -1;
  for (const auto& inst : instances) {
    if (!inst.healthy || inst.pool != PoolTag::P) continue;
    if (inst.has_work() || inst.stepping) continue;
    if (inst.cooldown_until > now) continue;
    double idle = ms_from_us(now - inst.idle_since);
    if (idle >= config.idle_prefill_threshold_ms) {
      if (idle_prefill < 0 || inst.id < idle_prefill) idle_prefill = inst.id;
    }
  }

  if (kv_pressure || tpot_pressure || idle_prefill >= 0) {
    // Prefer reclaiming from the D->P pool; otherwise take an idle P.
    int best = -1;
    int64_t best_load = std::numeric_limits<int64_t>::max();
    for (const auto& inst : instances) {
      if (!inst.healthy || inst.pool != PoolTag::DtoP) continue;
      if (inst.cooldown_until > now) continue;
      int64_t load = queued_prefill_tokens(inst, requests);
      if (load < best_load) {
        best_load = load;
        best = inst.id;
      }
    }
    if (best >= 0) {
      changes.push_back(RoleChange{best, PoolTag::DtoP, PoolTag::D});
    } else if (idle_prefill >= 0) {
      changes.push_back(RoleChange{idle_prefill, PoolTag::P, PoolTag::PtoD});
    }
  }
  return changes;
}

Batch local_schedule(const Instance& inst, const std::vector<Request>& requests) {
  Batch batch;
  int64_t budget = inst.token_budget;

  // Decode first: one token slot per resident request.
  for (int64_t id : inst.decode_set) {
    batch.decode_ids.push_back(id);
    budget -= 1;
  }
  if (budget <= 0) return batch;  // decode-only batch, no chunk

  for (int64_t id : inst.prefill_queue) {
    if (budget <= 0) break;
    const Request& r = requests[id];
    int64_t left = r.prefill_left();
    if (left <= 0) continue;
    int64_t chunk = std::min(budget, left);
    batch.chunks.push_back(PrefillChunk{id, r.prefill_done, chunk});
    budget -= chunk;
  }
  return batch;
}

}  // namespace servesim
