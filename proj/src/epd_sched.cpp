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

#include "servesim/epd_sched.h"

#include <algorithm>

namespace servesim {

const char* to_string(EPDStrategy s) {
  switch (s) {
    case EPDStrategy::E_P_D: return "E+P+D";
    case EPDStrategy::EP_D: return "EP+D";
    case EPDStrategy::ED_P: return "ED+P";
  }
  return "?";
}

int64_t binary_search_limit(int64_t upper,
                            const std::function<double(int64_t)>& cost,
                            double bound) {
  if (upper < 1 || cost(1) >= bound) return 0;
  int64_t lo = 1, hi = upper;  // invariant: cost(lo) < bound
  while (lo < hi) {
    int64_t mid = lo + (hi - lo + 1) / 2;
    if (cost(mid) < bound) {
      lo = mid;
    } else {
      hi = mid - 1;
    }
  }
  return lo;
}

EPDLimits profile_limits(const ModelProfile& profile, double tpot_slo_ms,
                         int64_t encode_upper, int64_t token_upper,
                         int64_t assumed_kv_per_seq) {
  EPDLimits limits;
  limits.max_encode_batch = binary_search_limit(
      encode_upper,
      [&](int64_t b) { return estimate_encode_time(b, profile); }, tpot_slo_ms);
  limits.token_budget = binary_search_limit(
      token_upper,
      [&](int64_t b) {
        return estimate_decode_step_time(b, b * assumed_kv_per_seq, profile,
                                         false);
      },
      tpot_slo_ms);
  return limits;
}

Batch epd_assemble_batch(const Instance& inst, const std::vector<Request>& requests,
                         const EPDLimits& limits) {
  Batch batch;
  int64_t budget = limits.token_budget > 0 ? limits.token_budget : inst.token_budget;

  for (int64_t id : inst.decode_set) {
    batch.decode_ids.push_back(id);
    budget -= 1;
  }

  bool prefill_in_progress = false;
  for (int64_t id : inst.prefill_queue) {
    const Request& r = requests[id];
    if (r.prefill_done > 0 && r.prefill_done < r.prefill_target) {
      prefill_in_progress = true;
      if (budget > 0) {
        int64_t chunk = std::min(budget, r.prefill_left());
        batch.chunks.push_back(PrefillChunk{id, r.prefill_done, chunk});
        budget -= chunk;
      }
      break;  // continue the in-flight prefill before anything new
    }
  }

  if (!prefill_in_progress) {
    if (!inst.prefill_queue.empty()) {
      // Start the next prompt; new encodes wait until no prefill is active.
      for (int64_t id : inst.prefill_queue) {
        if (budget <= 0) break;
        const Request& r = requests[id];
        int64_t left = r.prefill_left();
        if (left <= 0) continue;
        int64_t chunk = std::min(budget, left);
        batch.chunks.push_back(PrefillChunk{id, r.prefill_done, chunk});
        budget -= chunk;
      }
    } else {
      int64_t cap = limits.max_encode_batch;
      for (int64_t id : inst.encode_queue) {
        if (static_cast<int64_t>(batch.encode_ids.size()) >= cap) break;
        batch.encode_ids.push_back(id);
      }
    }
  }
  return batch;
}

PhasePlacement dispatch_multimodal(EPDStrategy strategy, bool e_pool_present,
                                   bool p_pool_present, bool d_pool_present) {
  PhasePlacement out;
  switch (strategy) {
    case EPDStrategy::E_P_D:
      break;  // defaults, adjusted below if pools are missing
    case EPDStrategy::EP_D:
      out.encode_pool = PoolTag::P;
      out.fused_encode_prefill = true;
      break;
    case EPDStrategy::ED_P:
      out.encode_pool = PoolTag::D;
      out.decode_pool = PoolTag::D;
      out.fused_encode_decode = true;
      break;
  }
  // Fall back to E+P+D over whatever pools exist.
  if (out.encode_pool == PoolTag::E && !e_pool_present) {
    out.encode_pool = p_pool_present ? PoolTag::P : PoolTag::D;
  }
  if (!p_pool_present) out.prefill_pool = d_pool_present ? PoolTag::D : out.encode_pool;
  if (!d_pool_present) out.decode_pool = p_pool_present ? PoolTag::P : out.encode_pool;
  return out;
}

}  // namespace servesim
