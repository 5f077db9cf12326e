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

#include <functional>
#include <vector>

#include "servesim/cluster.h"
#include "servesim/perf_model.h"

namespace servesim {

enum class EPDStrategy { E_P_D, EP_D, ED_P };

const char* to_string(EPDStrategy s);

struct EPDLimits {
  int64_t max_encode_batch = 0;
  int64_t token_budget = 0;
};

// Largest n in [0, upper] with cost(n) strictly below the bound; cost must be
// monotone non-decreasing. Binary search, equal to an exhaustive scan.
int64_t binary_search_limit(int64_t upper,
                            const std::function<double(int64_t)>& cost,
                            double bound);

// Profile the per-batch limits that keep one iteration under the TPOT SLO.
EPDLimits profile_limits(const ModelProfile& profile, double tpot_slo_ms,
                         int64_t encode_upper, int64_t token_upper,
                         int64_t assumed_kv_per_seq = 0);

// Stage-ordered batch assembly: running decodes, then an in-flight chunked
// prefill continuation; pending encodes are batched only when no request is
// mid-prefill, capped at max_encode_batch.
Batch epd_assemble_batch(const Instance& inst, const std::vector<Request>& requests,
                         const EPDLimits& limits);

struct PhasePlacement {
  PoolTag encode_pool = PoolTag::E;
  PoolTag prefill_pool = PoolTag::P;
  PoolTag decode_pool = PoolTag::D;
  bool fused_encode_prefill = false;  // EP on one instance
  bool fused_encode_decode = false;   // ED on one instance
};

// Phase placement table for a multimodal request; falls back to E+P+D over
// whatever pools exist when the strategy's pool is empty.
PhasePlacement dispatch_multimodal(EPDStrategy strategy, bool e_pool_present,
                                   bool p_pool_present, bool d_pool_present);

}  // namespace servesim
