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
#include <string>

#include <json.hpp>

#include "servesim/common.h"

namespace servesim {

// Coefficients of the analytic latency model. Prefill is a full quadratic in
// prompt length, decode follows a roofline max(compute, memory) form, encode
// is linear in image units.
struct ModelProfile {
  double prefill_a = 1e-6;    // ms per token^2
  double prefill_b = 0.1;     // ms per token
  double prefill_c = 10.0;    // ms fixed setup per kernel launch
  double decode_alpha = 0.01;  // ms per batch token
  double decode_beta = 1e-4;   // ms per resident kv token
  double encode_per_image_ms = 40.0;
  double launch_overhead_ms = 1.0;        // eager per-step kernel launches
  double launch_overhead_graph_ms = 0.2;  // graph-mode replay
  double sched_overhead_ms = 2.0;         // host scheduling per step
  int num_layers = 61;
  int mtp_draft_len = 0;
  double mtp_accept_prob = 0.0;
  double attn_gamma_us_per_token_layer = 9.84e-4;

  void validate() const;
  static ModelProfile from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct SLOTargets {
  double ttft_ms = 2000.0;
  double tpot_ms = 100.0;
};

double estimate_prefill_time(int64_t input_tokens, const ModelProfile& p);

// Incremental cost of prefilling `chunk_tokens` on top of `context_tokens` of
// already-computed context, excluding the fixed setup term so that chunk costs
// telescope exactly: sum over a partition of L equals a*L^2 + b*L.
double estimate_chunk_time(int64_t context_tokens, int64_t chunk_tokens,
                           const ModelProfile& p);

double estimate_decode_step_time(int64_t batch_tokens, int64_t kv_total_tokens,
                                 const ModelProfile& p, bool graph_mode);

double estimate_encode_time(int64_t image_units, const ModelProfile& p);

// Expected accepted tokens per step for a draft of length d accepted with
// per-token probability p: sum_{k=0..d} p^k, in [1, d+1].
double expected_tokens_per_step(int draft_len, double accept_prob);

}  // namespace servesim
