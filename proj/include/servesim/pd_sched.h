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

struct PDConfig {
  int min_decode_instances = 2;
  double decode_capacity_headroom = 0.1;
  double idle_prefill_threshold_ms = 200.0;
  double switch_cooldown_ms = 500.0;

  void validate() const;
};

// Queuing estimate: prefill time of everything already queued plus this
// request's own prompt.
double predict_ttft(const Instance& inst, const std::vector<Request>& requests,
                    int64_t input_tokens, const ModelProfile& profile);

struct PrefillDispatch {
  bool need_role_switch = false;
  int instance = -1;
};

// Greedy lightest-predicted-TTFT over the P pool, falling back to the D->P
// pool, else a role switch is requested. Ties break by lowest instance id.
PrefillDispatch dispatch_prefill(const Request& request,
                                 const std::vector<Instance>& instances,
                                 const std::vector<Request>& requests,
                                 const SLOTargets& slo,
                                 const ModelProfile& profile);

// Decode placement after prefill: origin instance when it still fits, else
// the feasible decode instance with the fewest running tokens. Returns -1
// when nothing fits (caller queues and retries at the next heartbeat).
int dispatch_decode(const Request& request,
                    const std::vector<Instance>& instances,
                    const std::vector<Request>& requests);

struct RoleChange {
  int instance = -1;
  PoolTag from = PoolTag::P;
  PoolTag to = PoolTag::D;
};

// Heartbeat role balancing. `prefill_pressure` is set when dispatch_prefill
// returned NeedRoleSwitch since the last heartbeat.
std::vector<RoleChange> maybe_switch_roles(const std::vector<Instance>& instances,
                                           const std::vector<Request>& requests,
                                           bool prefill_pressure,
                                           const SLOTargets& slo,
                                           const PDConfig& config, TimeUs now);

// Iteration batch assembly: migration transfers drain separately; all
// resident decodes enter the batch; leftover token budget goes to chunked
// prefill. Decode work is never displaced by prefill.
Batch local_schedule(const Instance& inst, const std::vector<Request>& requests);

}  // namespace servesim
