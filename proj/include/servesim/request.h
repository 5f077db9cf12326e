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
#include <optional>
#include <string>
#include <vector>

#include "servesim/common.h"

namespace servesim {

enum class RequestClass { Online, Offline };
enum class Modality { Text, Multimodal };

enum class RequestState {
  Queued,
  Encoding,
  Prefilling,
  Decoding,
  Preempted,
  Migrating,
  Complete,
  Failed,
};

const char* to_string(RequestState s);
const char* to_string(RequestClass c);
const char* to_string(Modality m);

struct Request {
  int64_t id = 0;
  RequestClass cls = RequestClass::Online;
  Modality modality = Modality::Text;
  TimeUs arrival = 0;
  int64_t input_tokens = 0;
  int64_t image_units = 0;
  // Oracle knowledge carried by the trace; schedulers must not read it.
  int64_t true_output_tokens = 0;
  double slo_ttft_ms = 2000.0;
  double slo_tpot_ms = 100.0;
  RequestState state = RequestState::Queued;
  int64_t tokens_generated = 0;
  std::optional<TimeUs> first_token;
  std::optional<TimeUs> finish;
  std::optional<int> origin_instance;

  // Prefill/encode progress, in tokens / image units already computed.
  // prefill_target normally equals input_tokens; fault recovery by
  // recomputation raises it to the full lost prefix.
  int64_t prefill_target = 0;
  int64_t prefill_done = 0;
  int64_t encode_done = 0;
  // Fractional token credit from speculative decoding.
  double decode_credit = 0.0;
  // KV tokens currently resident on the owning instance.
  int64_t kv_resident = 0;

  int64_t prefill_left() const { return prefill_target - prefill_done; }
  int64_t kv_tokens() const { return kv_resident; }
};

// Allowed lifecycle edges; used by the engine in debug checks and by tests.
bool lifecycle_edge_allowed(RequestState from, RequestState to);

}  // namespace servesim
