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
#include <deque>
#include <vector>

#include "servesim/common.h"
#include "servesim/request.h"

namespace servesim {

// Elastic role pools. P and D are native roles; PtoD is a decode-serving
// instance that used to prefill, DtoP a prefill-serving instance that used to
// decode. E marks encode-capable instances for multimodal disaggregation.
enum class PoolTag { P, D, PtoD, DtoP, E };

const char* to_string(PoolTag t);

inline bool serves_prefill(PoolTag t) {
  return t == PoolTag::P || t == PoolTag::DtoP;
}
inline bool serves_decode(PoolTag t) {
  return t == PoolTag::D || t == PoolTag::PtoD;
}
inline bool serves_encode(PoolTag t) { return t == PoolTag::E; }

enum class TransferKind { KvMigration, ImageCache, Recovery };

struct TransferTask {
  int64_t request_id = 0;
  int64_t tokens = 0;
  TransferKind kind = TransferKind::KvMigration;
  // State the request resumes in on the destination once the transfer lands.
  RequestState resume_state = RequestState::Decoding;
};

struct InstanceStats {
  int64_t kv_used_tokens = 0;
  double token_interval_ema_ms = 0.0;
  TimeUs last_token_time = -1;
  TimeUs busy_us = 0;
  int64_t steps = 0;
};

struct Instance {
  int id = 0;
  PoolTag pool = PoolTag::P;
  int64_t kv_capacity_tokens = 0;
  int64_t token_budget = 0;

  std::deque<int64_t> encode_queue;   // request ids awaiting encode
  std::deque<int64_t> prefill_queue;  // request ids awaiting/continuing prefill
  std::vector<int64_t> decode_set;    // resident decode request ids, ordered
  std::deque<TransferTask> migration_queue;  // FIFO

  InstanceStats stats;
  bool healthy = true;
  bool stepping = false;
  TimeUs cooldown_until = 0;
  TimeUs idle_since = 0;
  bool idle_marked = false;
  TimeUs recover_at = 0;

  bool has_work() const {
    return !encode_queue.empty() || !prefill_queue.empty() ||
           !decode_set.empty() || !migration_queue.empty();
  }
};

// Tokens currently being decoded (resident KV of the running decode batch).
int64_t running_tokens(const Instance& inst, const std::vector<Request>& requests);

// Whole-prompt tokens still waiting in the prefill queue.
int64_t queued_prefill_tokens(const Instance& inst,
                              const std::vector<Request>& requests);

// One iteration's worth of work for an instance.
struct PrefillChunk {
  int64_t request_id = 0;
  int64_t context_tokens = 0;
  int64_t chunk_tokens = 0;
};

struct Batch {
  std::vector<int64_t> decode_ids;
  std::vector<PrefillChunk> chunks;
  std::vector<int64_t> encode_ids;

  bool empty() const {
    return decode_ids.empty() && chunks.empty() && encode_ids.empty();
  }
};

}  // namespace servesim
