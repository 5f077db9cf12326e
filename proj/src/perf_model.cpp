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

#include "servesim/perf_model.h"

#include <algorithm>
#include <cmath>

namespace servesim {

void ModelProfile::validate() const {
  auto nonneg = [](double v, const char* name) {
    if (v < 0.0) throw InvalidConfig(std::string(name) + " must be >= 0");
  };
  nonneg(prefill_a, "prefill_a");
  nonneg(prefill_b, "prefill_b");
  nonneg(prefill_c, "prefill_c");
  nonneg(decode_alpha, "decode_alpha");
  nonneg(decode_beta, "decode_beta");
  nonneg(encode_per_image_ms, "encode_per_image_ms");
  nonneg(launch_overhead_ms, "launch_overhead_ms");
  nonneg(launch_overhead_graph_ms, "launch_overhead_graph_ms");
  nonneg(sched_overhead_ms, "sched_overhead_ms");
  nonneg(attn_gamma_us_per_token_layer, "attn_gamma_us_per_token_layer");
  if (launch_overhead_graph_ms > launch_overhead_ms) {
    throw InvalidConfig("launch_overhead_graph_ms must be <= launch_overhead_ms");
  }
  if (num_layers < 1) throw InvalidConfig("num_layers must be >= 1");
  if (mtp_draft_len < 0) throw InvalidConfig("mtp_draft_len must be >= 0");
  if (mtp_accept_prob < 0.0 || mtp_accept_prob > 1.0) {
    throw InvalidConfig("mtp_accept_prob must be in [0, 1]");
  }
}

ModelProfile ModelProfile::from_json(const nlohmann::json& j) {
  ModelProfile p;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("prefill_a", p.prefill_a);
  get("prefill_b", p.prefill_b);
  get("prefill_c", p.prefill_c);
  get("decode_alpha", p.decode_alpha);
  get("decode_beta", p.decode_beta);
  get("encode_per_image_ms", p.encode_per_image_ms);
  get("launch_overhead_ms", p.launch_overhead_ms);
  get("launch_overhead_graph_ms", p.launch_overhead_graph_ms);
  get("sched_overhead_ms", p.sched_overhead_ms);
  get("num_layers", p.num_layers);
  get("mtp_draft_len", p.mtp_draft_len);
  get("mtp_accept_prob", p.mtp_accept_prob);
  get("attn_gamma_us_per_token_layer", p.attn_gamma_us_per_token_layer);
  p.validate();
  return p;
}

nlohmann::json ModelProfile::to_json() const {
  return nlohmann::json{
      {"prefill_a", prefill_a},
      {"prefill_b", prefill_b},
      {"prefill_c", prefill_c},
      {"decode_alpha", decode_alpha},
      {"decode_beta", decode_beta},
      {"encode_per_image_ms", encode_per_image_ms},
      {"launch_overhead_ms", launch_overhead_ms},
      {"launch_overhead_graph_ms", launch_overhead_graph_ms},
      {"sched_overhead_ms", sched_overhead_ms},
      {"num_layers", num_layers},
      {"mtp_draft_len", mtp_draft_len},
      {"mtp_accept_prob", mtp_accept_prob},
      {"attn_gamma_us_per_token_layer", attn_gamma_us_per_token_layer}};
}

double estimate_prefill_time(int64_t input_tokens, const ModelProfile& p) {
  double l = static_cast<double>(input_tokens);
  return p.prefill_a * l * l + p.prefill_b * l + p.prefill_c;
}

double estimate_chunk_time(int64_t context_tokens, int64_t chunk_tokens,
                           const ModelProfile& p) {
  double k = static_cast<double>(context_tokens);
  double s = static_cast<double>(chunk_tokens);
  return p.prefill_a * (s * s + 2.0 * k * s) + p.prefill_b * s;
}

double estimate_decode_step_time(int64_t batch_tokens, int64_t kv_total_tokens,
                                 const ModelProfile& p, bool graph_mode) {
  if (batch_tokens <= 0) throw InvalidBatch("decode batch must be non-empty");
  double compute = p.decode_alpha * static_cast<double>(batch_tokens);
  double memory = p.decode_beta * static_cast<double>(kv_total_tokens);
  double launch = graph_mode ? p.launch_overhead_graph_ms : p.launch_overhead_ms;
  return std::max(compute, memory) + launch;
}

double estimate_encode_time(int64_t image_units, const ModelProfile& p) {
  return static_cast<double>(image_units) * p.encode_per_image_ms;
}

double expected_tokens_per_step(int draft_len, double accept_prob) {
  if (accept_prob >= 1.0) return static_cast<double>(draft_len + 1);
  double sum = 0.0;
  double term = 1.0;
  for (int k = 0; k <= draft_len; ++k) {
    sum += term;
    term *= accept_prob;
  }
  return sum;
}

}  // namespace servesim
