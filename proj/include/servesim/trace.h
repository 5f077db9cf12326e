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
#include <vector>

#include <json.hpp>

#include "servesim/request.h"

namespace servesim {

struct TraceRecord {
  double arrival_ms = 0.0;
  RequestClass cls = RequestClass::Online;
  Modality modality = Modality::Text;
  int64_t input_tokens = 1;
  int64_t image_units = 0;
  int64_t output_tokens = 1;
  double slo_ttft_ms = 2000.0;
  double slo_tpot_ms = 100.0;

  bool operator==(const TraceRecord&) const = default;
};

struct LengthDist {
  enum class Kind { Fixed, Uniform, Lognormal } kind = Kind::Fixed;
  int64_t fixed_n = 128;
  int64_t uniform_lo = 1, uniform_hi = 1024;
  double log_mu = 6.0, log_sigma = 0.8;
  int64_t log_cap = 8192;

  static LengthDist from_json(const nlohmann::json& j);
};

struct BurstConfig {
  bool enabled = false;
  double high_rate_rps = 0.0;
  double low_rate_rps = 0.0;
  double mean_dwell_ms = 0.0;
};

struct TraceConfig {
  uint64_t seed = 0;
  int64_t count = 0;
  double rate_rps = 1.0;
  BurstConfig burst;
  LengthDist input_dist;
  LengthDist output_dist;
  double offline_fraction = 0.0;
  double multimodal_fraction = 0.0;
  LengthDist image_dist;  // image units for multimodal requests
  double slo_ttft_ms = 2000.0;
  double slo_tpot_ms = 100.0;

  void validate() const;
  static TraceConfig from_json(const nlohmann::json& j);
};

// Deterministic for a fixed config: arrivals from a (two-state modulated)
// Poisson process, lengths i.i.d. from the configured distributions.
std::vector<TraceRecord> gen_trace(const TraceConfig& config);

std::vector<TraceRecord> load_trace_csv(const std::string& path);
void save_trace_csv(const std::string& path, const std::vector<TraceRecord>& trace);

std::vector<Request> requests_from_trace(const std::vector<TraceRecord>& trace);

}  // namespace servesim
