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

#include <string>
#include <vector>

#include "servesim/sim.h"

namespace servesim {

// Nearest-rank percentile on a copy of the samples: rank = ceil(p/100 * n),
// 1-indexed into the ascending order. Returns 0 for empty input.
double percentile_nearest_rank(std::vector<double> samples, double p);

struct ClassMetrics {
  int64_t requests = 0;
  int64_t completed = 0;
  int64_t failed = 0;
  double ttft_p50_ms = 0.0;
  double ttft_p95_ms = 0.0;
  double ttft_p99_ms = 0.0;
  double tpot_mean_ms = 0.0;
  double tpot_p99_ms = 0.0;
  double throughput_tokens_per_s = 0.0;
  double serving_rate_req_s = 0.0;  // completed requests per second
  double goodput_req_s = 0.0;       // completions inside both SLOs per second
  double slo_attainment = 0.0;      // SLO-satisfying fraction of all requests
  bool percentiles_defined = false;  // false when nothing completed
};

struct Report {
  double duration_ms = 0.0;
  ClassMetrics online;
  ClassMetrics offline;
  ClassMetrics total;
  SimCounters counters;
};

Report compute_metrics(const SimResult& result);

enum class ReportFormat { Json, Csv, Table };

ReportFormat report_format_from_string(const std::string& s);

// Deterministic rendering: identical inputs produce byte-identical output.
std::string render_report(const Report& report, ReportFormat format);

}  // namespace servesim
