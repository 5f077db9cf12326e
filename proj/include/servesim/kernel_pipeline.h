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

#include <json.hpp>

#include "servesim/common.h"

namespace servesim {

enum class UnitKind { Cube, Vector };

struct OperatorWorkload {
  UnitKind kind = UnitKind::Cube;
  double work = 1.0;
};

struct AllocatorConfig {
  double gamma_cube = 1.0;    // peak work per unit time, matrix units
  double gamma_vector = 1.0;  // peak work per unit time, vector units
  int n_cube = 1;
  int n_vector = 1;

  void validate() const;
};

struct UnitAllocation {
  std::vector<int> cube_units;    // units per cube operator
  std::vector<int> vector_units;  // units per vector operator
  double achieved_loss = 0.0;
};

// Minimize the spread of operator completion times: max T minus min T over all
// operators, where T = W / (gamma * units). With both classes non-empty this
// upper-bounds the max pairwise cube/vector difference; a single-class input
// still gets a total, well-defined objective. Exact enumeration when the
// integer search space is small enough, otherwise proportional rounding plus
// single-unit hill climbing.
UnitAllocation allocate_units(const std::vector<OperatorWorkload>& cube_ops,
                              const std::vector<OperatorWorkload>& vector_ops,
                              const AllocatorConfig& config);

double alignment_loss(const std::vector<OperatorWorkload>& cube_ops,
                      const std::vector<OperatorWorkload>& vector_ops,
                      const std::vector<int>& cube_units,
                      const std::vector<int>& vector_units,
                      const AllocatorConfig& config);

struct OverlapProfile {
  double comm_single_ms = 9.3;
  double comm_dual_ms = 12.4;
  double compute_single_ms = 13.0;
  double compute_dual_ms = 17.0;
  double overlap_ratio = 0.8;
  int num_layers = 61;

  void validate() const;
  static OverlapProfile from_json(const nlohmann::json& j);
};

struct DualStreamEstimate {
  double exposed_ms = 0.0;
  double saved_per_layer_ms = 0.0;
  double total_saved_ms = 0.0;
};

// Per-layer accounting of what dual-stream micro-batch pipelining saves:
// exposed = comm_dual * (1 - ratio); saved = comm_single - exposed - extra
// compute. Negative savings are reported as-is.
DualStreamEstimate dual_stream_estimate(const OverlapProfile& profile);

}  // namespace servesim
