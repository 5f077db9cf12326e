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
#include <vector>

#include "servesim/common.h"

namespace servesim {

struct Hypothesis {
  int slot_id = 0;
  std::vector<int> token_ids;
  double cum_log_prob = 0.0;
  // (token_id, log_prob) sorted strictly descending by log_prob.
  std::vector<std::pair<int, double>> expansions;
};

struct BeamCandidate {
  int parent_index = 0;
  int expansion_index = 0;
  double total_log_prob = 0.0;

  bool operator==(const BeamCandidate&) const = default;
};

struct BeamExpandResult {
  std::vector<BeamCandidate> selected;  // sorted descending by total_log_prob
  int64_t inspected = 0;                // expansions actually examined
};

// Min-heap partial selection over beam_width * top_k candidates. Expansions
// of each hypothesis are scanned in descending order; the scan stops as soon
// as a candidate cannot beat the current heap minimum. Ties break by
// (parent_index, expansion_index) ascending.
BeamExpandResult expand_beam(const std::vector<Hypothesis>& hypotheses,
                             int beam_width);

// Full enumeration + sort; the test oracle for expand_beam.
BeamExpandResult brute_force_topk(const std::vector<Hypothesis>& hypotheses,
                                  int beam_width);

constexpr double kInvalidLogitPenalty = -1e9;

std::vector<double> make_valid_mask(size_t vocab,
                                    const std::vector<int>& valid_ids);

std::vector<double> apply_valid_mask(const std::vector<double>& logits,
                                     const std::vector<double>& mask);

// In-place slot reuse: the selected candidates overwrite the hypothesis
// storage without allocating new slots. Two-phase (stage, then swap) so a
// parent replaced by a sibling's child never aliases mid-copy.
void commit_beam(const std::vector<BeamCandidate>& selected,
                 std::vector<Hypothesis>& storage);

}  // namespace servesim
