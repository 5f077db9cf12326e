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

#include "servesim/beam.h"

#include <algorithm>
#include <queue>

namespace servesim {

namespace {

// Descending result order: higher total first, ties by (parent, expansion)
// ascending.
bool result_before(const BeamCandidate& a, const BeamCandidate& b) {
  if (a.total_log_prob != b.total_log_prob) {
    return a.total_log_prob > b.total_log_prob;
  }
  if (a.parent_index != b.parent_index) return a.parent_index < b.parent_index;
  return a.expansion_index < b.expansion_index;
}

// "Worse" ordering for the min-heap: lower total is worse; among equals the
// later (parent, expansion) is worse, since the earlier index wins ties.
bool worse(const BeamCandidate& a, const BeamCandidate& b) {
  if (a.total_log_prob != b.total_log_prob) {
    return a.total_log_prob < b.total_log_prob;
  }
  if (a.parent_index != b.parent_index) return a.parent_index > b.parent_index;
  return a.expansion_index > b.expansion_index;
}

}  // namespace

BeamExpandResult expand_beam(const std::vector<Hypothesis>& hypotheses,
                             int beam_width) {
  BeamExpandResult result;
  if (hypotheses.empty() || beam_width <= 0) return result;

  // priority_queue pops the max under the comparator, so invert `worse` to
  // keep the worst candidate on top.
  auto cmp = [](const BeamCandidate& a, const BeamCandidate& b) {
    return worse(b, a);
  };
  std::priority_queue<BeamCandidate, std::vector<BeamCandidate>, decltype(cmp)>
      heap(cmp);

  for (size_t p = 0; p < hypotheses.size(); ++p) {
    const auto& hyp = hypotheses[p];
    for (size_t e = 0; e < hyp.expansions.size(); ++e) {
      BeamCandidate cand{static_cast<int>(p), static_cast<int>(e),
                         hyp.cum_log_prob + hyp.expansions[e].second};
      if (static_cast<int>(heap.size()) == beam_width &&
          cand.total_log_prob <= heap.top().total_log_prob) {
        // Expansions are sorted descending, so nothing later in this
        // hypothesis can enter the current optimal set either.
        break;
      }
      ++result.inspected;
      if (static_cast<int>(heap.size()) < beam_width) {
        heap.push(cand);
      } else {
        heap.pop();
        heap.push(cand);
      }
    }
  }

  result.selected.reserve(heap.size());
  while (!heap.empty()) {
    result.selected.push_back(heap.top());
    heap.pop();
  }
  std::sort(result.selected.begin(), result.selected.end(), result_before);
  return result;
}

BeamExpandResult brute_force_topk(const std::vector<Hypothesis>& hypotheses,
                                  int beam_width) {
  BeamExpandResult result;
  if (hypotheses.empty() || beam_width <= 0) return result;
  std::vector<BeamCandidate> all;
  for (size_t p = 0; p < hypotheses.size(); ++p) {
    const auto& hyp = hypotheses[p];
    for (size_t e = 0; e < hyp.expansions.size(); ++e) {
      all.push_back(BeamCandidate{static_cast<int>(p), static_cast<int>(e),
                                  hyp.cum_log_prob + hyp.expansions[e].second});
    }
  }
  result.inspected = static_cast<int64_t>(all.size());
  std::sort(all.begin(), all.end(), result_before);
  if (static_cast<int>(all.size()) > beam_width) all.resize(beam_width);
  result.selected = std::move(all);
  return result;
}

std::vector<double> make_valid_mask(size_t vocab,
                                    const std::vector<int>& valid_ids) {
  std::vector<double> mask(vocab, kInvalidLogitPenalty);
  for (int id : valid_ids) mask.at(id) = 0.0;
  return mask;
}

std::vector<double> apply_valid_mask(const std::vector<double>& logits,
                                     const std::vector<double>& mask) {
  if (logits.size() != mask.size()) {
    throw SimError("logits/mask length mismatch");
  }
  std::vector<double> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] + mask[i];
  return out;
}

void commit_beam(const std::vector<BeamCandidate>& selected,
                 std::vector<Hypothesis>& storage) {
  // Stage the successor sequences first; parents may be overwritten by other
  // slots' children below.
  struct Staged {
    std::vector<int> tokens;
    double cum;
  };
  std::vector<Staged> staged;
  staged.reserve(selected.size());
  for (const auto& cand : selected) {
    const auto& parent = storage.at(cand.parent_index);
    Staged s;
    s.tokens = parent.token_ids;
    s.tokens.push_back(parent.expansions.at(cand.expansion_index).first);
    s.cum = cand.total_log_prob;
    staged.push_back(std::move(s));
  }
  for (size_t i = 0; i < staged.size(); ++i) {
    auto& slot = storage.at(i);
    slot.token_ids = std::move(staged[i].tokens);
    slot.cum_log_prob = staged[i].cum;
    slot.expansions.clear();
  }
}

}  // namespace servesim
