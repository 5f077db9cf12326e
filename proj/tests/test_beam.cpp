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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>
#include <vector>

#include "servesim/beam.h"
#include "servesim/rng.h"

using namespace servesim;

namespace {

Hypothesis make_hyp(int slot, double cum, std::vector<double> log_probs) {
  Hypothesis h;
  h.slot_id = slot;
  h.cum_log_prob = cum;
  std::sort(log_probs.rbegin(), log_probs.rend());
  int tok = slot * 1000;
  for (double lp : log_probs) h.expansions.emplace_back(tok++, lp);
  return h;
}

std::vector<Hypothesis> random_instance(Rng& rng, int* beam_width) {
  int n = static_cast<int>(rng.uniform_int(1, 16));
  int top_k = static_cast<int>(rng.uniform_int(1, 16));
  *beam_width = static_cast<int>(rng.uniform_int(1, 16));
  std::vector<Hypothesis> hyps;
  for (int i = 0; i < n; ++i) {
    std::vector<double> lps;
    for (int k = 0; k < top_k; ++k) {
      // Coarse grid so ties actually happen and exercise the tie-break.
      lps.push_back(-0.5 * static_cast<double>(rng.uniform_int(0, 8)));
    }
    hyps.push_back(make_hyp(i, -0.5 * double(rng.uniform_int(0, 6)), lps));
  }
  return hyps;
}

}  // namespace

TEST_CASE("beam width one reduces to the global argmax") {
  std::vector<Hypothesis> hyps;
  hyps.push_back(make_hyp(0, -1.0, {-0.5, -2.0}));
  hyps.push_back(make_hyp(1, 0.0, {-0.3, -4.0}));
  BeamExpandResult r = expand_beam(hyps, 1);
  REQUIRE(r.selected.size() == 1);
  CHECK(r.selected[0].parent_index == 1);
  CHECK(r.selected[0].expansion_index == 0);
  CHECK(r.selected[0].total_log_prob == doctest::Approx(-0.3));
}

TEST_CASE("skewed pair prunes the hopeless branch") {
  std::vector<Hypothesis> hyps;
  hyps.push_back(make_hyp(0, 0.0, {-0.1, -5.0}));
  hyps.push_back(make_hyp(1, -1.0, {-0.1, -5.0}));
  BeamExpandResult r = expand_beam(hyps, 2);
  BeamExpandResult oracle = brute_force_topk(hyps, 2);
  REQUIRE(r.selected.size() == 2);
  CHECK(r.selected == oracle.selected);
  CHECK(r.selected[0].total_log_prob == doctest::Approx(-0.1));
  CHECK(r.selected[1].total_log_prob == doctest::Approx(-1.1));
  // Brute force looks at all 4 candidates; the -6.0 branch is never entered.
  CHECK(r.inspected < 4);
}

TEST_CASE("empty hypothesis set yields an empty beam") {
  CHECK(expand_beam({}, 4).selected.empty());
}

TEST_CASE("oracle equivalence over 1000 random instances") {
  Rng rng(1234);
  int strictly_fewer = 0;
  for (int it = 0; it < 1000; ++it) {
    int bw = 0;
    std::vector<Hypothesis> hyps = random_instance(rng, &bw);
    BeamExpandResult fast = expand_beam(hyps, bw);
    BeamExpandResult oracle = brute_force_topk(hyps, bw);
    REQUIRE(fast.selected.size() == oracle.selected.size());
    // Sequence equality pins both the set and the declared tie-break.
    CHECK(fast.selected == oracle.selected);
    int64_t total = 0;
    for (const auto& h : hyps) total += static_cast<int64_t>(h.expansions.size());
    CHECK(fast.inspected <= total);
    if (fast.inspected < total) ++strictly_fewer;
    for (size_t i = 1; i < fast.selected.size(); ++i) {
      CHECK(fast.selected[i - 1].total_log_prob >=
            fast.selected[i].total_log_prob);
    }
  }
  CHECK(strictly_fewer > 0);
}

TEST_CASE("valid mask arithmetic") {
  std::vector<double> mask = make_valid_mask(3, {0, 2});
  std::vector<double> masked = apply_valid_mask({1.0, 9.0, 2.0}, mask);
  CHECK(masked[0] == doctest::Approx(1.0));
  CHECK(masked[1] == doctest::Approx(9.0 + kInvalidLogitPenalty));
  CHECK(masked[2] == doctest::Approx(2.0));
  // Top-2 of the masked logits is exactly the valid set, best first.
  std::vector<int> order{0, 1, 2};
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return masked[a] > masked[b]; });
  CHECK(order[0] == 2);
  CHECK(order[1] == 0);
}

TEST_CASE("identity mask changes nothing") {
  std::vector<double> mask = make_valid_mask(3, {0, 1, 2});
  std::vector<double> logits{0.5, -2.0, 3.0};
  CHECK(apply_valid_mask(logits, mask) == logits);
}

TEST_CASE("fully invalid vocabulary still has a defined argmax") {
  std::vector<double> mask = make_valid_mask(3, {});
  std::vector<double> masked = apply_valid_mask({1.0, 9.0, 2.0}, mask);
  auto best = std::max_element(masked.begin(), masked.end());
  CHECK(best - masked.begin() == 1);  // degenerate: raw order decides
  CHECK(*best <= kInvalidLogitPenalty + 9.0 + 1e-6);
}

TEST_CASE("length mismatch is rejected") {
  CHECK_THROWS_AS(apply_valid_mask({1.0}, make_valid_mask(2, {0})), SimError);
}

TEST_CASE("masked argmax restricted to valid ids matches raw argmax") {
  Rng rng(88);
  for (int it = 0; it < 200; ++it) {
    size_t vocab = static_cast<size_t>(rng.uniform_int(2, 32));
    std::vector<double> logits;
    for (size_t v = 0; v < vocab; ++v) logits.push_back(rng.uniform(-5.0, 5.0));
    std::vector<int> valid;
    for (size_t v = 0; v < vocab; ++v) {
      if (rng.uniform() < 0.5) valid.push_back(static_cast<int>(v));
    }
    if (valid.empty()) continue;
    std::vector<double> masked =
        apply_valid_mask(logits, make_valid_mask(vocab, valid));
    int masked_arg =
        static_cast<int>(std::max_element(masked.begin(), masked.end()) -
                         masked.begin());
    int raw_arg = valid[0];
    for (int v : valid) {
      if (logits[v] > logits[raw_arg]) raw_arg = v;
    }
    CHECK(masked_arg == raw_arg);
  }
}

TEST_CASE("commit reuses slots across steps") {
  Rng rng(5);
  std::vector<Hypothesis> beam;
  for (int i = 0; i < 4; ++i) beam.push_back(make_hyp(i, 0.0, {}));
  std::set<int> slots_before;
  for (const auto& h : beam) slots_before.insert(h.slot_id);
  for (int step = 0; step < 3; ++step) {
    for (auto& h : beam) {
      h.expansions.clear();
      std::vector<double> lps;
      for (int k = 0; k < 4; ++k) lps.push_back(rng.uniform(-3.0, 0.0));
      std::sort(lps.rbegin(), lps.rend());
      int tok = 10 * step;
      for (double lp : lps) h.expansions.emplace_back(tok++, lp);
    }
    BeamExpandResult r = expand_beam(beam, 4);
    commit_beam(r.selected, beam);
    std::set<int> slots_after;
    for (const auto& h : beam) slots_after.insert(h.slot_id);
    CHECK(slots_after == slots_before);
    for (const auto& h : beam) {
      CHECK(h.token_ids.size() == static_cast<size_t>(step + 1));
    }
  }
}

TEST_CASE("surviving parent extends in place") {
  std::vector<Hypothesis> beam;
  beam.push_back(make_hyp(0, -0.5, {}));
  beam[0].token_ids = {7};
  beam[0].expansions = {{42, -0.1}};
  BeamExpandResult r = expand_beam(beam, 1);
  commit_beam(r.selected, beam);
  CHECK(beam[0].token_ids == std::vector<int>{7, 42});
  CHECK(beam[0].cum_log_prob == doctest::Approx(-0.6));
}

TEST_CASE("parent replaced by a sibling's child is fully overwritten") {
  std::vector<Hypothesis> beam;
  beam.push_back(make_hyp(0, 0.0, {}));
  beam.push_back(make_hyp(1, -10.0, {}));
  beam[0].token_ids = {1, 2};
  beam[1].token_ids = {9, 9};
  beam[0].expansions = {{100, -0.1}, {101, -0.2}};
  beam[1].expansions = {{200, -0.1}};
  BeamExpandResult r = expand_beam(beam, 2);
  // Both winners descend from parent 0; slot 1's old content must vanish.
  REQUIRE(r.selected.size() == 2);
  CHECK(r.selected[0].parent_index == 0);
  CHECK(r.selected[1].parent_index == 0);
  commit_beam(r.selected, beam);
  CHECK(beam[0].token_ids == std::vector<int>{1, 2, 100});
  CHECK(beam[1].token_ids == std::vector<int>{1, 2, 101});
  CHECK(beam[1].cum_log_prob == doctest::Approx(-0.2));
}
