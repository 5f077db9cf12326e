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
#include <cmath>
#include <map>
#include <numeric>
#include <thread>
#include <vector>

#include "servesim/balance.h"
#include "servesim/rng.h"

using namespace servesim;

namespace {

DPGroup make_group(int id, int64_t capacity, std::vector<int64_t> seqs) {
  DPGroup g;
  g.id = id;
  g.kv_capacity_tokens = capacity;
  if (!seqs.empty()) {
    DPBatch b;
    b.seq_tokens = std::move(seqs);
    g.batches.push_back(std::move(b));
  }
  return g;
}

int64_t gap(const std::vector<DPGroup>& groups) {
  int64_t lo = std::numeric_limits<int64_t>::max(), hi = 0;
  for (const auto& g : groups) {
    lo = std::min(lo, g.token_load());
    hi = std::max(hi, g.token_load());
  }
  return hi - lo;
}

}  // namespace

TEST_CASE("dp assignment picks most available space, ties by id") {
  std::vector<DPGroup> groups;
  groups.push_back(make_group(0, 100, {}));
  groups.push_back(make_group(1, 300, {}));
  groups.push_back(make_group(2, 200, {}));
  CHECK(assign_dp_group(50, groups) == 1);

  std::vector<DPGroup> tie;
  tie.push_back(make_group(0, 300, {}));
  tie.push_back(make_group(1, 300, {}));
  CHECK(assign_dp_group(50, tie) == 0);

  std::vector<DPGroup> full;
  full.push_back(make_group(0, 10, {{10}}));
  CHECK(assign_dp_group(50, full) == -1);  // queued by the caller
}

TEST_CASE("batch migration halves a 30k/10k imbalance exactly") {
  ModelProfile profile;
  std::vector<DPGroup> groups;
  groups.push_back(make_group(0, 100000, {}));
  groups[0].batches.push_back(DPBatch{{10000}});
  groups[0].batches.push_back(DPBatch{{12000, 8000}});
  groups.push_back(make_group(1, 100000, {{10000}}));
  auto plans = plan_migration(groups, 1000, profile);
  int64_t moved = 0;
  for (const auto& p : plans) {
    CHECK(p.moved_tokens > 0);
    CHECK(p.src != p.dst);
    moved += p.moved_tokens;
  }
  CHECK(moved == 10000);
  CHECK(groups[0].token_load() == 20000);
  CHECK(groups[1].token_load() == 20000);
}

TEST_CASE("balancing 20k of gap is worth about 600 microseconds") {
  ModelProfile profile;  // 61 layers, gamma 9.84e-4 us per token-layer
  std::vector<DPGroup> groups;
  groups.push_back(make_group(0, 100000, {}));
  groups[0].batches.push_back(DPBatch{{10000}});
  groups[0].batches.push_back(DPBatch{{20000}});
  groups.push_back(make_group(1, 100000, {{10000}}));
  auto plans = plan_migration(groups, 1000, profile);
  double saving = 0.0;
  for (const auto& p : plans) saving += p.est_saving_us;
  CHECK(saving == doctest::Approx(600.0).epsilon(0.01));
}

TEST_CASE("equal loads produce an empty plan") {
  ModelProfile profile;
  std::vector<DPGroup> groups;
  groups.push_back(make_group(0, 100000, {{5000}}));
  groups.push_back(make_group(1, 100000, {{5000}}));
  CHECK(plan_migration(groups, 1000, profile).empty());
}

TEST_CASE("mla slicing drains a single long sequence") {
  ModelProfile profile;
  std::vector<DPGroup> groups;
  groups.push_back(make_group(0, 100000, {{32000}}));
  groups.push_back(make_group(1, 100000, {}));
  auto plans = plan_migration(groups, 1000, profile);
  REQUIRE(!plans.empty());
  bool any_block = false;
  for (const auto& p : plans) {
    if (p.granularity == MigrationGranularity::MLABlock) {
      any_block = true;
      CHECK(p.moved_tokens % 16 == 0);
    }
  }
  CHECK(any_block);
  CHECK(gap(groups) <= 1000);
}

TEST_CASE("migration never overshoots and terminates under threshold") {
  Rng rng(99);
  ModelProfile profile;
  for (int it = 0; it < 100; ++it) {
    std::vector<DPGroup> groups;
    int n = static_cast<int>(rng.uniform_int(2, 5));
    for (int g = 0; g < n; ++g) {
      std::vector<int64_t> seqs;
      int k = static_cast<int>(rng.uniform_int(0, 6));
      for (int s = 0; s < k; ++s) seqs.push_back(rng.uniform_int(1, 8000));
      groups.push_back(make_group(g, 1 << 20, std::move(seqs)));
    }
    int64_t before = gap(groups);
    int64_t threshold = rng.uniform_int(64, 4096);
    auto plans = plan_migration(groups, threshold, profile);
    int64_t after = gap(groups);
    CHECK(after <= std::max(before, threshold));
    // Either balanced below the threshold or nothing movable remained.
    if (after > threshold) {
      bool movable = false;
      for (const auto& g : groups) {
        if (g.token_load() > after / 2 && !g.batches.empty()) movable = true;
      }
      (void)movable;  // termination is the property; progress was checked above
    }
    for (const auto& p : plans) CHECK(p.moved_tokens > 0);
  }
}

TEST_CASE("32k over 24 cores caps at 1366 tokens per core") {
  auto assignment = split_kernel_load({32768}, 24);
  CHECK(max_core_load(assignment) == 1366);
  CHECK(max_core_load(assignment) == (32768 + 23) / 24);
}

TEST_CASE("equal short sequences need no split") {
  auto assignment = split_kernel_load({5, 5, 5, 5}, 4);
  CHECK(assignment.size() == 4);
  CHECK(max_core_load(assignment) == 5);
}

TEST_CASE("a dominant sequence is split to the optimal bound") {
  auto assignment = split_kernel_load({10, 1, 1}, 3);
  CHECK(max_core_load(assignment) == 4);  // ceil(12/3)
}

TEST_CASE("split always reaches ceil(total/cores) and covers every token") {
  Rng rng(31337);
  for (int it = 0; it < 500; ++it) {
    int cores = static_cast<int>(rng.uniform_int(1, 32));
    int n = static_cast<int>(rng.uniform_int(1, 12));
    std::vector<int64_t> seqs;
    int64_t total = 0;
    for (int i = 0; i < n; ++i) {
      seqs.push_back(rng.uniform_int(1, 40000));
      total += seqs.back();
    }
    auto assignment = split_kernel_load(seqs, cores);
    CHECK(max_core_load(assignment) == (total + cores - 1) / cores);
    std::vector<int64_t> per_seq(seqs.size(), 0);
    int64_t assigned = 0;
    for (const auto& core : assignment) {
      for (const auto& slice : core) {
        CHECK(slice.tokens > 0);
        per_seq[slice.seq_index] += slice.tokens;
        assigned += slice.tokens;
      }
    }
    CHECK(assigned == total);
    for (size_t i = 0; i < seqs.size(); ++i) CHECK(per_seq[i] == seqs[i]);
  }
}

TEST_CASE("expert load tracker accumulates and resets per window") {
  ExpertLoadTracker tracker(4);
  CHECK(tracker.loads() == std::vector<double>{0, 0, 0, 0});
  tracker.record(0, 100.0);
  CHECK(tracker.loads()[0] == doctest::Approx(100.0));
  auto w = tracker.take_window();
  CHECK(w[0] == doctest::Approx(100.0));
  CHECK(tracker.loads() == std::vector<double>{0, 0, 0, 0});
}

TEST_CASE("replicating the hot expert drops max device load 100 to 60") {
  std::vector<double> loads{100.0, 10.0, 10.0};
  RoutingTable before = initial_placement(3, 3);
  auto dev_before = before.device_loads(loads, 3);
  CHECK(*std::max_element(dev_before.begin(), dev_before.end()) ==
        doctest::Approx(100.0));
  RoutingTable after = eplb_plan(loads, 3, 1);
  auto dev_after = after.device_loads(loads, 3);
  CHECK(*std::max_element(dev_after.begin(), dev_after.end()) ==
        doctest::Approx(60.0));  // 50 replicated + 10 colocated
  CHECK(after.experts[0].size() == 2);
  double wsum = 0.0;
  for (const auto& r : after.experts[0]) wsum += r.weight;
  CHECK(wsum == doctest::Approx(1.0));
}

TEST_CASE("uniform loads never get worse") {
  std::vector<double> loads{50.0, 50.0, 50.0};
  RoutingTable t = eplb_plan(loads, 3, 2);
  auto dev = t.device_loads(loads, 3);
  CHECK(*std::max_element(dev.begin(), dev.end()) <= 50.0 + 1e-9);
}

TEST_CASE("zero budget leaves the placement untouched") {
  std::vector<double> loads{7.0, 3.0};
  RoutingTable t = eplb_plan(loads, 2, 0);
  RoutingTable init = initial_placement(2, 2);
  CHECK(t.experts.size() == init.experts.size());
  for (size_t e = 0; e < t.experts.size(); ++e) {
    CHECK(t.experts[e].size() == 1);
    CHECK(t.experts[e][0].device == init.experts[e][0].device);
  }
}

namespace {

// Exhaustive optimum over all replica placements within budget, equal split.
double brute_force_eplb(const std::vector<double>& loads, int devices,
                        int budget) {
  int experts = static_cast<int>(loads.size());
  double best = 1e300;
  // Each added replica is an (expert, device) choice; enumerate multisets of
  // size 0..budget.
  std::vector<std::pair<int, int>> adds;
  std::function<void(int)> rec = [&](int start) {
    RoutingTable t = initial_placement(experts, devices);
    for (auto [e, d] : adds) t.experts[e].push_back(ExpertReplica{d, 1.0});
    for (auto& reps : t.experts) {
      double w = 1.0 / static_cast<double>(reps.size());
      for (auto& r : reps) r.weight = w;
    }
    auto dev = t.device_loads(loads, devices);
    best = std::min(best, *std::max_element(dev.begin(), dev.end()));
    if (static_cast<int>(adds.size()) == budget) return;
    for (int c = start; c < experts * devices; ++c) {
      adds.emplace_back(c / devices, c % devices);
      rec(c);
      adds.pop_back();
    }
  };
  rec(0);
  return best;
}

}  // namespace

TEST_CASE("greedy matches the exhaustive optimum on small instances") {
  Rng rng(404);
  for (int it = 0; it < 60; ++it) {
    int experts = static_cast<int>(rng.uniform_int(1, 4));
    int devices = static_cast<int>(rng.uniform_int(1, 3));
    int budget = static_cast<int>(rng.uniform_int(0, 2));
    std::vector<double> loads;
    for (int e = 0; e < experts; ++e) {
      loads.push_back(static_cast<double>(rng.uniform_int(0, 100)));
    }
    RoutingTable t = eplb_plan(loads, devices, budget);
    auto dev = t.device_loads(loads, devices);
    double greedy = *std::max_element(dev.begin(), dev.end());
    double optimum = brute_force_eplb(loads, devices, budget);
    CHECK(greedy <= optimum + 1e-9);  // can never beat the optimum
    CHECK(greedy == doctest::Approx(optimum).epsilon(1e-9));
  }
}

TEST_CASE("double buffer switches only when every worker is ready") {
  DoubleBuffer buf(initial_placement(2, 2), 3);
  uint64_t v0 = buf.active_version();
  RoutingTable staged = initial_placement(2, 2);
  staged.experts[0].push_back(ExpertReplica{1, 0.5});
  buf.stage(staged);
  buf.set_worker_ready(0);
  buf.set_worker_ready(1);
  CHECK(!buf.try_commit());
  CHECK(buf.active_version() == v0);
  buf.set_worker_ready(2);
  CHECK(buf.try_commit());
  CHECK(buf.active_version() == v0 + 1);
  CHECK(buf.read()->experts[0].size() == 2);
}

TEST_CASE("readers never observe a mixed table under interleaving") {
  DoubleBuffer buf(initial_placement(4, 2), 2);
  std::atomic<bool> stop{false};
  std::atomic<bool> mixed{false};
  std::map<uint64_t, uint64_t> version_hash;
  std::mutex mu;

  auto reader = [&] {
    uint64_t last_version = 0;
    while (!stop.load()) {
      auto t = buf.read();
      uint64_t h = t->content_hash();
      CHECK(t->version >= last_version);
      last_version = t->version;
      std::lock_guard<std::mutex> lock(mu);
      auto [it, inserted] = version_hash.emplace(t->version, h);
      if (!inserted && it->second != h) mixed.store(true);
    }
  };
  std::thread r1(reader), r2(reader), r3(reader);
  for (int i = 0; i < 200; ++i) {
    RoutingTable t = initial_placement(4, 2);
    t.experts[i % 4].push_back(ExpertReplica{(i / 4) % 2, 0.5});
    buf.stage(t);
    buf.set_worker_ready(0);
    buf.set_worker_ready(1);
    CHECK(buf.try_commit());
  }
  stop.store(true);
  r1.join();
  r2.join();
  r3.join();
  CHECK(!mixed.load());
}
