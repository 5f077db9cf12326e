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

#include "servesim/kvglobal.h"
#include "servesim/rng.h"

using namespace servesim;

namespace {

std::vector<int32_t> make_tokens(int n, int32_t base = 0) {
  std::vector<int32_t> t(n);
  for (int i = 0; i < n; ++i) t[i] = base + i;
  return t;
}

}  // namespace

TEST_CASE("hash chain commits to the whole prefix") {
  auto a = block_hashes(make_tokens(64));
  auto b = block_hashes(make_tokens(64));
  CHECK(a.size() == 4);
  CHECK(a == b);
  auto c_tokens = make_tokens(64);
  c_tokens[20] ^= 1;  // inside block 1
  auto c = block_hashes(c_tokens);
  CHECK(c[0] == a[0]);
  for (size_t i = 1; i < 4; ++i) CHECK(c[i] != a[i]);
  // Partial trailing block produces no hash.
  CHECK(block_hashes(make_tokens(40)).size() == 2);
}

TEST_CASE("prefix match counts whole leading blocks") {
  auto prompt = make_tokens(64);
  std::set<BlockHash> none;
  CHECK(prefix_match(prompt, none) == 0);

  auto hashes = block_hashes(prompt);
  std::set<BlockHash> all(hashes.begin(), hashes.end());
  CHECK(prefix_match(prompt, all) == 64);

  // Only the first 40 tokens are shared: 2 whole blocks match.
  auto other = make_tokens(64);
  for (int i = 40; i < 64; ++i) other[i] += 1000;
  auto cached = block_hashes(other);
  std::set<BlockHash> shared(cached.begin(), cached.end());
  CHECK(prefix_match(prompt, shared) == 32);
}

TEST_CASE("HBM writes go through to DRAM") {
  TieredStore store(64, 128, 256);
  auto h = block_hashes(make_tokens(32));
  store.put_blocks(h, CacheTier::HBM);
  for (BlockHash b : h) {
    CHECK(store.contains(CacheTier::HBM, b));
    CHECK(store.contains(CacheTier::DRAM, b));
  }
}

TEST_CASE("DRAM eviction strips the HBM copy and demotes to SSD") {
  TieredStore store(32, 32, 256);
  auto first = block_hashes(make_tokens(32, 0));
  auto second = block_hashes(make_tokens(32, 1000));
  store.put_blocks(first, CacheTier::HBM);
  store.put_blocks(second, CacheTier::HBM);  // evicts `first` from DRAM
  for (BlockHash b : first) {
    CHECK_FALSE(store.contains(CacheTier::HBM, b));
    CHECK_FALSE(store.contains(CacheTier::DRAM, b));
    CHECK(store.contains(CacheTier::SSD, b));
  }
  for (BlockHash b : second) {
    CHECK(store.contains(CacheTier::HBM, b));
    CHECK(store.contains(CacheTier::DRAM, b));
  }
}

TEST_CASE("SSD hit promotes to DRAM, and to HBM only for compute") {
  TieredStore store(64, 128, 256);
  auto h = block_hashes(make_tokens(16));
  store.put_blocks(h, CacheTier::SSD);
  auto found = store.get_blocks(h, /*for_compute=*/false);
  CHECK(found == h);
  CHECK(store.contains(CacheTier::DRAM, h[0]));
  CHECK_FALSE(store.contains(CacheTier::HBM, h[0]));
  store.get_blocks(h, /*for_compute=*/true);
  CHECK(store.contains(CacheTier::HBM, h[0]));
}

TEST_CASE("undersized tier rejects blocks instead of overflowing") {
  TieredStore store(8, 128, 256);  // HBM cannot hold one 16-token block
  auto h = block_hashes(make_tokens(16));
  store.put_blocks(h, CacheTier::HBM);
  CHECK_FALSE(store.contains(CacheTier::HBM, h[0]));
  CHECK(store.contains(CacheTier::DRAM, h[0]));
  CHECK_THROWS_AS(TieredStore(64, 32, 0), InvalidConfig);
}

TEST_CASE("dropping HBM preserves DRAM; dropping DRAM clears HBM too") {
  TieredStore store(64, 128, 256);
  auto h = block_hashes(make_tokens(32));
  store.put_blocks(h, CacheTier::HBM);
  store.drop_tier(CacheTier::HBM);
  CHECK(store.used_tokens(CacheTier::HBM) == 0);
  CHECK(store.contains(CacheTier::DRAM, h[0]));
  store.put_blocks(h, CacheTier::HBM);
  store.drop_tier(CacheTier::DRAM);
  CHECK(store.used_tokens(CacheTier::HBM) == 0);
  CHECK(store.used_tokens(CacheTier::DRAM) == 0);
}

TEST_CASE("inclusion and capacity hold under random operations") {
  Rng rng(41);
  TieredStore store(4 * 16, 8 * 16, 6 * 16);
  std::vector<std::vector<BlockHash>> chains;
  for (int i = 0; i < 6; ++i) {
    chains.push_back(block_hashes(make_tokens(64, i * 10000)));
  }
  for (int op = 0; op < 5000; ++op) {
    const auto& chain = chains[rng.uniform_int(0, chains.size() - 1)];
    size_t take = static_cast<size_t>(rng.uniform_int(1, chain.size()));
    std::vector<BlockHash> subset(chain.begin(), chain.begin() + take);
    int choice = static_cast<int>(rng.uniform_int(0, 4));
    if (choice == 0) {
      store.put_blocks(subset, CacheTier::HBM);
    } else if (choice == 1) {
      store.put_blocks(subset, CacheTier::DRAM);
    } else if (choice == 2) {
      store.put_blocks(subset, CacheTier::SSD);
    } else if (choice == 3) {
      store.get_blocks(subset, rng.uniform() < 0.5);
    } else {
      store.drop_tier(CacheTier::HBM);
    }
    for (BlockHash b : store.resident_blocks(CacheTier::HBM)) {
      CHECK(store.contains(CacheTier::DRAM, b));
    }
    for (CacheTier t : {CacheTier::HBM, CacheTier::DRAM, CacheTier::SSD}) {
      CHECK(store.used_tokens(t) <= store.capacity_tokens(t));
    }
  }
}

TEST_CASE("heartbeat index only moves at sync boundaries") {
  GlobalCacheIndex index;
  TieredStore store(256, 512, 512);
  auto h = block_hashes(make_tokens(32));
  index.sync_instance(0, store.resident_blocks(CacheTier::DRAM), 0);
  store.put_blocks(h, CacheTier::HBM);  // t=10, between heartbeats
  CHECK(prefix_match(make_tokens(32), index.blocks[0]) == 0);
  index.sync_instance(0, store.resident_blocks(CacheTier::DRAM), 100000);
  CHECK(prefix_match(make_tokens(32), index.blocks[0]) == 32);
  auto snapshot = index.blocks[0];
  index.sync_instance(0, store.resident_blocks(CacheTier::DRAM), 200000);
  CHECK(index.blocks[0] == snapshot);
  index.drop_instance(0);
  CHECK(index.blocks.count(0) == 0);
}

TEST_CASE("routing prefers latency over reuse") {
  ModelProfile profile;
  GlobalCacheIndex index;
  auto prompt = make_tokens(1024);
  auto hashes = block_hashes(prompt);
  // A caches half the prompt but has a deep queue; B is cold and idle.
  index.sync_instance(0, {hashes.begin(), hashes.begin() + 32}, 0);
  index.sync_instance(1, {}, 0);
  std::vector<RouteCandidate> cands{{0, true, 20000}, {1, true, 0}};
  RouteDecision d = route_request(prompt, cands, index, profile);
  CHECK(d.instance_id == 1);
  CHECK(d.matched_tokens == 0);
}

TEST_CASE("with equal queues reuse wins") {
  ModelProfile profile;
  GlobalCacheIndex index;
  auto prompt = make_tokens(1024);
  auto hashes = block_hashes(prompt);
  index.sync_instance(0, {hashes.begin(), hashes.begin() + 32}, 0);
  index.sync_instance(1, {}, 0);
  std::vector<RouteCandidate> cands{{0, true, 1000}, {1, true, 1000}};
  RouteDecision d = route_request(prompt, cands, index, profile);
  CHECK(d.instance_id == 0);
  CHECK(d.matched_tokens == 512);
}

TEST_CASE("single instance and no-capacity edge cases") {
  ModelProfile profile;
  GlobalCacheIndex index;
  auto prompt = make_tokens(64);
  std::vector<RouteCandidate> one{{3, true, 0}};
  CHECK(route_request(prompt, one, index, profile).instance_id == 3);
  std::vector<RouteCandidate> down{{0, false, 0}, {1, false, 0}};
  CHECK_THROWS_AS(route_request(prompt, down, index, profile), NoCapacity);
}

TEST_CASE("routing equals the exhaustive-minimum oracle") {
  ModelProfile profile;
  Rng rng(314);
  for (int it = 0; it < 200; ++it) {
    int n = static_cast<int>(rng.uniform_int(1, 8));
    auto prompt = make_tokens(static_cast<int>(rng.uniform_int(16, 512)));
    auto hashes = block_hashes(prompt);
    GlobalCacheIndex index;
    std::vector<RouteCandidate> cands;
    for (int i = 0; i < n; ++i) {
      size_t adv = static_cast<size_t>(rng.uniform_int(0, hashes.size()));
      index.sync_instance(i, {hashes.begin(), hashes.begin() + adv}, 0);
      cands.push_back(
          {i, rng.uniform() < 0.9,
           static_cast<int64_t>(16 * rng.uniform_int(0, 64))});
    }
    bool any = std::any_of(cands.begin(), cands.end(),
                           [](const RouteCandidate& c) { return c.healthy; });
    if (!any) {
      CHECK_THROWS_AS(route_request(prompt, cands, index, profile), NoCapacity);
      continue;
    }
    // Independent oracle: evaluate every healthy instance and take the
    // minimum, ties by reuse then id.
    int best_id = -1;
    int64_t best_match = -1;
    double best_est = 0.0;
    for (const auto& c : cands) {
      if (!c.healthy) continue;
      int64_t matched = prefix_match(prompt, index.blocks[c.instance_id]);
      double est =
          estimate_prefill_time(c.queued_prefill_tokens, profile) +
          estimate_prefill_time(static_cast<int64_t>(prompt.size()) - matched,
                                profile);
      if (best_id < 0 || est < best_est ||
          (est == best_est && matched > best_match)) {
        best_id = c.instance_id;
        best_match = matched;
        best_est = est;
      }
    }
    RouteDecision d = route_request(prompt, cands, index, profile);
    CHECK(d.instance_id == best_id);
    CHECK(d.matched_tokens == best_match);
    CHECK(d.est_ttft_ms == doctest::Approx(best_est));
  }
}

TEST_CASE("short prefix recomputes when migration setup dominates") {
  ModelProfile profile;
  GlobalCacheIndex index;
  std::vector<RouteCandidate> targets{{0, true, 0}};
  RecoveryParams params;
  params.setup_ms = 50.0;  // slow link establishment
  RecoveryRequest req;
  req.request_id = 1;
  req.prefix_tokens = 256;
  req.tokens = make_tokens(256);
  req.replica_survives = true;
  auto plan = plan_fault_recovery({req}, targets, index, profile, params);
  REQUIRE(plan.size() == 1);
  CHECK(plan[0].action == RecoveryAction::Recompute);
  CHECK(plan[0].cost_ms <= plan[0].alt_cost_ms);
}

TEST_CASE("long prefix with a surviving replica migrates") {
  ModelProfile profile;
  GlobalCacheIndex index;
  std::vector<RouteCandidate> targets{{0, true, 0}};
  RecoveryParams params;
  RecoveryRequest req;
  req.request_id = 2;
  req.prefix_tokens = 32768;
  req.tokens = make_tokens(1024);
  req.replica_survives = true;
  auto plan = plan_fault_recovery({req}, targets, index, profile, params);
  REQUIRE(plan.size() == 1);
  CHECK(plan[0].action == RecoveryAction::Migrate);
  CHECK(plan[0].cost_ms < plan[0].alt_cost_ms);
  CHECK(plan[0].target_instance == 0);
}

TEST_CASE("no surviving replica forces recompute") {
  ModelProfile profile;
  GlobalCacheIndex index;
  std::vector<RouteCandidate> targets{{0, true, 0}};
  RecoveryRequest req;
  req.request_id = 3;
  req.prefix_tokens = 32768;  // migration would be cheaper, but infeasible
  req.tokens = make_tokens(1024);
  req.replica_survives = false;
  auto plan = plan_fault_recovery({req}, targets, index, profile, {});
  CHECK(plan[0].action == RecoveryAction::Recompute);
}

TEST_CASE("online requests are planned before offline") {
  ModelProfile profile;
  GlobalCacheIndex index;
  std::vector<RouteCandidate> targets{{0, true, 0}};
  std::vector<RecoveryRequest> resident;
  for (int i = 0; i < 4; ++i) {
    RecoveryRequest r;
    r.request_id = i;
    r.cls = (i % 2 == 0) ? RequestClass::Offline : RequestClass::Online;
    r.prefix_tokens = 128;
    r.tokens = make_tokens(128);
    resident.push_back(r);
  }
  auto plan = plan_fault_recovery(resident, targets, index, profile, {});
  REQUIRE(plan.size() == 4);
  CHECK(plan[0].request_id == 1);
  CHECK(plan[1].request_id == 3);
  CHECK(plan[2].request_id == 0);
  CHECK(plan[3].request_id == 2);
}

TEST_CASE("no healthy target marks the request failed") {
  ModelProfile profile;
  GlobalCacheIndex index;
  std::vector<RouteCandidate> targets{{0, false, 0}};
  RecoveryRequest req;
  req.request_id = 9;
  req.prefix_tokens = 64;
  req.tokens = make_tokens(64);
  auto plan = plan_fault_recovery({req}, targets, index, profile, {});
  CHECK(plan[0].target_instance == -1);
}

TEST_CASE("chosen recovery action is never costlier than the alternative") {
  ModelProfile profile;
  GlobalCacheIndex index;
  std::vector<RouteCandidate> targets{{0, true, 0}, {1, true, 512}};
  Rng rng(77);
  std::vector<RecoveryRequest> resident;
  for (int i = 0; i < 100; ++i) {
    RecoveryRequest r;
    r.request_id = i;
    r.cls = rng.uniform() < 0.5 ? RequestClass::Online : RequestClass::Offline;
    r.prefix_tokens = rng.uniform_int(16, 40000);
    r.tokens = make_tokens(static_cast<int>(std::min<int64_t>(r.prefix_tokens, 512)));
    r.replica_survives = rng.uniform() < 0.7;
    resident.push_back(r);
  }
  auto plan = plan_fault_recovery(resident, targets, index, profile, {});
  for (const auto& d : plan) {
    CHECK(d.cost_ms <= d.alt_cost_ms + 1e-9);
  }
}
