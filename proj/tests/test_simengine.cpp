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

#include <map>
#include <vector>

#include "servesim/rng.h"
#include "servesim/sim.h"

using namespace servesim;

namespace {

ScenarioConfig small_cluster() {
  ScenarioConfig cfg;
  cfg.cluster.instances = {
      {PoolTag::P, 200000, 2048},
      {PoolTag::D, 200000, 2048},
      {PoolTag::D, 200000, 2048},
  };
  cfg.sim.seed = 1;
  cfg.kv.enabled = false;
  cfg.xtensor.enabled = false;
  return cfg;
}

TraceRecord text_request(double arrival_ms, int64_t input, int64_t output,
                         RequestClass cls = RequestClass::Online) {
  TraceRecord t;
  t.arrival_ms = arrival_ms;
  t.cls = cls;
  t.input_tokens = input;
  t.output_tokens = output;
  return t;
}

}  // namespace

TEST_CASE("sim config validation") {
  SimConfig ok;
  CHECK_NOTHROW(ok.validate());
  SimConfig micro;
  micro.n_micro_batches = 0;
  CHECK_THROWS_AS(micro.validate(), InvalidConfig);
  SimConfig bw;
  bw.migration_bandwidth_tokens_per_ms = 0.0;
  CHECK_THROWS_AS(bw.validate(), InvalidConfig);
}

TEST_CASE("fault spec referencing a missing instance is rejected") {
  ScenarioConfig cfg = small_cluster();
  cfg.faults.push_back({100.0, 7});
  CHECK_THROWS_AS(cfg.validate(), InvalidConfig);
}

TEST_CASE("empty trace yields an empty result") {
  ScenarioConfig cfg = small_cluster();
  SimResult r = run_simulation({}, cfg);
  CHECK(r.requests.empty());
  // Nothing beyond the first idle heartbeat happens.
  CHECK(r.end_time <= us_from_ms(cfg.sim.heartbeat_ms));
}

TEST_CASE("single request TTFT matches the hand-computed step chain") {
  ScenarioConfig cfg = small_cluster();
  cfg.cluster.instances = {{PoolTag::P, 200000, 2048}};
  SimResult r = run_simulation({text_request(0.0, 1000, 4)}, cfg);
  REQUIRE(r.requests.size() == 1);
  const auto& req = r.requests[0];
  REQUIRE(req.first_token.has_value());

  // Uncontended: one prefill step for the whole prompt, then the first
  // decode step; each step carries the scheduling overhead.
  double prefill = step_duration_ms(estimate_prefill_time(1000, cfg.profile),
                                    cfg.profile, cfg.sim.features, 1,
                                    cfg.overlap);
  double decode = step_duration_ms(
      estimate_decode_step_time(1, 1000, cfg.profile, false), cfg.profile,
      cfg.sim.features, 1, cfg.overlap);
  double ttft = ms_from_us(*req.first_token - req.arrival);
  CHECK(ttft == doctest::Approx(prefill + decode).epsilon(0.01));
}

TEST_CASE("step duration composes overhead, overlap, and dual stream") {
  ModelProfile profile;  // sched_overhead_ms = 2
  OverlapProfile overlap;
  FeatureFlags off;
  CHECK(step_duration_ms(10.0, profile, off, 1, overlap) == doctest::Approx(12.0));

  FeatureFlags on;
  on.async_sched_overlap = true;
  CHECK(step_duration_ms(10.0, profile, on, 1, overlap) == doctest::Approx(10.0));
  CHECK(step_duration_ms(1.0, profile, on, 1, overlap) == doctest::Approx(2.0));

  // Dual stream needs at least two micro-batches, and the saving is floored
  // at half the base step.
  FeatureFlags dual;
  dual.async_sched_overlap = true;
  dual.dual_stream = true;
  CHECK(step_duration_ms(10.0, profile, dual, 1, overlap) ==
        doctest::Approx(10.0));
  double with_dual = step_duration_ms(10.0, profile, dual, 2, overlap);
  CHECK(with_dual < 10.0);
  CHECK(with_dual >= 5.0);
}

TEST_CASE("identical runs serialize identically") {
  ScenarioConfig cfg = small_cluster();
  std::vector<TraceRecord> trace;
  for (int i = 0; i < 20; ++i) {
    trace.push_back(text_request(10.0 * i, 300 + 37 * i, 8 + i % 5));
  }
  SimResult a = run_simulation(trace, cfg);
  SimResult b = run_simulation(trace, cfg);
  CHECK(a.to_json().dump() == b.to_json().dump());
}

TEST_CASE("completed requests carry full timing and exact token counts") {
  ScenarioConfig cfg = small_cluster();
  std::vector<TraceRecord> trace;
  Rng rng(77);
  for (int i = 0; i < 30; ++i) {
    trace.push_back(text_request(
        20.0 * i, rng.uniform_int(64, 2048), rng.uniform_int(1, 64),
        rng.uniform() < 0.3 ? RequestClass::Offline : RequestClass::Online));
  }
  SimResult r = run_simulation(trace, cfg);
  REQUIRE(r.requests.size() == trace.size());
  for (const auto& req : r.requests) {
    CHECK(req.final_state == RequestState::Complete);
    CHECK(req.first_token.has_value());
    CHECK(req.finish.has_value());
    CHECK(req.tokens_generated == req.true_output_tokens);
  }
}

TEST_CASE("async overlap never slows any request down") {
  Rng rng(2029);
  for (int scenario = 0; scenario < 10; ++scenario) {
    ScenarioConfig cfg = small_cluster();
    cfg.sim.seed = 100 + scenario;
    std::vector<TraceRecord> trace;
    int n = static_cast<int>(rng.uniform_int(5, 30));
    for (int i = 0; i < n; ++i) {
      trace.push_back(text_request(rng.uniform(0.0, 500.0),
                                   rng.uniform_int(64, 2048),
                                   rng.uniform_int(1, 32)));
    }
    std::sort(trace.begin(), trace.end(),
              [](const TraceRecord& a, const TraceRecord& b) {
                return a.arrival_ms < b.arrival_ms;
              });
    SimResult plain = run_simulation(trace, cfg);
    cfg.sim.features.async_sched_overlap = true;
    SimResult overlapped = run_simulation(trace, cfg);
    REQUIRE(plain.requests.size() == overlapped.requests.size());
    for (size_t i = 0; i < plain.requests.size(); ++i) {
      REQUIRE(plain.requests[i].finish.has_value());
      REQUIRE(overlapped.requests[i].finish.has_value());
      CHECK(*overlapped.requests[i].finish <= *plain.requests[i].finish);
    }
  }
}

TEST_CASE("fault on an idle instance leaves requests untouched") {
  ScenarioConfig cfg = small_cluster();
  // All work fits on instances 0 and 1; instance 2 stays idle.
  std::vector<TraceRecord> trace{text_request(0.0, 1024, 200)};
  cfg.faults.push_back({100.0, 2});
  SimResult r = run_simulation(trace, cfg);
  CHECK(r.counters.faults == 1);
  REQUIRE(r.requests.size() == 1);
  CHECK(r.requests[0].final_state == RequestState::Complete);
  CHECK(r.requests[0].tokens_generated == 200);
}

TEST_CASE("mid-decode fault with a surviving replica migrates without loss") {
  ScenarioConfig cfg = small_cluster();
  cfg.kv.enabled = true;  // DRAM copy survives the device fault
  std::vector<TraceRecord> trace{text_request(0.0, 2048, 400)};
  // Prefill lands on instance 0 and the decode stays there; fault it while
  // the decode is clearly in flight.
  cfg.faults.push_back({500.0, 0});
  SimResult r = run_simulation(trace, cfg);
  CHECK(r.counters.faults == 1);
  CHECK(r.counters.recoveries_migrate == 1);
  CHECK(r.counters.recoveries_recompute == 0);
  REQUIRE(r.requests.size() == 1);
  CHECK(r.requests[0].final_state == RequestState::Complete);
  CHECK(r.requests[0].tokens_generated == 400);
}

TEST_CASE("mid-decode fault without a replica recomputes the prefix") {
  ScenarioConfig cfg = small_cluster();
  cfg.kv.enabled = false;  // nothing survives outside HBM
  std::vector<TraceRecord> trace{text_request(0.0, 2048, 400)};
  cfg.faults.push_back({500.0, 0});
  SimResult r = run_simulation(trace, cfg);
  CHECK(r.counters.faults == 1);
  CHECK(r.counters.recoveries_recompute == 1);
  CHECK(r.counters.recoveries_migrate == 0);
  REQUIRE(r.requests.size() == 1);
  CHECK(r.requests[0].final_state == RequestState::Complete);
  CHECK(r.requests[0].tokens_generated == 400);
}

TEST_CASE("faulted instances rejoin and serve again") {
  ScenarioConfig cfg = small_cluster();
  cfg.cluster.instances = {{PoolTag::P, 200000, 2048},
                           {PoolTag::P, 200000, 2048}};
  cfg.sim.recovery_ms = 200.0;
  cfg.faults.push_back({50.0, 0});
  std::vector<TraceRecord> trace;
  for (int i = 0; i < 10; ++i) {
    trace.push_back(text_request(100.0 * i, 1024, 16));
  }
  SimResult r = run_simulation(trace, cfg);
  for (const auto& req : r.requests) {
    CHECK(req.final_state == RequestState::Complete);
  }
  // The recovered instance picks work back up after rejoining.
  CHECK(r.instances[0].steps > 0);
}

TEST_CASE("mtp credits shorten decode without changing token counts") {
  ScenarioConfig cfg = small_cluster();
  cfg.profile.mtp_draft_len = 3;
  cfg.profile.mtp_accept_prob = 0.8;
  std::vector<TraceRecord> trace{text_request(0.0, 512, 128)};
  SimResult plain = run_simulation(trace, cfg);
  cfg.sim.features.mtp = true;
  SimResult mtp = run_simulation(trace, cfg);
  REQUIRE(plain.requests[0].finish.has_value());
  REQUIRE(mtp.requests[0].finish.has_value());
  CHECK(*mtp.requests[0].finish < *plain.requests[0].finish);
  CHECK(mtp.requests[0].tokens_generated == 128);
}

TEST_CASE("graph mode reduces launch overhead on decode-heavy runs") {
  ScenarioConfig cfg = small_cluster();
  std::vector<TraceRecord> trace{text_request(0.0, 256, 256)};
  SimResult eager = run_simulation(trace, cfg);
  cfg.sim.features.graph_mode = true;
  SimResult graph = run_simulation(trace, cfg);
  REQUIRE(eager.requests[0].finish.has_value());
  REQUIRE(graph.requests[0].finish.has_value());
  CHECK(*graph.requests[0].finish < *eager.requests[0].finish);
}
