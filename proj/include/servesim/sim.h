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
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "servesim/cluster.h"
#include "servesim/colocation.h"
#include "servesim/epd_sched.h"
#include "servesim/kernel_pipeline.h"
#include "servesim/kvglobal.h"
#include "servesim/pd_sched.h"
#include "servesim/perf_model.h"
#include "servesim/trace.h"
#include "servesim/xtensor.h"

namespace servesim {

struct FeatureFlags {
  bool async_sched_overlap = false;
  bool dual_stream = false;
  bool graph_mode = false;
  bool mtp = false;
};

struct SimConfig {
  FeatureFlags features;
  int n_micro_batches = 1;
  double migration_bandwidth_tokens_per_ms = 1024.0;
  double heartbeat_ms = 100.0;
  uint64_t seed = 0;
  double horizon_ms = 0.0;  // 0: run until the trace drains
  double recovery_ms = 1000.0;
  bool record_token_times = false;

  void validate() const;
};

struct InstanceConfig {
  PoolTag pool = PoolTag::P;
  int64_t kv_capacity_tokens = 200000;
  int64_t token_budget = 2048;
};

struct ClusterConfig {
  std::vector<InstanceConfig> instances;
};

enum class RoutePolicy { SloAware, MinLoad, RoundRobin };
enum class ColocationMode { Colocate, OnlinePriority, StaticPD };
enum class EPDMode { Hybrid, Fused, FusedNoStageOrder };

RoutePolicy route_policy_from_string(const std::string& s);
const char* to_string(RoutePolicy p);
const char* to_string(ColocationMode m);
const char* to_string(EPDMode m);

struct EPDConfig {
  EPDMode mode = EPDMode::Hybrid;
  // When unset under Hybrid, select_strategy picks it on the profiling window.
  std::optional<EPDStrategy> strategy;
  int64_t tokens_per_image = 256;
  int64_t encode_batch_upper = 64;
  int profiling_window = 100;
  int64_t assumed_kv_per_seq = 0;
};

struct KvStoreConfig {
  bool enabled = true;
  int64_t hbm_tokens = 200000;
  int64_t dram_tokens = 400000;
  int64_t ssd_tokens = 800000;
  int64_t block_size = kDefaultBlockSize;
  RecoveryParams recovery;
  // Fraction of each prompt drawn from a common prefix pool; 0 disables
  // cross-request prefix sharing in synthetic token content.
  double prefix_share_fraction = 0.0;
};

struct XTensorConfig {
  bool enabled = true;
  int64_t page_size_tokens = 16;
  bool prefetch = true;
};

struct FaultSpec {
  double time_ms = 0.0;
  int instance_id = 0;
};

struct ScenarioConfig {
  ModelProfile profile;
  SimConfig sim;
  ClusterConfig cluster;
  SLOTargets slo;
  RoutePolicy policy = RoutePolicy::SloAware;
  ColocationMode colocation = ColocationMode::Colocate;
  ColocationConfig coloc;
  PDConfig pd;
  EPDConfig epd;
  KvStoreConfig kv;
  XTensorConfig xtensor;
  OverlapProfile overlap;
  std::vector<FaultSpec> faults;

  void validate() const;
  static ScenarioConfig from_json(const nlohmann::json& j);
  static ScenarioConfig load(const std::string& path);
};

// Event kinds in tie-break order.
enum class EventKind {
  Arrival = 0,
  StepComplete = 1,
  TransferComplete = 2,
  Heartbeat = 3,
  Fault = 4,
  RoleSwitch = 5,
};

struct Event {
  TimeUs time = 0;
  EventKind kind = EventKind::Arrival;
  int64_t seq = 0;  // total-order tie break
  int64_t payload_a = 0;
  int64_t payload_b = 0;
};

struct RequestRecord {
  int64_t id = 0;
  RequestClass cls = RequestClass::Online;
  Modality modality = Modality::Text;
  TimeUs arrival = 0;
  std::optional<TimeUs> first_token;
  std::optional<TimeUs> finish;
  int64_t input_tokens = 0;
  int64_t image_units = 0;
  int64_t tokens_generated = 0;
  int64_t true_output_tokens = 0;
  double slo_ttft_ms = 0.0;
  double slo_tpot_ms = 0.0;
  RequestState final_state = RequestState::Queued;
  std::vector<TimeUs> token_times;  // only with record_token_times
};

struct InstanceRecord {
  int id = 0;
  PoolTag final_pool = PoolTag::P;
  double busy_ms = 0.0;
  int64_t steps = 0;
  double utilization = 0.0;
};

struct SimCounters {
  int64_t preemptions = 0;
  int64_t role_switches = 0;
  int64_t migrations = 0;
  int64_t offline_decode_migrations = 0;
  int64_t faults = 0;
  int64_t recoveries_recompute = 0;
  int64_t recoveries_migrate = 0;
  int64_t failed_requests = 0;
  int64_t need_role_switch_events = 0;
  int64_t prefix_cache_lookups = 0;
  int64_t prefix_cache_hit_tokens = 0;
  int64_t dp_migration_plans = 0;
  int64_t eplb_table_version = 0;
  MapCounters xtensor;
};

struct SimResult {
  std::vector<RequestRecord> requests;
  std::vector<InstanceRecord> instances;
  SimCounters counters;
  TimeUs end_time = 0;
  nlohmann::json metadata;  // strategy/limits echo, schema-versioned

  nlohmann::json to_json() const;
};

SimResult run_simulation(const std::vector<TraceRecord>& trace,
                         const ScenarioConfig& config);

// Simulate the sample under each disaggregation strategy and keep the one
// with the best goodput; ties prefer fewer migrations, then E+P+D.
EPDStrategy select_strategy(const std::vector<TraceRecord>& sample,
                            const ScenarioConfig& config);

// Step-duration model shared by the engine and tests: scheduling overhead is
// additive when the overlap feature is off and hidden behind accelerator
// work when on; dual-stream pipelining shaves a bounded fraction of the base.
double step_duration_ms(double base_ms, const ModelProfile& profile,
                        const FeatureFlags& features, int n_micro_batches,
                        const OverlapProfile& overlap);

}  // namespace servesim
