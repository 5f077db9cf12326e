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

#include "servesim/sim.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <queue>
#include <set>

#include "servesim/balance.h"
#include "servesim/kvglobal.h"

namespace servesim {

void SimConfig::validate() const {
  if (n_micro_batches < 1) throw InvalidConfig("n_micro_batches must be >= 1");
  if (migration_bandwidth_tokens_per_ms <= 0.0) {
    throw InvalidConfig("migration_bandwidth_tokens_per_ms must be > 0");
  }
  if (heartbeat_ms <= 0.0) throw InvalidConfig("heartbeat_ms must be > 0");
  if (horizon_ms < 0.0) throw InvalidConfig("horizon_ms must be >= 0");
  if (recovery_ms < 0.0) throw InvalidConfig("recovery_ms must be >= 0");
}

void ScenarioConfig::validate() const {
  profile.validate();
  sim.validate();
  coloc.validate();
  pd.validate();
  overlap.validate();
  if (cluster.instances.empty()) {
    throw InvalidConfig("cluster needs at least one instance");
  }
  for (const auto& ic : cluster.instances) {
    if (ic.kv_capacity_tokens <= 0) {
      throw InvalidConfig("kv_capacity_tokens must be > 0");
    }
    if (ic.token_budget <= 0) throw InvalidConfig("token_budget must be > 0");
  }
  if (epd.tokens_per_image <= 0) {
    throw InvalidConfig("tokens_per_image must be > 0");
  }
  if (kv.enabled) {
    if (kv.block_size <= 0) throw InvalidConfig("block_size must be > 0");
    if (kv.dram_tokens < kv.hbm_tokens) {
      throw InvalidConfig("dram_tokens must be >= hbm_tokens");
    }
    if (kv.prefix_share_fraction < 0.0 || kv.prefix_share_fraction > 1.0) {
      throw InvalidConfig("prefix_share_fraction must be in [0, 1]");
    }
  }
  if (xtensor.enabled && xtensor.page_size_tokens <= 0) {
    throw InvalidConfig("page_size_tokens must be > 0");
  }
  for (const auto& f : faults) {
    if (f.instance_id < 0 ||
        f.instance_id >= static_cast<int>(cluster.instances.size())) {
      throw InvalidConfig("fault instance_id out of range");
    }
    if (f.time_ms < 0.0) throw InvalidConfig("fault time_ms must be >= 0");
  }
}

RoutePolicy route_policy_from_string(const std::string& s) {
  if (s == "slo_aware") return RoutePolicy::SloAware;
  if (s == "min_load") return RoutePolicy::MinLoad;
  if (s == "round_robin") return RoutePolicy::RoundRobin;
  throw InvalidConfig("unknown policy: " + s);
}

const char* to_string(RoutePolicy p) {
  switch (p) {
    case RoutePolicy::SloAware: return "slo_aware";
    case RoutePolicy::MinLoad: return "min_load";
    case RoutePolicy::RoundRobin: return "round_robin";
  }
  return "?";
}

const char* to_string(ColocationMode m) {
  switch (m) {
    case ColocationMode::Colocate: return "colocate";
    case ColocationMode::OnlinePriority: return "online_priority";
    case ColocationMode::StaticPD: return "static_pd";
  }
  return "?";
}

const char* to_string(EPDMode m) {
  switch (m) {
    case EPDMode::Hybrid: return "hybrid";
    case EPDMode::Fused: return "fused";
    case EPDMode::FusedNoStageOrder: return "fused_no_stage_order";
  }
  return "?";
}

namespace {

PoolTag pool_tag_from_string(const std::string& s) {
  if (s == "P") return PoolTag::P;
  if (s == "D") return PoolTag::D;
  if (s == "PtoD") return PoolTag::PtoD;
  if (s == "DtoP") return PoolTag::DtoP;
  if (s == "E") return PoolTag::E;
  throw InvalidConfig("unknown pool tag: " + s);
}

ColocationMode colocation_from_string(const std::string& s) {
  if (s == "colocate") return ColocationMode::Colocate;
  if (s == "online_priority") return ColocationMode::OnlinePriority;
  if (s == "static_pd") return ColocationMode::StaticPD;
  throw InvalidConfig("unknown colocation mode: " + s);
}

EPDMode epd_mode_from_string(const std::string& s) {
  if (s == "hybrid") return EPDMode::Hybrid;
  if (s == "fused") return EPDMode::Fused;
  if (s == "fused_no_stage_order") return EPDMode::FusedNoStageOrder;
  throw InvalidConfig("unknown epd mode: " + s);
}

EPDStrategy epd_strategy_from_string(const std::string& s) {
  if (s == "E+P+D") return EPDStrategy::E_P_D;
  if (s == "EP+D") return EPDStrategy::EP_D;
  if (s == "ED+P") return EPDStrategy::ED_P;
  throw InvalidConfig("unknown epd strategy: " + s);
}

template <typename T>
void maybe_get(const nlohmann::json& j, const char* key, T* out) {
  if (j.contains(key)) *out = j.at(key).template get<T>();
}

}  // namespace

ScenarioConfig ScenarioConfig::from_json(const nlohmann::json& j) {
  ScenarioConfig c;
  if (j.contains("profile")) c.profile = ModelProfile::from_json(j.at("profile"));
  if (j.contains("sim")) {
    const auto& s = j.at("sim");
    maybe_get(s, "n_micro_batches", &c.sim.n_micro_batches);
    maybe_get(s, "migration_bandwidth_tokens_per_ms",
              &c.sim.migration_bandwidth_tokens_per_ms);
    maybe_get(s, "heartbeat_ms", &c.sim.heartbeat_ms);
    maybe_get(s, "seed", &c.sim.seed);
    maybe_get(s, "horizon_ms", &c.sim.horizon_ms);
    maybe_get(s, "recovery_ms", &c.sim.recovery_ms);
    maybe_get(s, "record_token_times", &c.sim.record_token_times);
    if (s.contains("features")) {
      const auto& f = s.at("features");
      maybe_get(f, "async_sched_overlap", &c.sim.features.async_sched_overlap);
      maybe_get(f, "dual_stream", &c.sim.features.dual_stream);
      maybe_get(f, "graph_mode", &c.sim.features.graph_mode);
      maybe_get(f, "mtp", &c.sim.features.mtp);
    }
  }
  if (j.contains("cluster")) {
    for (const auto& ji : j.at("cluster").at("instances")) {
      InstanceConfig ic;
      if (ji.contains("pool")) {
        ic.pool = pool_tag_from_string(ji.at("pool").get<std::string>());
      }
      maybe_get(ji, "kv_capacity_tokens", &ic.kv_capacity_tokens);
      maybe_get(ji, "token_budget", &ic.token_budget);
      int count = 1;
      maybe_get(ji, "count", &count);
      for (int k = 0; k < count; ++k) c.cluster.instances.push_back(ic);
    }
  }
  if (j.contains("slo")) {
    maybe_get(j.at("slo"), "ttft_ms", &c.slo.ttft_ms);
    maybe_get(j.at("slo"), "tpot_ms", &c.slo.tpot_ms);
  }
  if (j.contains("policy")) {
    c.policy = route_policy_from_string(j.at("policy").get<std::string>());
  }
  if (j.contains("colocation")) {
    c.colocation = colocation_from_string(j.at("colocation").get<std::string>());
  }
  if (j.contains("coloc")) {
    maybe_get(j.at("coloc"), "migrate_idle_threshold_ms",
              &c.coloc.migrate_idle_threshold_ms);
  }
  if (j.contains("pd")) {
    const auto& p = j.at("pd");
    maybe_get(p, "min_decode_instances", &c.pd.min_decode_instances);
    maybe_get(p, "decode_capacity_headroom", &c.pd.decode_capacity_headroom);
    maybe_get(p, "idle_prefill_threshold_ms", &c.pd.idle_prefill_threshold_ms);
    maybe_get(p, "switch_cooldown_ms", &c.pd.switch_cooldown_ms);
  }
  if (j.contains("epd")) {
    const auto& e = j.at("epd");
    if (e.contains("mode")) {
      c.epd.mode = epd_mode_from_string(e.at("mode").get<std::string>());
    }
    if (e.contains("strategy") && !e.at("strategy").is_null()) {
      c.epd.strategy =
          epd_strategy_from_string(e.at("strategy").get<std::string>());
    }
    maybe_get(e, "tokens_per_image", &c.epd.tokens_per_image);
    maybe_get(e, "encode_batch_upper", &c.epd.encode_batch_upper);
    maybe_get(e, "profiling_window", &c.epd.profiling_window);
    maybe_get(e, "assumed_kv_per_seq", &c.epd.assumed_kv_per_seq);
  }
  if (j.contains("kv")) {
    const auto& k = j.at("kv");
    maybe_get(k, "enabled", &c.kv.enabled);
    maybe_get(k, "hbm_tokens", &c.kv.hbm_tokens);
    maybe_get(k, "dram_tokens", &c.kv.dram_tokens);
    maybe_get(k, "ssd_tokens", &c.kv.ssd_tokens);
    maybe_get(k, "block_size", &c.kv.block_size);
    maybe_get(k, "prefix_share_fraction", &c.kv.prefix_share_fraction);
    if (k.contains("recovery")) {
      const auto& r = k.at("recovery");
      maybe_get(r, "bytes_per_token", &c.kv.recovery.bytes_per_token);
      maybe_get(r, "bandwidth_bytes_per_ms",
                &c.kv.recovery.bandwidth_bytes_per_ms);
      maybe_get(r, "setup_ms", &c.kv.recovery.setup_ms);
    }
  }
  if (j.contains("xtensor")) {
    const auto& x = j.at("xtensor");
    maybe_get(x, "enabled", &c.xtensor.enabled);
    maybe_get(x, "page_size_tokens", &c.xtensor.page_size_tokens);
    maybe_get(x, "prefetch", &c.xtensor.prefetch);
  }
  if (j.contains("overlap")) c.overlap = OverlapProfile::from_json(j.at("overlap"));
  if (j.contains("faults")) {
    for (const auto& jf : j.at("faults")) {
      FaultSpec f;
      maybe_get(jf, "time_ms", &f.time_ms);
      maybe_get(jf, "instance_id", &f.instance_id);
      c.faults.push_back(f);
    }
  }
  c.validate();
  return c;
}

ScenarioConfig ScenarioConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidConfig("cannot open scenario file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig(std::string("scenario parse error: ") + e.what());
  }
  try {
    return from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig(std::string("scenario field error: ") + e.what());
  }
}

double step_duration_ms(double base_ms, const ModelProfile& profile,
                        const FeatureFlags& features, int n_micro_batches,
                        const OverlapProfile& overlap) {
  if (base_ms <= 0.0) return 0.0;
  double d = base_ms;
  double sched = profile.sched_overhead_ms;
  d += features.async_sched_overlap ? std::max(0.0, sched - base_ms) : sched;
  if (features.dual_stream && n_micro_batches >= 2) {
    DualStreamEstimate est = dual_stream_estimate(overlap);
    double layer = overlap.comm_single_ms + overlap.compute_single_ms;
    if (est.saved_per_layer_ms > 0.0 && layer > 0.0) {
      double saving = std::min(est.saved_per_layer_ms / layer * base_ms,
                               0.5 * base_ms);
      d -= saving;
    }
  }
  return d;
}

namespace {

struct EventCmp {
  bool operator()(const Event& a, const Event& b) const {
    if (a.time != b.time) return a.time > b.time;
    if (a.kind != b.kind) return static_cast<int>(a.kind) > static_cast<int>(b.kind);
    return a.seq > b.seq;
  }
};

// Deterministic synthetic token content; only identity matters for caching.
int32_t synth_token(int64_t request_id, int64_t pos) {
  uint64_t h = 1469598103934665603ull;
  h = (h ^ static_cast<uint64_t>(request_id + 1)) * 1099511628211ull;
  h = (h ^ static_cast<uint64_t>(pos)) * 1099511628211ull;
  return static_cast<int32_t>(h & 0x7fffffff);
}

struct MMPlan {
  int encode_inst = -1;
  int prefill_inst = -1;
  int decode_inst = -1;
};

class Engine {
 public:
  Engine(const std::vector<TraceRecord>& trace, const ScenarioConfig& cfg)
      : cfg_(cfg) {
    cfg_.validate();
    requests_ = requests_from_trace(trace);
  }

  SimResult run();

 private:
  // -- setup ----------------------------------------------------------------
  void init_cluster();
  void init_content();
  void init_epd();
  void push_event(TimeUs t, EventKind k, int64_t a, int64_t b) {
    pq_.push(Event{t, k, seq_++, a, b});
  }

  // -- event handlers -------------------------------------------------------
  void on_arrival(int64_t id, TimeUs now);
  void on_step_complete(int inst_id, int64_t epoch, TimeUs now);
  void on_transfer_complete(int inst_id, int64_t epoch, TimeUs now);
  void on_heartbeat(TimeUs now);
  void on_fault(int inst_id, bool rejoin, TimeUs now);
  void on_role_switch(int inst_id, PoolTag to, TimeUs now);

  // -- scheduling -----------------------------------------------------------
  void arrive_text(Request& r, TimeUs now);
  void arrive_multimodal(Request& r, TimeUs now);
  int pick_prefill_instance(const Request& r, bool* need_switch);
  void admit_prefill(int inst_id, Request& r, TimeUs now);
  void enqueue_prefill_ordered(Instance& inst, int64_t id);
  void enqueue_encode_ordered(Instance& inst, int64_t id);
  void maybe_start_step(int inst_id, TimeUs now);
  Batch assemble_batch(const Instance& inst);
  double batch_base_ms(const Instance& inst, const Batch& b) const;
  void finish_prefill(int inst_id, Request& r, TimeUs now);
  void place_decode(int inst_id, Request& r, TimeUs now);
  void complete_request(int inst_id, Request& r, TimeUs now);
  void fail_request(Request& r);

  // -- transfers ------------------------------------------------------------
  void enqueue_transfer(int target, TransferTask task, TimeUs now);
  void start_next_transfer(int inst_id, TimeUs now);

  // -- heartbeat duties -----------------------------------------------------
  void retry_pending_prefill(TimeUs now);
  void retry_pending_decode(TimeUs now);
  void maybe_migrate_offline(TimeUs now);
  void observe_dp_balance();

  // -- kv / xtensor ---------------------------------------------------------
  void kv_store_prompt(int inst_id, const Request& r);
  void xt_touch(int inst_id, Request& r, int64_t token_count);
  void xt_release(Request& r);

  void set_kv(Request& r, int inst_id, int64_t tokens) {
    instances_[inst_id].stats.kv_used_tokens += tokens - r.kv_resident;
    r.kv_resident = tokens;
  }
  void mark_idle_if_drained(int inst_id, TimeUs now) {
    Instance& inst = instances_[inst_id];
    if (!inst.stepping && !inst.has_work() && !active_transfer_[inst_id]) {
      // Stamp only the busy->idle transition so idle age accumulates.
      if (!inst.idle_marked) {
        inst.idle_since = now;
        inst.idle_marked = true;
      }
    } else {
      inst.idle_marked = false;
    }
  }

  SimResult finalize(TimeUs end_time);

  ScenarioConfig cfg_;
  std::vector<Request> requests_;
  std::vector<Instance> instances_;
  std::priority_queue<Event, std::vector<Event>, EventCmp> pq_;
  int64_t seq_ = 0;

  std::vector<Batch> cur_batch_;
  std::vector<TimeUs> step_dur_us_;
  std::vector<int64_t> epoch_;
  std::vector<std::optional<TransferTask>> active_transfer_;

  std::vector<std::unique_ptr<TieredStore>> stores_;
  GlobalCacheIndex index_;
  std::vector<std::unique_ptr<PagePool>> pools_;
  std::vector<std::optional<XTensorSession>> sessions_;
  std::vector<int> session_owner_;
  std::vector<bool> xt_skip_;
  std::vector<std::vector<int32_t>> tokens_;
  std::vector<std::vector<TimeUs>> token_times_;
  std::vector<MMPlan> mm_plan_;

  std::deque<int64_t> pending_prefill_;
  std::deque<int64_t> pending_decode_;

  bool epd_scenario_ = false;
  EPDStrategy strategy_ = EPDStrategy::E_P_D;
  EPDLimits limits_;
  PhasePlacement placement_;

  SimCounters counters_;
  bool prefill_pressure_ = false;
  size_t rr_next_ = 0;
  size_t terminal_ = 0;
  int stalled_heartbeats_ = 0;
  int64_t heartbeats_ = 0;
};

void Engine::init_cluster() {
  int n = static_cast<int>(cfg_.cluster.instances.size());
  instances_.resize(n);
  cur_batch_.resize(n);
  step_dur_us_.assign(n, 0);
  epoch_.assign(n, 0);
  active_transfer_.resize(n);
  for (int i = 0; i < n; ++i) {
    const InstanceConfig& ic = cfg_.cluster.instances[i];
    Instance& inst = instances_[i];
    inst.id = i;
    inst.pool = ic.pool;
    inst.kv_capacity_tokens = ic.kv_capacity_tokens;
    inst.token_budget = ic.token_budget;
    if (cfg_.kv.enabled) {
      stores_.push_back(std::make_unique<TieredStore>(
          cfg_.kv.hbm_tokens, cfg_.kv.dram_tokens, cfg_.kv.ssd_tokens,
          cfg_.kv.block_size));
    }
    if (cfg_.xtensor.enabled) {
      int pages = static_cast<int>(
          2 * ic.kv_capacity_tokens / cfg_.xtensor.page_size_tokens + 64);
      pools_.push_back(
          std::make_unique<PagePool>(pages, cfg_.xtensor.page_size_tokens));
    }
  }
}

void Engine::init_content() {
  size_t n = requests_.size();
  sessions_.resize(n);
  session_owner_.assign(n, -1);
  xt_skip_.assign(n, false);
  token_times_.resize(n);
  mm_plan_.resize(n);
  if (!cfg_.kv.enabled) return;
  tokens_.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const Request& r = requests_[i];
    auto& t = tokens_[i];
    t.resize(r.input_tokens);
    int64_t shared = static_cast<int64_t>(
        static_cast<double>(r.input_tokens) * cfg_.kv.prefix_share_fraction);
    for (int64_t j = 0; j < r.input_tokens; ++j) {
      t[j] = j < shared ? static_cast<int32_t>(j) : synth_token(r.id, j);
    }
  }
}

void Engine::init_epd() {
  for (const auto& r : requests_) {
    if (r.modality == Modality::Multimodal && r.image_units > 0) {
      epd_scenario_ = true;
      break;
    }
  }
  if (!epd_scenario_) return;

  if (cfg_.epd.strategy) {
    strategy_ = *cfg_.epd.strategy;
  } else if (cfg_.epd.mode == EPDMode::Hybrid) {
    // Auto-select on the head of the trace. select_strategy always runs with
    // the strategy pinned, so the recursion is one level deep.
    int64_t window = std::min<int64_t>(cfg_.epd.profiling_window,
                                       static_cast<int64_t>(requests_.size()));
    std::vector<TraceRecord> sample;
    for (int64_t i = 0; i < window; ++i) {
      const Request& r = requests_[i];
      TraceRecord t;
      t.arrival_ms = ms_from_us(r.arrival);
      t.cls = r.cls;
      t.modality = r.modality;
      t.input_tokens = r.input_tokens;
      t.image_units = r.image_units;
      t.output_tokens = r.true_output_tokens;
      t.slo_ttft_ms = r.slo_ttft_ms;
      t.slo_tpot_ms = r.slo_tpot_ms;
      sample.push_back(t);
    }
    if (!sample.empty()) strategy_ = select_strategy(sample, cfg_);
  }

  int64_t max_budget = 0;
  for (const auto& ic : cfg_.cluster.instances) {
    max_budget = std::max(max_budget, ic.token_budget);
  }
  int64_t assumed_kv = cfg_.epd.assumed_kv_per_seq;
  if (assumed_kv <= 0) assumed_kv = 1024;
  limits_ = profile_limits(cfg_.profile, cfg_.slo.tpot_ms,
                           cfg_.epd.encode_batch_upper, max_budget, assumed_kv);

  bool e_pool = false, p_pool = false, d_pool = false;
  for (const auto& inst : instances_) {
    e_pool |= serves_encode(inst.pool);
    p_pool |= serves_prefill(inst.pool);
    d_pool |= serves_decode(inst.pool);
  }
  placement_ = dispatch_multimodal(strategy_, e_pool, p_pool, d_pool);
}

SimResult Engine::run() {
  init_cluster();
  init_content();

  for (const auto& r : requests_) {
    push_event(r.arrival, EventKind::Arrival, r.id, 0);
  }
  for (const auto& f : cfg_.faults) {
    push_event(us_from_ms(f.time_ms), EventKind::Fault, f.instance_id, 0);
    push_event(us_from_ms(f.time_ms + cfg_.sim.recovery_ms), EventKind::Fault,
               f.instance_id, 1);
  }
  push_event(us_from_ms(cfg_.sim.heartbeat_ms), EventKind::Heartbeat, 0, 0);

  init_epd();

  TimeUs horizon = cfg_.sim.horizon_ms > 0 ? us_from_ms(cfg_.sim.horizon_ms)
                                           : std::numeric_limits<TimeUs>::max();
  TimeUs last = 0;
  while (!pq_.empty()) {
    Event ev = pq_.top();
    pq_.pop();
    if (ev.time > horizon) break;
    last = std::max(last, ev.time);
    switch (ev.kind) {
      case EventKind::Arrival:
        on_arrival(ev.payload_a, ev.time);
        break;
      case EventKind::StepComplete:
        on_step_complete(static_cast<int>(ev.payload_a), ev.payload_b, ev.time);
        break;
      case EventKind::TransferComplete:
        on_transfer_complete(static_cast<int>(ev.payload_a), ev.payload_b,
                             ev.time);
        break;
      case EventKind::Heartbeat:
        on_heartbeat(ev.time);
        break;
      case EventKind::Fault:
        on_fault(static_cast<int>(ev.payload_a), ev.payload_b != 0, ev.time);
        break;
      case EventKind::RoleSwitch:
        on_role_switch(static_cast<int>(ev.payload_a),
                       static_cast<PoolTag>(ev.payload_b), ev.time);
        break;
    }
  }
  TimeUs end = cfg_.sim.horizon_ms > 0 ? std::min(last, horizon) : last;
  return finalize(end);
}

// ---------------------------------------------------------------------------
// Arrivals and dispatch
// ---------------------------------------------------------------------------

void Engine::on_arrival(int64_t id, TimeUs now) {
  Request& r = requests_[id];
  if (epd_scenario_ && r.modality == Modality::Multimodal && r.image_units > 0) {
    arrive_multimodal(r, now);
  } else {
    arrive_text(r, now);
  }
}

int Engine::pick_prefill_instance(const Request& r, bool* need_switch) {
  *need_switch = false;
  if (cfg_.policy == RoutePolicy::SloAware) {
    if (cfg_.kv.enabled && cfg_.kv.prefix_share_fraction > 0.0) {
      std::vector<RouteCandidate> cands;
      for (const auto& inst : instances_) {
        if (!serves_prefill(inst.pool)) continue;
        cands.push_back(RouteCandidate{inst.id, inst.healthy,
                                       queued_prefill_tokens(inst, requests_)});
      }
      if (!cands.empty()) {
        ++counters_.prefix_cache_lookups;
        try {
          RouteDecision d = route_request(tokens_[r.id], cands, index_,
                                          cfg_.profile, cfg_.kv.block_size);
          return d.instance_id;
        } catch (const NoCapacity&) {
          return -1;
        }
      }
    }
    try {
      PrefillDispatch d =
          dispatch_prefill(r, instances_, requests_, cfg_.slo, cfg_.profile);
      if (d.need_role_switch) {
        *need_switch = true;
        return -1;
      }
      return d.instance;
    } catch (const NoCapacity&) {
      return -1;
    }
  }

  // MinLoad / RoundRobin: prefer prefill-serving instances, fall back to any.
  std::vector<int> eligible;
  for (const auto& inst : instances_) {
    if (inst.healthy && serves_prefill(inst.pool)) eligible.push_back(inst.id);
  }
  if (eligible.empty()) {
    for (const auto& inst : instances_) {
      if (inst.healthy) eligible.push_back(inst.id);
    }
  }
  if (eligible.empty()) return -1;
  if (cfg_.policy == RoutePolicy::RoundRobin) {
    int pick = eligible[rr_next_ % eligible.size()];
    ++rr_next_;
    return pick;
  }
  int best = -1;
  int64_t best_load = std::numeric_limits<int64_t>::max();
  for (int id : eligible) {
    const Instance& inst = instances_[id];
    int64_t load =
        queued_prefill_tokens(inst, requests_) + running_tokens(inst, requests_);
    if (load < best_load) {
      best_load = load;
      best = id;
    }
  }
  return best;
}

void Engine::arrive_text(Request& r, TimeUs now) {
  bool need_switch = false;
  int target = pick_prefill_instance(r, &need_switch);
  if (target < 0) {
    if (need_switch) {
      ++counters_.need_role_switch_events;
      prefill_pressure_ = true;
    }
    pending_prefill_.push_back(r.id);
    return;
  }
  admit_prefill(target, r, now);
}

void Engine::admit_prefill(int inst_id, Request& r, TimeUs now) {
  Instance& inst = instances_[inst_id];
  r.origin_instance = inst_id;
  // Reuse any cached prefix already resident on the chosen instance; always
  // leave at least one token to compute so the request takes a prefill step.
  if (cfg_.kv.enabled && cfg_.kv.prefix_share_fraction > 0.0 &&
      r.prefill_done == 0 && r.tokens_generated == 0) {
    auto it = index_.blocks.find(inst_id);
    if (it != index_.blocks.end()) {
      int64_t matched =
          prefix_match(tokens_[r.id], it->second, cfg_.kv.block_size);
      matched = std::min(matched, r.input_tokens - 1);
      if (matched > 0) {
        counters_.prefix_cache_hit_tokens += matched;
        r.prefill_done = matched;
        set_kv(r, inst_id, matched);
      }
    }
  }
  r.state = RequestState::Prefilling;
  enqueue_prefill_ordered(inst, r.id);
  maybe_start_step(inst_id, now);
}

void Engine::enqueue_prefill_ordered(Instance& inst, int64_t id) {
  const Request& r = requests_[id];
  if (cfg_.colocation != ColocationMode::StaticPD &&
      r.cls == RequestClass::Online) {
    auto it = inst.prefill_queue.begin();
    for (; it != inst.prefill_queue.end(); ++it) {
      if (requests_[*it].cls == RequestClass::Offline) break;
    }
    if (it != inst.prefill_queue.end() && requests_[*it].prefill_done > 0) {
      ++counters_.preemptions;  // displaced a mid-prefill offline request
    }
    inst.prefill_queue.insert(it, id);
    return;
  }
  inst.prefill_queue.push_back(id);
}

void Engine::enqueue_encode_ordered(Instance& inst, int64_t id) {
  const Request& r = requests_[id];
  if (cfg_.colocation != ColocationMode::StaticPD &&
      r.cls == RequestClass::Online) {
    auto it = inst.encode_queue.begin();
    for (; it != inst.encode_queue.end(); ++it) {
      if (requests_[*it].cls == RequestClass::Offline) break;
    }
    inst.encode_queue.insert(it, id);
    return;
  }
  inst.encode_queue.push_back(id);
}

void Engine::arrive_multimodal(Request& r, TimeUs now) {
  MMPlan plan;
  if (cfg_.epd.mode != EPDMode::Hybrid) {
    // Fused: every phase on one instance; pick the least loaded healthy one.
    int best = -1;
    int64_t best_load = std::numeric_limits<int64_t>::max();
    for (const auto& inst : instances_) {
      if (!inst.healthy) continue;
      int64_t load = queued_prefill_tokens(inst, requests_) +
                     running_tokens(inst, requests_) +
                     static_cast<int64_t>(inst.encode_queue.size()) *
                         cfg_.epd.tokens_per_image;
      if (load < best_load) {
        best_load = load;
        best = inst.id;
      }
    }
    if (best < 0) {
      pending_prefill_.push_back(r.id);
      return;
    }
    plan.encode_inst = plan.prefill_inst = plan.decode_inst = best;
  } else {
    auto least_encode = [&](PoolTag tag) {
      int best = -1;
      int64_t best_load = std::numeric_limits<int64_t>::max();
      for (const auto& inst : instances_) {
        if (!inst.healthy || inst.pool != tag) continue;
        int64_t load = 0;
        for (int64_t id : inst.encode_queue) load += requests_[id].image_units;
        if (load < best_load) {
          best_load = load;
          best = inst.id;
        }
      }
      return best;
    };
    plan.encode_inst = least_encode(placement_.encode_pool);
    if (plan.encode_inst < 0) {
      pending_prefill_.push_back(r.id);
      return;
    }
    if (placement_.fused_encode_prefill) {
      plan.prefill_inst = plan.encode_inst;
    } else {
      int best = -1;
      double best_est = std::numeric_limits<double>::infinity();
      for (const auto& inst : instances_) {
        if (!inst.healthy || inst.pool != placement_.prefill_pool) continue;
        double est = predict_ttft(inst, requests_, r.input_tokens, cfg_.profile);
        if (est < best_est) {
          best_est = est;
          best = inst.id;
        }
      }
      plan.prefill_inst = best >= 0 ? best : plan.encode_inst;
    }
    plan.decode_inst = placement_.fused_encode_decode ? plan.encode_inst : -1;
  }
  mm_plan_[r.id] = plan;
  r.state = RequestState::Encoding;
  enqueue_encode_ordered(instances_[plan.encode_inst], r.id);
  maybe_start_step(plan.encode_inst, now);
}

// ---------------------------------------------------------------------------
// Step assembly and completion
// ---------------------------------------------------------------------------

Batch Engine::assemble_batch(const Instance& inst) {
  if (epd_scenario_) {
    if (cfg_.epd.mode == EPDMode::FusedNoStageOrder) {
      Batch b = local_schedule(inst, requests_);
      int64_t cap = limits_.max_encode_batch > 0 ? limits_.max_encode_batch
                                                 : cfg_.epd.encode_batch_upper;
      for (int64_t id : inst.encode_queue) {
        if (static_cast<int64_t>(b.encode_ids.size()) >= cap) break;
        b.encode_ids.push_back(id);
      }
      return b;
    }
    return epd_assemble_batch(inst, requests_, limits_);
  }

  if (cfg_.colocation != ColocationMode::StaticPD) {
    // Pending online prefill preempts offline work for the whole step: the
    // online chunk must not wait on, or share step time with, offline
    // decodes or offline chunks.
    bool online_prefill_pending = false;
    for (int64_t id : inst.prefill_queue) {
      const Request& r = requests_[id];
      if (r.cls == RequestClass::Online && r.prefill_left() > 0) {
        online_prefill_pending = true;
        break;
      }
    }
    if (online_prefill_pending) {
      Instance view = inst;
      std::erase_if(view.decode_set, [&](int64_t id) {
        return requests_[id].cls == RequestClass::Offline;
      });
      std::erase_if(view.prefill_queue, [&](int64_t id) {
        return requests_[id].cls == RequestClass::Offline;
      });
      return local_schedule(view, requests_);
    }
  }

  Batch b = local_schedule(inst, requests_);
  if (cfg_.colocation == ColocationMode::Colocate && !b.decode_ids.empty()) {
    std::vector<int64_t> online;
    std::vector<OfflineCandidate> offline;
    int64_t online_kv = 0;
    for (int64_t id : b.decode_ids) {
      const Request& r = requests_[id];
      if (r.cls == RequestClass::Online) {
        online.push_back(id);
        online_kv += r.kv_resident;
      } else {
        offline.push_back(OfflineCandidate{id, r.kv_resident});
      }
    }
    if (!offline.empty()) {
      std::vector<int64_t> admitted = select_offline_for_batch(
          offline, static_cast<int64_t>(online.size()), online_kv, cfg_.profile,
          cfg_.slo.tpot_ms, cfg_.sim.features.graph_mode);
      b.decode_ids = online;
      b.decode_ids.insert(b.decode_ids.end(), admitted.begin(), admitted.end());
    }
  }
  return b;
}

double Engine::batch_base_ms(const Instance& inst, const Batch& b) const {
  (void)inst;
  double encode_ms = 0.0;
  if (!b.encode_ids.empty()) {
    int64_t units = 0;
    for (int64_t id : b.encode_ids) units += requests_[id].image_units;
    encode_ms = estimate_encode_time(units, cfg_.profile);
  }
  double prefill_ms = 0.0;
  for (const auto& c : b.chunks) {
    prefill_ms += estimate_chunk_time(c.context_tokens, c.chunk_tokens, cfg_.profile);
  }
  if (!b.chunks.empty()) prefill_ms += cfg_.profile.prefill_c;
  double decode_ms = 0.0;
  if (!b.decode_ids.empty()) {
    int64_t kv = 0;
    for (int64_t id : b.decode_ids) kv += requests_[id].kv_resident;
    decode_ms = estimate_decode_step_time(
        static_cast<int64_t>(b.decode_ids.size()), kv, cfg_.profile,
        cfg_.sim.features.graph_mode);
  }
  double language_ms = prefill_ms + decode_ms;
  if (epd_scenario_ && cfg_.epd.mode == EPDMode::Hybrid) {
    // Encoder work runs on its own engine and overlaps the language model.
    return std::max(encode_ms, language_ms);
  }
  return encode_ms + language_ms;
}

void Engine::maybe_start_step(int inst_id, TimeUs now) {
  Instance& inst = instances_[inst_id];
  if (!inst.healthy || inst.stepping) return;
  Batch b = assemble_batch(inst);
  if (b.empty()) {
    mark_idle_if_drained(inst_id, now);
    return;
  }
  double base = batch_base_ms(inst, b);
  double dur = step_duration_ms(base, cfg_.profile, cfg_.sim.features,
                                cfg_.sim.n_micro_batches, cfg_.overlap);
  cur_batch_[inst_id] = std::move(b);
  step_dur_us_[inst_id] = std::max<TimeUs>(1, us_from_ms(dur));
  inst.stepping = true;
  push_event(now + step_dur_us_[inst_id], EventKind::StepComplete, inst_id,
             epoch_[inst_id]);
}

void Engine::on_step_complete(int inst_id, int64_t epoch, TimeUs now) {
  if (epoch != epoch_[inst_id]) return;  // step belonged to a faulted epoch
  Instance& inst = instances_[inst_id];
  Batch b = std::move(cur_batch_[inst_id]);
  cur_batch_[inst_id] = Batch{};
  inst.stepping = false;
  inst.stats.busy_us += step_dur_us_[inst_id];
  ++inst.stats.steps;

  for (int64_t id : b.encode_ids) {
    Request& r = requests_[id];
    auto it = std::find(inst.encode_queue.begin(), inst.encode_queue.end(), id);
    if (it != inst.encode_queue.end()) inst.encode_queue.erase(it);
    r.encode_done = r.image_units;
    int pinst = mm_plan_[id].prefill_inst >= 0 ? mm_plan_[id].prefill_inst
                                               : inst_id;
    if (pinst != inst_id) {
      r.state = RequestState::Migrating;
      ++counters_.migrations;
      enqueue_transfer(pinst,
                       TransferTask{id, r.image_units * cfg_.epd.tokens_per_image,
                                    TransferKind::ImageCache,
                                    RequestState::Prefilling},
                       now);
    } else {
      r.state = RequestState::Prefilling;
      r.origin_instance = inst_id;
      enqueue_prefill_ordered(inst, id);
    }
  }

  for (const auto& c : b.chunks) {
    Request& r = requests_[c.request_id];
    r.prefill_done += c.chunk_tokens;
    set_kv(r, inst_id, r.prefill_done);
    xt_touch(inst_id, r, r.prefill_done);
    if (r.prefill_done >= r.prefill_target) finish_prefill(inst_id, r, now);
  }

  if (!b.decode_ids.empty()) {
    double tok = cfg_.sim.features.mtp
                     ? expected_tokens_per_step(cfg_.profile.mtp_draft_len,
                                                cfg_.profile.mtp_accept_prob)
                     : 1.0;
    bool any_emitted = false;
    for (int64_t id : b.decode_ids) {
      Request& r = requests_[id];
      r.decode_credit += tok;
      int64_t emitted = static_cast<int64_t>(std::floor(r.decode_credit)) -
                        r.tokens_generated;
      emitted = std::min(emitted, r.true_output_tokens - r.tokens_generated);
      if (emitted > 0) {
        any_emitted = true;
        if (!r.first_token) r.first_token = now;
        if (cfg_.sim.record_token_times) {
          for (int64_t k = 0; k < emitted; ++k) token_times_[id].push_back(now);
        }
        r.tokens_generated += emitted;
        set_kv(r, inst_id, r.kv_resident + emitted);
        xt_touch(inst_id, r, r.kv_resident);
      }
      if (r.tokens_generated >= r.true_output_tokens) {
        complete_request(inst_id, r, now);
      }
    }
    if (any_emitted) {
      InstanceStats& st = inst.stats;
      if (st.last_token_time >= 0) {
        double interval = ms_from_us(now - st.last_token_time);
        st.token_interval_ema_ms = st.token_interval_ema_ms <= 0.0
                                       ? interval
                                       : 0.9 * st.token_interval_ema_ms +
                                             0.1 * interval;
      }
      st.last_token_time = now;
    }
  }

  maybe_start_step(inst_id, now);
  mark_idle_if_drained(inst_id, now);
}

void Engine::finish_prefill(int inst_id, Request& r, TimeUs now) {
  Instance& inst = instances_[inst_id];
  auto it = std::find(inst.prefill_queue.begin(), inst.prefill_queue.end(), r.id);
  if (it != inst.prefill_queue.end()) inst.prefill_queue.erase(it);
  kv_store_prompt(inst_id, r);
  r.origin_instance = inst_id;
  place_decode(inst_id, r, now);
}

void Engine::place_decode(int inst_id, Request& r, TimeUs now) {
  int target = -1;
  if (epd_scenario_ && r.modality == Modality::Multimodal &&
      mm_plan_[r.id].encode_inst >= 0) {
    target = mm_plan_[r.id].decode_inst;
    if (target < 0) {
      int64_t best_load = std::numeric_limits<int64_t>::max();
      for (const auto& inst : instances_) {
        if (!inst.healthy || inst.pool != placement_.decode_pool) continue;
        int64_t load = running_tokens(inst, requests_);
        if (load < best_load) {
          best_load = load;
          target = inst.id;
        }
      }
      if (target < 0) target = inst_id;
    }
  } else if (cfg_.policy == RoutePolicy::SloAware && !epd_scenario_) {
    target = dispatch_decode(r, instances_, requests_);
  } else {
    // Static policies keep decode where prefill ran when it fits.
    const Instance& self = instances_[inst_id];
    bool fits = self.healthy &&
                static_cast<int64_t>(self.decode_set.size()) < self.token_budget;
    target = fits ? inst_id : dispatch_decode(r, instances_, requests_);
  }

  if (target == inst_id) {
    instances_[inst_id].decode_set.push_back(r.id);
    r.state = RequestState::Decoding;
    return;
  }
  if (target >= 0) {
    // The kv travels with the request; it is accounted on the destination
    // when the transfer lands.
    instances_[inst_id].stats.kv_used_tokens -= r.kv_resident;
    xt_release(r);
    r.state = RequestState::Migrating;
    ++counters_.migrations;
    enqueue_transfer(target,
                     TransferTask{r.id, r.kv_resident, TransferKind::KvMigration,
                                  RequestState::Decoding},
                     now);
    return;
  }
  r.state = RequestState::Preempted;  // kv parked on origin; retried later
  pending_decode_.push_back(r.id);
}

void Engine::complete_request(int inst_id, Request& r, TimeUs now) {
  Instance& inst = instances_[inst_id];
  auto it = std::find(inst.decode_set.begin(), inst.decode_set.end(), r.id);
  if (it != inst.decode_set.end()) inst.decode_set.erase(it);
  inst.stats.kv_used_tokens -= r.kv_resident;
  xt_release(r);
  r.finish = now;
  r.state = RequestState::Complete;
  ++terminal_;
}

void Engine::fail_request(Request& r) {
  if (r.state == RequestState::Complete || r.state == RequestState::Failed) {
    return;
  }
  r.state = RequestState::Failed;
  ++counters_.failed_requests;
  ++terminal_;
}

// ---------------------------------------------------------------------------
// Transfers
// ---------------------------------------------------------------------------

void Engine::enqueue_transfer(int target, TransferTask task, TimeUs now) {
  instances_[target].migration_queue.push_back(task);
  start_next_transfer(target, now);
}

void Engine::start_next_transfer(int inst_id, TimeUs now) {
  Instance& inst = instances_[inst_id];
  if (active_transfer_[inst_id] || inst.migration_queue.empty() || !inst.healthy) {
    return;
  }
  TransferTask task = inst.migration_queue.front();
  inst.migration_queue.pop_front();
  active_transfer_[inst_id] = task;
  double ms = static_cast<double>(task.tokens) /
              cfg_.sim.migration_bandwidth_tokens_per_ms;
  if (task.kind == TransferKind::Recovery) ms += cfg_.kv.recovery.setup_ms;
  push_event(now + std::max<TimeUs>(1, us_from_ms(ms)),
             EventKind::TransferComplete, inst_id, epoch_[inst_id]);
}

void Engine::on_transfer_complete(int inst_id, int64_t epoch, TimeUs now) {
  if (epoch != epoch_[inst_id]) return;
  Instance& inst = instances_[inst_id];
  TransferTask task = *active_transfer_[inst_id];
  active_transfer_[inst_id].reset();
  Request& r = requests_[task.request_id];
  r.origin_instance = inst_id;

  if (task.resume_state == RequestState::Decoding) {
    inst.stats.kv_used_tokens += r.kv_resident;
    inst.decode_set.push_back(r.id);
    r.state = RequestState::Decoding;
    xt_touch(inst_id, r, r.kv_resident);
  } else {
    if (task.kind == TransferKind::Recovery && r.kv_resident > 0) {
      inst.stats.kv_used_tokens += r.kv_resident;
      xt_touch(inst_id, r, r.kv_resident);
    }
    r.state = RequestState::Prefilling;
    enqueue_prefill_ordered(inst, r.id);
  }

  start_next_transfer(inst_id, now);
  maybe_start_step(inst_id, now);
}

// ---------------------------------------------------------------------------
// Heartbeats
// ---------------------------------------------------------------------------

void Engine::on_heartbeat(TimeUs now) {
  ++heartbeats_;

  if (cfg_.kv.enabled) {
    for (const auto& inst : instances_) {
      if (!inst.healthy) continue;
      index_.sync_instance(inst.id,
                           stores_[inst.id]->resident_blocks(CacheTier::DRAM),
                           now);
    }
  }

  if (cfg_.policy == RoutePolicy::SloAware && !epd_scenario_) {
    std::vector<RoleChange> changes = maybe_switch_roles(
        instances_, requests_, prefill_pressure_, cfg_.slo, cfg_.pd, now);
    prefill_pressure_ = false;
    for (const auto& c : changes) {
      // Applied as a distinct event so the flip lands on the iteration
      // boundary right after this heartbeat.
      push_event(now, EventKind::RoleSwitch, c.instance,
                 static_cast<int64_t>(c.to));
    }
  }

  retry_pending_prefill(now);
  retry_pending_decode(now);
  if (cfg_.colocation == ColocationMode::Colocate && !epd_scenario_) {
    maybe_migrate_offline(now);
  }
  observe_dp_balance();

  // Safety net: queued work on an idle instance always gets a step.
  for (const auto& inst : instances_) {
    maybe_start_step(inst.id, now);
  }

  if (terminal_ >= requests_.size()) return;  // all settled; clock can stop

  bool cluster_active = false;
  for (const auto& inst : instances_) {
    if (inst.stepping || inst.has_work() || active_transfer_[inst.id]) {
      cluster_active = true;
      break;
    }
  }
  bool waiters = !pending_prefill_.empty() || !pending_decode_.empty();
  if (!cluster_active && waiters) {
    if (++stalled_heartbeats_ > 100) {
      // Nothing can ever serve these; fail them instead of spinning.
      for (int64_t id : pending_prefill_) fail_request(requests_[id]);
      for (int64_t id : pending_decode_) fail_request(requests_[id]);
      pending_prefill_.clear();
      pending_decode_.clear();
    }
  } else {
    stalled_heartbeats_ = 0;
  }
  if (terminal_ >= requests_.size()) return;
  if (heartbeats_ > 2000000) {
    // Defensive bound; a healthy scenario drains long before this.
    for (auto& r : requests_) fail_request(r);
    return;
  }
  push_event(now + us_from_ms(cfg_.sim.heartbeat_ms), EventKind::Heartbeat, 0, 0);
}

void Engine::retry_pending_prefill(TimeUs now) {
  std::deque<int64_t> still;
  while (!pending_prefill_.empty()) {
    int64_t id = pending_prefill_.front();
    pending_prefill_.pop_front();
    Request& r = requests_[id];
    if (r.state == RequestState::Failed) continue;
    if (epd_scenario_ && r.modality == Modality::Multimodal &&
        r.image_units > 0 && r.encode_done == 0) {
      arrive_multimodal(r, now);
      if (r.state == RequestState::Queued) still.push_back(id);
      continue;
    }
    bool need_switch = false;
    int target = pick_prefill_instance(r, &need_switch);
    if (target < 0) {
      if (need_switch) prefill_pressure_ = true;
      still.push_back(id);
      continue;
    }
    admit_prefill(target, r, now);
  }
  pending_prefill_ = std::move(still);
}

void Engine::retry_pending_decode(TimeUs now) {
  std::deque<int64_t> still;
  while (!pending_decode_.empty()) {
    int64_t id = pending_decode_.front();
    pending_decode_.pop_front();
    Request& r = requests_[id];
    if (r.state == RequestState::Failed) continue;
    int origin = r.origin_instance.value_or(-1);
    int target = dispatch_decode(r, instances_, requests_);
    if (target < 0) {
      int64_t need = r.kv_resident > 0 ? r.kv_resident : r.input_tokens;
      int64_t max_cap = 0;
      for (const auto& inst : instances_) {
        if (serves_decode(inst.pool) || inst.id == origin) {
          max_cap = std::max(max_cap, inst.kv_capacity_tokens);
        }
      }
      if (need > max_cap) {
        fail_request(r);
        continue;
      }
      still.push_back(id);
      continue;
    }
    if (target == origin) {
      instances_[target].decode_set.push_back(id);
      r.state = RequestState::Decoding;
      maybe_start_step(target, now);
      continue;
    }
    if (origin >= 0) instances_[origin].stats.kv_used_tokens -= r.kv_resident;
    xt_release(r);
    r.state = RequestState::Migrating;
    ++counters_.migrations;
    enqueue_transfer(target, TransferTask{id, r.kv_resident,
                                          TransferKind::KvMigration,
                                          RequestState::Decoding},
                     now);
  }
  pending_decode_ = std::move(still);
}

void Engine::maybe_migrate_offline(TimeUs now) {
  for (auto& dst : instances_) {
    if (!dst.healthy || !serves_prefill(dst.pool)) continue;
    if (dst.stepping || dst.has_work() || active_transfer_[dst.id]) continue;
    double idle_ms = ms_from_us(now - dst.idle_since);
    if (idle_ms < cfg_.coloc.migrate_idle_threshold_ms) continue;

    // Take the largest offline decode off the most kv-loaded instance.
    int src = -1;
    int64_t pick = -1;
    int64_t best_kv = -1;
    for (auto& cand : instances_) {
      if (!cand.healthy || cand.id == dst.id) continue;
      for (int64_t id : cand.decode_set) {
        const Request& r = requests_[id];
        if (r.cls != RequestClass::Offline) continue;
        if (r.kv_resident > best_kv) {
          best_kv = r.kv_resident;
          src = cand.id;
          pick = id;
        }
      }
    }
    if (pick < 0) return;
    Instance& s = instances_[src];
    Request& r = requests_[pick];
    s.decode_set.erase(std::find(s.decode_set.begin(), s.decode_set.end(), pick));
    s.stats.kv_used_tokens -= r.kv_resident;
    xt_release(r);
    r.state = RequestState::Migrating;
    ++counters_.offline_decode_migrations;
    enqueue_transfer(dst.id, TransferTask{pick, r.kv_resident,
                                          TransferKind::KvMigration,
                                          RequestState::Decoding},
                     now);
  }
}

void Engine::observe_dp_balance() {
  std::vector<DPGroup> groups;
  for (const auto& inst : instances_) {
    if (!inst.healthy || !serves_decode(inst.pool)) continue;
    DPGroup g;
    g.id = inst.id;
    g.kv_capacity_tokens = inst.kv_capacity_tokens;
    DPBatch b;
    for (int64_t id : inst.decode_set) {
      b.seq_tokens.push_back(requests_[id].kv_resident);
    }
    if (!b.seq_tokens.empty()) g.batches.push_back(std::move(b));
    groups.push_back(std::move(g));
  }
  if (groups.size() < 2) return;
  std::vector<MigrationPlan> plans =
      plan_migration(groups, 2048, cfg_.profile);
  counters_.dp_migration_plans += static_cast<int64_t>(plans.size());
}

// ---------------------------------------------------------------------------
// Faults and role switches
// ---------------------------------------------------------------------------

void Engine::on_role_switch(int inst_id, PoolTag to, TimeUs now) {
  Instance& inst = instances_[inst_id];
  if (!inst.healthy) return;
  inst.pool = to;
  inst.cooldown_until = now + us_from_ms(cfg_.pd.switch_cooldown_ms);
  ++counters_.role_switches;
  maybe_start_step(inst_id, now);
}

void Engine::on_fault(int inst_id, bool rejoin, TimeUs now) {
  Instance& inst = instances_[inst_id];
  if (rejoin) {
    if (inst.healthy) return;
    inst.healthy = true;
    inst.idle_since = now;
    inst.idle_marked = true;
    inst.recover_at = 0;
    maybe_start_step(inst_id, now);
    return;
  }
  if (!inst.healthy) return;

  inst.healthy = false;
  inst.recover_at = now + us_from_ms(cfg_.sim.recovery_ms);
  ++counters_.faults;
  ++epoch_[inst_id];  // in-flight step/transfer events become stale
  inst.stepping = false;
  cur_batch_[inst_id] = Batch{};

  // Collect everything resident; device memory (HBM) is gone, host tiers keep
  // their replicas.
  std::vector<int64_t> victims;
  for (int64_t id : inst.encode_queue) victims.push_back(id);
  for (int64_t id : inst.prefill_queue) victims.push_back(id);
  for (int64_t id : inst.decode_set) victims.push_back(id);
  if (active_transfer_[inst_id]) {
    victims.push_back(active_transfer_[inst_id]->request_id);
    active_transfer_[inst_id].reset();
  }
  for (const auto& t : inst.migration_queue) victims.push_back(t.request_id);
  inst.encode_queue.clear();
  inst.prefill_queue.clear();
  inst.decode_set.clear();
  inst.migration_queue.clear();
  inst.stats.kv_used_tokens = 0;

  if (cfg_.kv.enabled) {
    stores_[inst_id]->drop_tier(CacheTier::HBM);
    index_.drop_instance(inst_id);
  }

  // Encode-stage victims just re-enter dispatch; there is no kv to recover.
  std::vector<RecoveryRequest> resident;
  std::vector<int64_t> encode_redo;
  for (int64_t id : victims) {
    Request& r = requests_[id];
    if (r.state == RequestState::Complete || r.state == RequestState::Failed) {
      continue;
    }
    if (r.modality == Modality::Multimodal && r.encode_done == 0) {
      encode_redo.push_back(id);
      continue;
    }
    RecoveryRequest rr;
    rr.request_id = id;
    rr.cls = r.cls;
    rr.prefix_tokens = std::max<int64_t>(r.kv_resident, 1);
    if (cfg_.kv.enabled) {
      rr.tokens = tokens_[id];
      if (r.prefill_done >= r.prefill_target && !rr.tokens.empty()) {
        bool all = true;
        for (BlockHash h : block_hashes(rr.tokens, cfg_.kv.block_size)) {
          if (!stores_[inst_id]->contains(CacheTier::DRAM, h) &&
              !stores_[inst_id]->contains(CacheTier::SSD, h)) {
            all = false;
            break;
          }
        }
        rr.replica_survives = all;
      }
    }
    resident.push_back(std::move(rr));
  }

  std::vector<RouteCandidate> targets;
  for (const auto& other : instances_) {
    if (other.id == inst_id) continue;
    targets.push_back(RouteCandidate{other.id, other.healthy,
                                     queued_prefill_tokens(other, requests_)});
  }
  std::vector<RecoveryDecision> decisions;
  if (!resident.empty()) {
    decisions = plan_fault_recovery(resident, targets, index_, cfg_.profile,
                                    cfg_.kv.recovery, cfg_.kv.block_size);
  }

  for (const auto& d : decisions) {
    Request& r = requests_[d.request_id];
    if (d.target_instance < 0) {
      fail_request(r);
      continue;
    }
    if (d.action == RecoveryAction::Migrate) {
      ++counters_.recoveries_migrate;
      r.state = RequestState::Migrating;
      enqueue_transfer(
          d.target_instance,
          TransferTask{r.id, r.kv_resident, TransferKind::Recovery,
                       r.prefill_done >= r.prefill_target
                           ? RequestState::Decoding
                           : RequestState::Prefilling},
          now);
    } else {
      ++counters_.recoveries_recompute;
      r.prefill_target = std::max<int64_t>(r.kv_resident, r.prefill_target);
      r.prefill_done = 0;
      r.kv_resident = 0;
      r.decode_credit = static_cast<double>(r.tokens_generated);
      r.state = RequestState::Prefilling;
      r.origin_instance = d.target_instance;
      enqueue_prefill_ordered(instances_[d.target_instance], r.id);
      maybe_start_step(d.target_instance, now);
    }
  }
  for (int64_t id : encode_redo) {
    Request& r = requests_[id];
    r.state = RequestState::Queued;
    mm_plan_[id] = MMPlan{};
    arrive_multimodal(r, now);
  }
  // Requests parked in the global decode queue with kv on this instance lost
  // it; force recompute on retry.
  for (int64_t id : pending_decode_) {
    Request& r = requests_[id];
    if (r.origin_instance && *r.origin_instance == inst_id) {
      r.prefill_target = std::max<int64_t>(r.kv_resident, r.prefill_target);
      r.prefill_done = 0;
      r.kv_resident = 0;
      r.origin_instance.reset();
    }
  }
}

// ---------------------------------------------------------------------------
// KV store and paged-memory integration
// ---------------------------------------------------------------------------

void Engine::kv_store_prompt(int inst_id, const Request& r) {
  if (!cfg_.kv.enabled) return;
  if (r.id >= static_cast<int64_t>(tokens_.size())) return;
  const auto& toks = tokens_[r.id];
  if (toks.empty()) return;
  stores_[inst_id]->put_blocks(block_hashes(toks, cfg_.kv.block_size),
                               CacheTier::HBM);
}

void Engine::xt_touch(int inst_id, Request& r, int64_t token_count) {
  if (!cfg_.xtensor.enabled || xt_skip_[r.id] || token_count <= 0) return;
  PagePool& pool = *pools_[inst_id];
  auto& sess = sessions_[r.id];
  if (!sess || session_owner_[r.id] != inst_id) {
    if (sess && session_owner_[r.id] >= 0) xt_release(r);
    int64_t reserve = r.prefill_target + r.true_output_tokens + 2 * pool.page_size();
    sess = pool.create_session(reserve);
    session_owner_[r.id] = inst_id;
  }
  try {
    pool.ensure_mapped(*sess, token_count);
    if (cfg_.xtensor.prefetch) pool.prefetch_next(*sess, token_count);
  } catch (const OutOfPages&) {
    pool.reclaim_reusable(16);
    try {
      pool.ensure_mapped(*sess, token_count);
    } catch (const OutOfPages&) {
      xt_skip_[r.id] = true;  // pool exhausted; stop tracking this request
    }
  }
}

void Engine::xt_release(Request& r) {
  if (!cfg_.xtensor.enabled) return;
  auto& sess = sessions_[r.id];
  int owner = session_owner_[r.id];
  if (sess && owner >= 0 && !sess->completed) {
    pools_[owner]->complete_session(*sess);
  }
  sess.reset();
  session_owner_[r.id] = -1;
}

// ---------------------------------------------------------------------------
// Result assembly
// ---------------------------------------------------------------------------

SimResult Engine::finalize(TimeUs end_time) {
  for (auto& r : requests_) {
    fail_request(r);  // no-op for terminal requests
  }
  SimResult out;
  out.end_time = end_time;
  out.counters = counters_;
  if (cfg_.xtensor.enabled) {
    for (const auto& pool : pools_) {
      const MapCounters& c = pool->counters();
      out.counters.xtensor.maps += c.maps;
      out.counters.xtensor.unmaps += c.unmaps;
      out.counters.xtensor.remaps += c.remaps;
      out.counters.xtensor.prefetch_hits += c.prefetch_hits;
    }
  }
  out.requests.reserve(requests_.size());
  for (const auto& r : requests_) {
    RequestRecord rec;
    rec.id = r.id;
    rec.cls = r.cls;
    rec.modality = r.modality;
    rec.arrival = r.arrival;
    rec.first_token = r.first_token;
    rec.finish = r.finish;
    rec.input_tokens = r.input_tokens;
    rec.image_units = r.image_units;
    rec.tokens_generated = r.tokens_generated;
    rec.true_output_tokens = r.true_output_tokens;
    rec.slo_ttft_ms = r.slo_ttft_ms;
    rec.slo_tpot_ms = r.slo_tpot_ms;
    rec.final_state = r.state;
    if (cfg_.sim.record_token_times) rec.token_times = token_times_[r.id];
    out.requests.push_back(std::move(rec));
  }
  for (const auto& inst : instances_) {
    InstanceRecord rec;
    rec.id = inst.id;
    rec.final_pool = inst.pool;
    rec.busy_ms = ms_from_us(inst.stats.busy_us);
    rec.steps = inst.stats.steps;
    rec.utilization =
        end_time > 0 ? static_cast<double>(inst.stats.busy_us) /
                           static_cast<double>(end_time)
                     : 0.0;
    out.instances.push_back(rec);
  }
  out.metadata["schema_version"] = 1;
  out.metadata["policy"] = to_string(cfg_.policy);
  out.metadata["colocation"] = to_string(cfg_.colocation);
  out.metadata["seed"] = cfg_.sim.seed;
  if (epd_scenario_) {
    out.metadata["epd_mode"] = to_string(cfg_.epd.mode);
    out.metadata["epd_strategy"] = to_string(strategy_);
    out.metadata["epd_limits"] = {{"max_encode_batch", limits_.max_encode_batch},
                                  {"token_budget", limits_.token_budget}};
  }
  return out;
}

}  // namespace

SimResult run_simulation(const std::vector<TraceRecord>& trace,
                         const ScenarioConfig& config) {
  Engine engine(trace, config);
  return engine.run();
}

EPDStrategy select_strategy(const std::vector<TraceRecord>& sample,
                            const ScenarioConfig& config) {
  EPDStrategy best = EPDStrategy::E_P_D;
  double best_goodput = -1.0;
  int64_t best_migrations = std::numeric_limits<int64_t>::max();
  for (EPDStrategy s :
       {EPDStrategy::E_P_D, EPDStrategy::EP_D, EPDStrategy::ED_P}) {
    ScenarioConfig c = config;
    c.epd.mode = EPDMode::Hybrid;
    c.epd.strategy = s;
    SimResult r = run_simulation(sample, c);
    int64_t good = 0;
    for (const auto& rec : r.requests) {
      if (rec.final_state != RequestState::Complete || !rec.first_token ||
          !rec.finish) {
        continue;
      }
      double ttft = ms_from_us(*rec.first_token - rec.arrival);
      if (ttft > rec.slo_ttft_ms) continue;
      if (rec.tokens_generated > 1) {
        double tpot = ms_from_us(*rec.finish - *rec.first_token) /
                      static_cast<double>(rec.tokens_generated - 1);
        if (tpot > rec.slo_tpot_ms) continue;
      }
      ++good;
    }
    double seconds = r.end_time > 0 ? static_cast<double>(r.end_time) / 1e6 : 1.0;
    double goodput = static_cast<double>(good) / seconds;
    bool better = goodput > best_goodput + 1e-12;
    bool tie = std::abs(goodput - best_goodput) <= 1e-12;
    if (better || (tie && r.counters.migrations < best_migrations)) {
      best = s;
      best_goodput = std::max(goodput, best_goodput);
      best_migrations = r.counters.migrations;
    }
  }
  return best;
}

nlohmann::json SimResult::to_json() const {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["end_time_us"] = end_time;
  j["metadata"] = metadata;
  nlohmann::json jc;
  jc["preemptions"] = counters.preemptions;
  jc["role_switches"] = counters.role_switches;
  jc["migrations"] = counters.migrations;
  jc["offline_decode_migrations"] = counters.offline_decode_migrations;
  jc["faults"] = counters.faults;
  jc["recoveries_recompute"] = counters.recoveries_recompute;
  jc["recoveries_migrate"] = counters.recoveries_migrate;
  jc["failed_requests"] = counters.failed_requests;
  jc["need_role_switch_events"] = counters.need_role_switch_events;
  jc["prefix_cache_lookups"] = counters.prefix_cache_lookups;
  jc["prefix_cache_hit_tokens"] = counters.prefix_cache_hit_tokens;
  jc["dp_migration_plans"] = counters.dp_migration_plans;
  jc["eplb_table_version"] = counters.eplb_table_version;
  jc["xtensor_maps"] = counters.xtensor.maps;
  jc["xtensor_unmaps"] = counters.xtensor.unmaps;
  jc["xtensor_remaps"] = counters.xtensor.remaps;
  jc["xtensor_prefetch_hits"] = counters.xtensor.prefetch_hits;
  j["counters"] = jc;
  j["requests"] = nlohmann::json::array();
  for (const auto& r : requests) {
    nlohmann::json jr;
    jr["id"] = r.id;
    jr["class"] = to_string(r.cls);
    jr["modality"] = to_string(r.modality);
    jr["arrival_us"] = r.arrival;
    jr["first_token_us"] =
        r.first_token ? nlohmann::json(*r.first_token) : nlohmann::json();
    jr["finish_us"] = r.finish ? nlohmann::json(*r.finish) : nlohmann::json();
    jr["input_tokens"] = r.input_tokens;
    jr["image_units"] = r.image_units;
    jr["tokens_generated"] = r.tokens_generated;
    jr["state"] = to_string(r.final_state);
    if (!r.token_times.empty()) jr["token_times_us"] = r.token_times;
    j["requests"].push_back(std::move(jr));
  }
  j["instances"] = nlohmann::json::array();
  for (const auto& i : instances) {
    nlohmann::json ji;
    ji["id"] = i.id;
    ji["final_pool"] = to_string(i.final_pool);
    ji["busy_ms"] = i.busy_ms;
    ji["steps"] = i.steps;
    ji["utilization"] = i.utilization;
    j["instances"].push_back(std::move(ji));
  }
  return j;
}

}  // namespace servesim
