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

#include <chrono>
#include <fstream>
#include <iostream>
#include <random>

#include <CLI11.hpp>

#include "servesim/beam.h"
#include "servesim/metrics.h"
#include "servesim/rng.h"
#include "servesim/sim.h"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitTrace = 3;

servesim::RoutePolicy parse_policy(const std::string& s) {
  if (s == "slo-aware") return servesim::RoutePolicy::SloAware;
  if (s == "min-load") return servesim::RoutePolicy::MinLoad;
  if (s == "round-robin") return servesim::RoutePolicy::RoundRobin;
  return servesim::route_policy_from_string(s);
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw servesim::InvalidConfig("cannot write: " + path);
  out << text;
}

int cmd_simulate(const std::string& trace_path, const std::string& config_path,
                 const std::string& policy, const std::string& format,
                 const std::string& out_path) {
  servesim::ScenarioConfig cfg = servesim::ScenarioConfig::load(config_path);
  if (!policy.empty()) cfg.policy = parse_policy(policy);
  std::vector<servesim::TraceRecord> trace;
  try {
    trace = servesim::load_trace_csv(trace_path);
  } catch (const servesim::MalformedTrace& e) {
    std::cerr << "trace error: " << e.what() << "\n";
    return kExitTrace;
  }
  servesim::SimResult result = servesim::run_simulation(trace, cfg);
  servesim::Report report = servesim::compute_metrics(result);
  write_text(out_path, servesim::render_report(
                           report, servesim::report_format_from_string(format)));
  return 0;
}

int cmd_gen_trace(const std::string& spec_path, const std::string& out_path) {
  std::ifstream in(spec_path);
  if (!in) throw servesim::InvalidConfig("cannot open trace spec: " + spec_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw servesim::InvalidConfig(std::string("trace spec parse error: ") +
                                  e.what());
  }
  servesim::TraceConfig cfg = servesim::TraceConfig::from_json(j);
  servesim::save_trace_csv(out_path, servesim::gen_trace(cfg));
  return 0;
}

int cmd_compare(const std::string& trace_path, const std::string& config_path,
                const std::vector<std::string>& policies,
                const std::string& out_path) {
  servesim::ScenarioConfig cfg = servesim::ScenarioConfig::load(config_path);
  std::vector<servesim::TraceRecord> trace;
  try {
    trace = servesim::load_trace_csv(trace_path);
  } catch (const servesim::MalformedTrace& e) {
    std::cerr << "trace error: " << e.what() << "\n";
    return kExitTrace;
  }
  std::ostringstream out;
  out << "policy,goodput_req_s,slo_attainment,ttft_p99_ms,failed\n";
  for (const std::string& p : policies) {
    servesim::ScenarioConfig c = cfg;
    c.policy = parse_policy(p);
    servesim::Report rep =
        servesim::compute_metrics(servesim::run_simulation(trace, c));
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s,%.3f,%.3f,%.3f,%lld\n", p.c_str(),
                  rep.total.goodput_req_s, rep.total.slo_attainment,
                  rep.total.ttft_p99_ms,
                  static_cast<long long>(rep.total.failed));
    out << buf;
  }
  write_text(out_path, out.str());
  return 0;
}

int cmd_profile(const std::string& overlap_path) {
  servesim::OverlapProfile p;
  if (!overlap_path.empty()) {
    std::ifstream in(overlap_path);
    if (!in) {
      throw servesim::InvalidConfig("cannot open overlap profile: " +
                                    overlap_path);
    }
    nlohmann::json j;
    in >> j;
    p = servesim::OverlapProfile::from_json(j);
  }
  servesim::DualStreamEstimate est = servesim::dual_stream_estimate(p);
  std::printf("comm_single_ms      %.3f\n", p.comm_single_ms);
  std::printf("comm_dual_ms        %.3f\n", p.comm_dual_ms);
  std::printf("compute_single_ms   %.3f\n", p.compute_single_ms);
  std::printf("compute_dual_ms     %.3f\n", p.compute_dual_ms);
  std::printf("overlap_ratio       %.3f\n", p.overlap_ratio);
  std::printf("num_layers          %d\n", p.num_layers);
  std::printf("exposed_ms          %.3f\n", est.exposed_ms);
  std::printf("saved_per_layer_ms  %.3f\n", est.saved_per_layer_ms);
  std::printf("total_saved_ms      %.3f\n", est.total_saved_ms);
  return 0;
}

int cmd_beam_bench(int top_k, int beam_width, int steps, uint64_t seed) {
  servesim::Rng rng(seed);
  std::vector<servesim::Hypothesis> beam(static_cast<size_t>(beam_width));
  for (int i = 0; i < beam_width; ++i) beam[i].slot_id = i;
  int64_t inspected_total = 0;
  auto t0 = std::chrono::steady_clock::now();
  for (int s = 0; s < steps; ++s) {
    int tok = 0;
    for (auto& h : beam) {
      h.expansions.clear();
      std::vector<double> lp(top_k);
      for (auto& v : lp) v = rng.uniform(-10.0, 0.0);
      std::sort(lp.rbegin(), lp.rend());
      for (double v : lp) h.expansions.emplace_back(tok++, v);
    }
    servesim::BeamExpandResult r = servesim::expand_beam(beam, beam_width);
    inspected_total += r.inspected;
    servesim::commit_beam(r.selected, beam);
  }
  auto t1 = std::chrono::steady_clock::now();
  double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  int64_t brute = static_cast<int64_t>(steps) * beam_width * top_k;
  std::printf("steps               %d\n", steps);
  std::printf("candidates_total    %lld\n", static_cast<long long>(brute));
  std::printf("inspected_total     %lld\n",
              static_cast<long long>(inspected_total));
  std::printf("inspected_fraction  %.4f\n",
              static_cast<double>(inspected_total) /
                  static_cast<double>(brute));
  std::printf("elapsed_ms          %.3f\n", ms);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deterministic cluster simulator for LLM serving"};
  app.require_subcommand(1);

  auto* sim_cmd = app.add_subcommand("simulate", "run one scenario on a trace");
  std::string trace_path, config_path, policy, format = "json", out_path;
  sim_cmd->add_option("--trace", trace_path, "trace csv")->required();
  sim_cmd->add_option("--config", config_path, "scenario json")->required();
  sim_cmd->add_option("--policy", policy,
                      "slo-aware | min-load | round-robin (overrides config)");
  sim_cmd->add_option("--format", format, "json | csv | table");
  sim_cmd->add_option("--out", out_path, "report file ('-' for stdout)");

  auto* gen_cmd = app.add_subcommand("gen-trace", "generate a synthetic trace");
  std::string spec_path, gen_out;
  gen_cmd->add_option("--spec", spec_path, "trace spec json")->required();
  gen_cmd->add_option("--out", gen_out, "output csv")->required();

  auto* cmp_cmd =
      app.add_subcommand("compare", "run several policies on one trace");
  std::vector<std::string> policies;
  std::string cmp_trace, cmp_config, cmp_out;
  cmp_cmd->add_option("--trace", cmp_trace, "trace csv")->required();
  cmp_cmd->add_option("--config", cmp_config, "scenario json")->required();
  cmp_cmd->add_option("--policies", policies, "policies to compare")
      ->required()
      ->delimiter(',');
  cmp_cmd->add_option("--out", cmp_out, "output ('-' for stdout)");

  auto* prof_cmd =
      app.add_subcommand("profile", "dual-stream overlap breakdown");
  std::string overlap_path;
  prof_cmd->add_option("--overlap-profile", overlap_path, "profile json");

  auto* beam_cmd = app.add_subcommand("beam-bench", "beam search microbench");
  int top_k = 64, beam_width = 8, steps = 256;
  uint64_t seed = 1;
  beam_cmd->add_option("--top-k", top_k, "expansions per hypothesis");
  beam_cmd->add_option("--beam-width", beam_width, "beam width");
  beam_cmd->add_option("--steps", steps, "decode steps");
  beam_cmd->add_option("--seed", seed, "rng seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (sim_cmd->parsed()) {
      return cmd_simulate(trace_path, config_path, policy, format, out_path);
    }
    if (gen_cmd->parsed()) return cmd_gen_trace(spec_path, gen_out);
    if (cmp_cmd->parsed()) {
      return cmd_compare(cmp_trace, cmp_config, policies, cmp_out);
    }
    if (prof_cmd->parsed()) return cmd_profile(overlap_path);
    if (beam_cmd->parsed()) {
      return cmd_beam_bench(top_k, beam_width, steps, seed);
    }
  } catch (const servesim::MalformedTrace& e) {
    std::cerr << "trace error: " << e.what() << "\n";
    return kExitTrace;
  } catch (const servesim::InvalidConfig& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const servesim::SimError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
