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

#include "servesim/metrics.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace servesim {

double percentile_nearest_rank(std::vector<double> samples, double p) {
  if (samples.empty()) return 0.0;
  std::sort(samples.begin(), samples.end());
  double frac = std::clamp(p / 100.0, 0.0, 1.0);
  size_t rank = static_cast<size_t>(
      std::ceil(frac * static_cast<double>(samples.size())));
  if (rank == 0) rank = 1;
  return samples[rank - 1];
}

namespace {

ClassMetrics metrics_for(const std::vector<const RequestRecord*>& recs,
                         double duration_ms) {
  ClassMetrics m;
  m.requests = static_cast<int64_t>(recs.size());
  std::vector<double> ttfts;
  std::vector<double> tpots;
  double tpot_sum = 0.0;
  int64_t tokens = 0;
  int64_t good_tokens = 0;
  int64_t slo_met = 0;
  for (const RequestRecord* r : recs) {
    if (r->final_state == RequestState::Failed) ++m.failed;
    if (r->final_state != RequestState::Complete) continue;
    ++m.completed;
    tokens += r->tokens_generated;
    bool meets = true;
    if (r->first_token) {
      double ttft = ms_from_us(*r->first_token - r->arrival);
      ttfts.push_back(ttft);
      if (ttft > r->slo_ttft_ms) meets = false;
    } else {
      meets = false;
    }
    if (r->first_token && r->finish && r->tokens_generated > 1) {
      double tpot = ms_from_us(*r->finish - *r->first_token) /
                    static_cast<double>(r->tokens_generated - 1);
      tpots.push_back(tpot);
      tpot_sum += tpot;
      if (tpot > r->slo_tpot_ms) meets = false;
    }
    if (meets) {
      ++slo_met;
      good_tokens += r->tokens_generated;
    }
  }
  m.percentiles_defined = !ttfts.empty();
  m.ttft_p50_ms = percentile_nearest_rank(ttfts, 50.0);
  m.ttft_p95_ms = percentile_nearest_rank(ttfts, 95.0);
  m.ttft_p99_ms = percentile_nearest_rank(ttfts, 99.0);
  m.tpot_p99_ms = percentile_nearest_rank(tpots, 99.0);
  m.tpot_mean_ms =
      tpots.empty() ? 0.0 : tpot_sum / static_cast<double>(tpots.size());
  (void)good_tokens;
  double seconds = duration_ms > 0.0 ? duration_ms / 1000.0 : 1.0;
  m.throughput_tokens_per_s = static_cast<double>(tokens) / seconds;
  m.serving_rate_req_s = static_cast<double>(m.completed) / seconds;
  m.goodput_req_s = static_cast<double>(slo_met) / seconds;
  if (m.requests > 0) {
    m.slo_attainment =
        static_cast<double>(slo_met) / static_cast<double>(m.requests);
  }
  return m;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

nlohmann::json class_json(const ClassMetrics& m) {
  nlohmann::json j;
  j["requests"] = m.requests;
  j["completed"] = m.completed;
  j["failed"] = m.failed;
  if (m.percentiles_defined) {
    j["ttft_p50_ms"] = fmt(m.ttft_p50_ms);
    j["ttft_p95_ms"] = fmt(m.ttft_p95_ms);
    j["ttft_p99_ms"] = fmt(m.ttft_p99_ms);
    j["tpot_mean_ms"] = fmt(m.tpot_mean_ms);
    j["tpot_p99_ms"] = fmt(m.tpot_p99_ms);
  } else {
    j["ttft_p50_ms"] = nullptr;
    j["ttft_p95_ms"] = nullptr;
    j["ttft_p99_ms"] = nullptr;
    j["tpot_mean_ms"] = nullptr;
    j["tpot_p99_ms"] = nullptr;
  }
  j["throughput_tokens_per_s"] = fmt(m.throughput_tokens_per_s);
  j["serving_rate_req_s"] = fmt(m.serving_rate_req_s);
  j["goodput_req_s"] = fmt(m.goodput_req_s);
  j["slo_attainment"] = fmt(m.slo_attainment);
  return j;
}

void csv_row(std::ostringstream& out, const char* name, const ClassMetrics& m) {
  out << name << ',' << m.requests << ',' << m.completed << ',' << m.failed
      << ',' << fmt(m.ttft_p50_ms) << ',' << fmt(m.ttft_p95_ms) << ','
      << fmt(m.ttft_p99_ms) << ',' << fmt(m.tpot_mean_ms) << ','
      << fmt(m.tpot_p99_ms) << ',' << fmt(m.throughput_tokens_per_s) << ','
      << fmt(m.serving_rate_req_s) << ',' << fmt(m.goodput_req_s) << ','
      << fmt(m.slo_attainment) << '\n';
}

void table_row(std::ostringstream& out, const char* name,
               const ClassMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "%-8s %8lld %9lld %6lld %12s %12s %12s %10s %10s %12s %12s %8s\n",
                name, static_cast<long long>(m.requests),
                static_cast<long long>(m.completed),
                static_cast<long long>(m.failed), fmt(m.ttft_p50_ms).c_str(),
                fmt(m.ttft_p95_ms).c_str(), fmt(m.ttft_p99_ms).c_str(),
                fmt(m.tpot_mean_ms).c_str(), fmt(m.tpot_p99_ms).c_str(),
                fmt(m.throughput_tokens_per_s).c_str(),
                fmt(m.goodput_req_s).c_str(), fmt(m.slo_attainment).c_str());
  out << buf;
}

}  // namespace

Report compute_metrics(const SimResult& result) {
  Report rep;
  rep.duration_ms = ms_from_us(result.end_time);
  rep.counters = result.counters;
  std::vector<const RequestRecord*> online, offline, total;
  for (const auto& r : result.requests) {
    total.push_back(&r);
    (r.cls == RequestClass::Online ? online : offline).push_back(&r);
  }
  rep.online = metrics_for(online, rep.duration_ms);
  rep.offline = metrics_for(offline, rep.duration_ms);
  rep.total = metrics_for(total, rep.duration_ms);
  return rep;
}

ReportFormat report_format_from_string(const std::string& s) {
  if (s == "json") return ReportFormat::Json;
  if (s == "csv") return ReportFormat::Csv;
  if (s == "table") return ReportFormat::Table;
  throw InvalidConfig("unknown report format: " + s);
}

std::string render_report(const Report& report, ReportFormat format) {
  switch (format) {
    case ReportFormat::Json: {
      nlohmann::json j;
      j["schema_version"] = 1;
      j["duration_ms"] = fmt(report.duration_ms);
      j["online"] = class_json(report.online);
      j["offline"] = class_json(report.offline);
      j["total"] = class_json(report.total);
      nlohmann::json jc;
      jc["preemptions"] = report.counters.preemptions;
      jc["role_switches"] = report.counters.role_switches;
      jc["migrations"] = report.counters.migrations;
      jc["offline_decode_migrations"] =
          report.counters.offline_decode_migrations;
      jc["faults"] = report.counters.faults;
      jc["recoveries_recompute"] = report.counters.recoveries_recompute;
      jc["recoveries_migrate"] = report.counters.recoveries_migrate;
      jc["failed_requests"] = report.counters.failed_requests;
      j["counters"] = jc;
      return j.dump(2) + "\n";
    }
    case ReportFormat::Csv: {
      std::ostringstream out;
      out << "class,requests,completed,failed,ttft_p50_ms,ttft_p95_ms,"
             "ttft_p99_ms,tpot_mean_ms,tpot_p99_ms,throughput_tokens_per_s,"
             "serving_rate_req_s,goodput_req_s,slo_attainment\n";
      csv_row(out, "online", report.online);
      csv_row(out, "offline", report.offline);
      csv_row(out, "total", report.total);
      return out.str();
    }
    case ReportFormat::Table: {
      std::ostringstream out;
      out << "duration_ms " << fmt(report.duration_ms) << "\n";
      char hdr[256];
      std::snprintf(hdr, sizeof(hdr),
                    "%-8s %8s %9s %6s %12s %12s %12s %10s %10s %12s %12s %8s\n",
                    "class", "requests", "completed", "failed", "ttft_p50",
                    "ttft_p95", "ttft_p99", "tpot_mean", "tpot_p99",
                    "throughput", "goodput", "slo");
      out << hdr;
      table_row(out, "online", report.online);
      table_row(out, "offline", report.offline);
      table_row(out, "total", report.total);
      return out.str();
    }
  }
  return "";
}

}  // namespace servesim
