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

#include "servesim/trace.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "servesim/rng.h"

namespace servesim {

LengthDist LengthDist::from_json(const nlohmann::json& j) {
  LengthDist d;
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "fixed") {
    d.kind = Kind::Fixed;
    d.fixed_n = j.at("n").get<int64_t>();
  } else if (kind == "uniform") {
    d.kind = Kind::Uniform;
    d.uniform_lo = j.at("lo").get<int64_t>();
    d.uniform_hi = j.at("hi").get<int64_t>();
  } else if (kind == "lognormal") {
    d.kind = Kind::Lognormal;
    d.log_mu = j.at("mu").get<double>();
    d.log_sigma = j.at("sigma").get<double>();
    d.log_cap = j.value("cap", int64_t{8192});
  } else {
    throw InvalidConfig("unknown length distribution kind: " + kind);
  }
  return d;
}

void TraceConfig::validate() const {
  if (count < 0) throw InvalidConfig("count must be >= 0");
  if (rate_rps <= 0.0) throw InvalidConfig("rate_rps must be > 0");
  if (burst.enabled) {
    if (burst.high_rate_rps <= 0.0 || burst.low_rate_rps <= 0.0) {
      throw InvalidConfig("burst rates must be > 0");
    }
    if (burst.mean_dwell_ms <= 0.0) throw InvalidConfig("mean_dwell_ms must be > 0");
  }
  if (offline_fraction < 0.0 || offline_fraction > 1.0) {
    throw InvalidConfig("offline_fraction must be in [0, 1]");
  }
  if (multimodal_fraction < 0.0 || multimodal_fraction > 1.0) {
    throw InvalidConfig("multimodal_fraction must be in [0, 1]");
  }
}

TraceConfig TraceConfig::from_json(const nlohmann::json& j) {
  TraceConfig c;
  c.seed = j.value("seed", uint64_t{0});
  c.count = j.at("count").get<int64_t>();
  c.rate_rps = j.value("rate_rps", 1.0);
  if (j.contains("burst") && !j.at("burst").is_null()) {
    const auto& b = j.at("burst");
    c.burst.enabled = true;
    c.burst.high_rate_rps = b.at("high_rate_rps").get<double>();
    c.burst.low_rate_rps = b.at("low_rate_rps").get<double>();
    c.burst.mean_dwell_ms = b.at("mean_dwell_ms").get<double>();
  }
  if (j.contains("input_dist")) c.input_dist = LengthDist::from_json(j.at("input_dist"));
  if (j.contains("output_dist")) c.output_dist = LengthDist::from_json(j.at("output_dist"));
  if (j.contains("image_dist")) c.image_dist = LengthDist::from_json(j.at("image_dist"));
  c.offline_fraction = j.value("offline_fraction", 0.0);
  c.multimodal_fraction = j.value("multimodal_fraction", 0.0);
  c.slo_ttft_ms = j.value("slo_ttft_ms", 2000.0);
  c.slo_tpot_ms = j.value("slo_tpot_ms", 100.0);
  c.validate();
  return c;
}

namespace {

int64_t sample_length(const LengthDist& d, Rng& rng) {
  switch (d.kind) {
    case LengthDist::Kind::Fixed:
      return d.fixed_n;
    case LengthDist::Kind::Uniform:
      return static_cast<int64_t>(rng.uniform_int(d.uniform_lo, d.uniform_hi));
    case LengthDist::Kind::Lognormal: {
      int64_t v = static_cast<int64_t>(std::llround(rng.lognormal(d.log_mu, d.log_sigma)));
      return std::clamp<int64_t>(v, 1, d.log_cap);
    }
  }
  return 1;
}

}  // namespace

std::vector<TraceRecord> gen_trace(const TraceConfig& config) {
  config.validate();
  Rng rng(config.seed);
  std::vector<TraceRecord> trace;
  trace.reserve(config.count);

  double now_ms = 0.0;
  bool high_state = false;
  // Time left before the burst process flips state.
  double dwell_left_ms =
      config.burst.enabled ? rng.exponential(1.0 / config.burst.mean_dwell_ms) : 0.0;

  for (int64_t i = 0; i < config.count; ++i) {
    double rate_per_ms =
        (config.burst.enabled
             ? (high_state ? config.burst.high_rate_rps : config.burst.low_rate_rps)
             : config.rate_rps) /
        1000.0;
    if (config.burst.enabled) {
      // Competing exponentials: advance through state flips until the next
      // arrival lands inside the current dwell interval.
      double gap = rng.exponential(rate_per_ms);
      while (gap > dwell_left_ms) {
        gap -= dwell_left_ms;
        now_ms += dwell_left_ms;
        high_state = !high_state;
        double old_rate = rate_per_ms;
        rate_per_ms = (high_state ? config.burst.high_rate_rps
                                  : config.burst.low_rate_rps) /
                      1000.0;
        // Rescale the remaining gap to the new rate (memoryless property).
        gap *= old_rate / rate_per_ms;
        dwell_left_ms = rng.exponential(1.0 / config.burst.mean_dwell_ms);
      }
      dwell_left_ms -= gap;
      now_ms += gap;
    } else {
      now_ms += rng.exponential(rate_per_ms);
    }

    TraceRecord r;
    r.arrival_ms = std::round(now_ms * 1000.0) / 1000.0;  // microsecond grid
    r.cls = rng.uniform() < config.offline_fraction ? RequestClass::Offline
                                                    : RequestClass::Online;
    r.modality = rng.uniform() < config.multimodal_fraction ? Modality::Multimodal
                                                            : Modality::Text;
    r.input_tokens = std::max<int64_t>(1, sample_length(config.input_dist, rng));
    r.output_tokens = std::max<int64_t>(1, sample_length(config.output_dist, rng));
    r.image_units =
        r.modality == Modality::Multimodal
            ? std::max<int64_t>(1, sample_length(config.image_dist, rng))
            : 0;
    r.slo_ttft_ms = config.slo_ttft_ms;
    r.slo_tpot_ms = config.slo_tpot_ms;
    trace.push_back(r);
  }
  return trace;
}

namespace {

const char* kCsvHeader =
    "arrival_ms,class,modality,input_tokens,image_units,output_tokens,"
    "slo_ttft_ms,slo_tpot_ms";

}  // namespace

std::vector<TraceRecord> load_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MalformedTrace("cannot open trace file: " + path, 0);
  std::string line;
  if (!std::getline(in, line)) throw MalformedTrace("empty trace file", 0);
  // Tolerate a trailing \r from CRLF files.
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCsvHeader) throw MalformedTrace("bad header: " + line, 1);

  std::vector<TraceRecord> trace;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 8) throw MalformedTrace("expected 8 columns", row);

    TraceRecord r;
    try {
      r.arrival_ms = std::stod(fields[0]);
      if (fields[1] == "online") r.cls = RequestClass::Online;
      else if (fields[1] == "offline") r.cls = RequestClass::Offline;
      else throw MalformedTrace("bad class: " + fields[1], row);
      if (fields[2] == "text") r.modality = Modality::Text;
      else if (fields[2] == "multimodal") r.modality = Modality::Multimodal;
      else throw MalformedTrace("bad modality: " + fields[2], row);
      r.input_tokens = std::stoll(fields[3]);
      r.image_units = std::stoll(fields[4]);
      r.output_tokens = std::stoll(fields[5]);
      r.slo_ttft_ms = std::stod(fields[6]);
      r.slo_tpot_ms = std::stod(fields[7]);
    } catch (const MalformedTrace&) {
      throw;
    } catch (const std::exception&) {
      throw MalformedTrace("non-numeric field", row);
    }
    if (r.arrival_ms < 0.0) throw MalformedTrace("negative arrival", row);
    if (r.input_tokens < 1) throw MalformedTrace("input_tokens must be >= 1", row);
    if (r.output_tokens < 1) throw MalformedTrace("output_tokens must be >= 1", row);
    if (r.image_units < 0) throw MalformedTrace("negative image_units", row);
    if ((r.image_units == 0) != (r.modality == Modality::Text)) {
      throw MalformedTrace("image_units inconsistent with modality", row);
    }
    trace.push_back(r);
  }
  std::stable_sort(trace.begin(), trace.end(),
                   [](const TraceRecord& a, const TraceRecord& b) {
                     return a.arrival_ms < b.arrival_ms;
                   });
  return trace;
}

void save_trace_csv(const std::string& path, const std::vector<TraceRecord>& trace) {
  std::ofstream out(path);
  if (!out) throw SimError("cannot write trace file: " + path);
  out << kCsvHeader << "\n";
  char buf[64];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof(buf), "%.3f", r.arrival_ms);
    out << buf << ',' << to_string(r.cls) << ',' << to_string(r.modality) << ','
        << r.input_tokens << ',' << r.image_units << ',' << r.output_tokens << ',';
    std::snprintf(buf, sizeof(buf), "%.3f", r.slo_ttft_ms);
    out << buf << ',';
    std::snprintf(buf, sizeof(buf), "%.3f", r.slo_tpot_ms);
    out << buf << "\n";
  }
}

std::vector<Request> requests_from_trace(const std::vector<TraceRecord>& trace) {
  std::vector<Request> out;
  out.reserve(trace.size());
  int64_t id = 0;
  for (const auto& t : trace) {
    Request r;
    r.id = id++;
    r.cls = t.cls;
    r.modality = t.modality;
    r.arrival = us_from_ms(t.arrival_ms);
    r.input_tokens = t.input_tokens;
    r.prefill_target = t.input_tokens;
    r.image_units = t.image_units;
    r.true_output_tokens = t.output_tokens;
    r.slo_ttft_ms = t.slo_ttft_ms;
    r.slo_tpot_ms = t.slo_tpot_ms;
    out.push_back(r);
  }
  return out;
}

}  // namespace servesim
