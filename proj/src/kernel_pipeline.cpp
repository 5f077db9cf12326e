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

#include "servesim/kernel_pipeline.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

namespace servesim {

void AllocatorConfig::validate() const {
  if (gamma_cube <= 0.0 || gamma_vector <= 0.0) {
    throw InvalidConfig("gamma must be > 0");
  }
  if (n_cube < 1 || n_vector < 1) throw InvalidConfig("unit counts must be >= 1");
}

double alignment_loss(const std::vector<OperatorWorkload>& cube_ops,
                      const std::vector<OperatorWorkload>& vector_ops,
                      const std::vector<int>& cube_units,
                      const std::vector<int>& vector_units,
                      const AllocatorConfig& config) {
  double tmin = std::numeric_limits<double>::infinity();
  double tmax = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < cube_ops.size(); ++i) {
    double t = cube_ops[i].work / (config.gamma_cube * cube_units[i]);
    tmin = std::min(tmin, t);
    tmax = std::max(tmax, t);
  }
  for (size_t j = 0; j < vector_ops.size(); ++j) {
    double t = vector_ops[j].work / (config.gamma_vector * vector_units[j]);
    tmin = std::min(tmin, t);
    tmax = std::max(tmax, t);
  }
  if (cube_ops.empty() && vector_ops.empty()) return 0.0;
  return tmax - tmin;
}

namespace {

constexpr double kEnumerationLimit = 1e6;

// Enumerate all unit vectors with each entry >= 1 and sum <= budget.
void enumerate_rec(int idx, int remaining, std::vector<int>& current,
                   const std::function<void(const std::vector<int>&)>& visit) {
  int n = static_cast<int>(current.size());
  if (idx == n) {
    visit(current);
    return;
  }
  int slots_after = n - idx - 1;
  for (int u = 1; u + slots_after <= remaining; ++u) {
    current[idx] = u;
    enumerate_rec(idx + 1, remaining - u, current, visit);
  }
}

std::vector<int> proportional_units(const std::vector<OperatorWorkload>& ops,
                                    int budget) {
  int n = static_cast<int>(ops.size());
  std::vector<int> units(n, 1);
  if (n == 0) return units;
  double total_work = 0.0;
  for (const auto& op : ops) total_work += op.work;
  int spare = budget - n;
  // Hand out the spare units by largest remaining per-unit time.
  for (int s = 0; s < spare; ++s) {
    int best = -1;
    double best_t = -1.0;
    for (int i = 0; i < n; ++i) {
      double t = ops[i].work / units[i];
      if (t > best_t) {
        best_t = t;
        best = i;
      }
    }
    if (best < 0) break;
    units[best] += 1;
  }
  (void)total_work;
  return units;
}

}  // namespace

UnitAllocation allocate_units(const std::vector<OperatorWorkload>& cube_ops,
                              const std::vector<OperatorWorkload>& vector_ops,
                              const AllocatorConfig& config) {
  config.validate();
  int nc = static_cast<int>(cube_ops.size());
  int nv = static_cast<int>(vector_ops.size());
  if (nc > config.n_cube || nv > config.n_vector) {
    throw Infeasible("more operators than units");
  }
  for (const auto& op : cube_ops) {
    if (op.work <= 0.0) throw InvalidConfig("operator work must be > 0");
  }
  for (const auto& op : vector_ops) {
    if (op.work <= 0.0) throw InvalidConfig("operator work must be > 0");
  }

  UnitAllocation best;
  best.cube_units.assign(nc, 1);
  best.vector_units.assign(nv, 1);

  double space = 1.0;
  for (int i = 0; i < nc; ++i) space *= std::max(1, config.n_cube - nc + 1);
  for (int j = 0; j < nv; ++j) space *= std::max(1, config.n_vector - nv + 1);

  if (space <= kEnumerationLimit) {
    double best_loss = std::numeric_limits<double>::infinity();
    std::vector<int> x(nc), y(nv);
    auto eval = [&](const std::vector<int>& xs, const std::vector<int>& ys) {
      double loss = alignment_loss(cube_ops, vector_ops, xs, ys, config);
      if (loss < best_loss) {
        best_loss = loss;
        best.cube_units = xs;
        best.vector_units = ys;
      }
    };
    std::function<void(const std::vector<int>&)> inner_done;
    if (nc == 0) {
      if (nv == 0) {
        best.achieved_loss = 0.0;
        return best;
      }
      enumerate_rec(0, config.n_vector, y, [&](const std::vector<int>& ys) {
        eval(x, ys);
      });
    } else if (nv == 0) {
      enumerate_rec(0, config.n_cube, x, [&](const std::vector<int>& xs) {
        eval(xs, y);
      });
    } else {
      enumerate_rec(0, config.n_cube, x, [&](const std::vector<int>& xs) {
        enumerate_rec(0, config.n_vector, y, [&](const std::vector<int>& ys) {
          eval(xs, ys);
        });
      });
    }
  } else {
    best.cube_units = proportional_units(cube_ops, config.n_cube);
    best.vector_units = proportional_units(vector_ops, config.n_vector);
    // Hill climb with single-unit moves: grow one allocation within budget, or
    // shift a unit between two operators of the same class.
    auto loss_of = [&](const std::vector<int>& xs, const std::vector<int>& ys) {
      return alignment_loss(cube_ops, vector_ops, xs, ys, config);
    };
    bool improved = true;
    double cur = loss_of(best.cube_units, best.vector_units);
    while (improved) {
      improved = false;
      for (int cls = 0; cls < 2; ++cls) {
        auto& units = cls == 0 ? best.cube_units : best.vector_units;
        int budget = cls == 0 ? config.n_cube : config.n_vector;
        int used = 0;
        for (int u : units) used += u;
        int n = static_cast<int>(units.size());
        for (int i = 0; i < n && !improved; ++i) {
          if (used < budget) {
            units[i] += 1;
            double l = loss_of(best.cube_units, best.vector_units);
            if (l < cur) {
              cur = l;
              improved = true;
              break;
            }
            units[i] -= 1;
          }
          for (int j = 0; j < n && !improved; ++j) {
            if (j == i || units[j] <= 1) continue;
            units[j] -= 1;
            units[i] += 1;
            double l = loss_of(best.cube_units, best.vector_units);
            if (l < cur) {
              cur = l;
              improved = true;
              break;
            }
            units[i] -= 1;
            units[j] += 1;
          }
        }
        if (improved) break;
      }
    }
  }

  best.achieved_loss =
      alignment_loss(cube_ops, vector_ops, best.cube_units, best.vector_units, config);
  return best;
}

void OverlapProfile::validate() const {
  if (overlap_ratio < 0.0 || overlap_ratio > 1.0) {
    throw InvalidConfig("overlap_ratio must be in [0, 1]");
  }
  if (comm_single_ms < 0.0 || comm_dual_ms < 0.0 || compute_single_ms < 0.0 ||
      compute_dual_ms < 0.0) {
    throw InvalidConfig("overlap profile times must be >= 0");
  }
  if (num_layers < 1) throw InvalidConfig("num_layers must be >= 1");
}

OverlapProfile OverlapProfile::from_json(const nlohmann::json& j) {
  OverlapProfile p;
  p.comm_single_ms = j.value("comm_single_ms", p.comm_single_ms);
  p.comm_dual_ms = j.value("comm_dual_ms", p.comm_dual_ms);
  p.compute_single_ms = j.value("compute_single_ms", p.compute_single_ms);
  p.compute_dual_ms = j.value("compute_dual_ms", p.compute_dual_ms);
  p.overlap_ratio = j.value("overlap_ratio", p.overlap_ratio);
  p.num_layers = j.value("num_layers", p.num_layers);
  p.validate();
  return p;
}

DualStreamEstimate dual_stream_estimate(const OverlapProfile& profile) {
  profile.validate();
  DualStreamEstimate e;
  e.exposed_ms = profile.comm_dual_ms * (1.0 - profile.overlap_ratio);
  double compute_overhead = profile.compute_dual_ms - profile.compute_single_ms;
  e.saved_per_layer_ms = profile.comm_single_ms - e.exposed_ms - compute_overhead;
  e.total_saved_ms = e.saved_per_layer_ms * profile.num_layers;
  return e;
}

}  // namespace servesim
