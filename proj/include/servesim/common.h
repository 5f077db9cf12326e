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

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace servesim {

// Simulated time is kept in integer microseconds so that event arithmetic is
// exact and runs are bit-reproducible. Public interfaces speak milliseconds.
using TimeUs = int64_t;

inline TimeUs us_from_ms(double ms) {
  return static_cast<TimeUs>(std::llround(ms * 1000.0));
}

inline double ms_from_us(TimeUs us) { return static_cast<double>(us) / 1000.0; }

struct SimError : std::runtime_error {
  explicit SimError(const std::string& what) : std::runtime_error(what) {}
};

struct InvalidConfig : SimError {
  explicit InvalidConfig(const std::string& what) : SimError(what) {}
};

struct InvalidBatch : SimError {
  explicit InvalidBatch(const std::string& what) : SimError(what) {}
};

struct MalformedTrace : SimError {
  MalformedTrace(const std::string& what, int row)
      : SimError(what + " (row " + std::to_string(row) + ")"), row(row) {}
  int row;
};

struct NoCapacity : SimError {
  explicit NoCapacity(const std::string& what) : SimError(what) {}
};

struct OutOfPages : SimError {
  explicit OutOfPages(const std::string& what) : SimError(what) {}
};

struct Infeasible : SimError {
  explicit Infeasible(const std::string& what) : SimError(what) {}
};

}  // namespace servesim
