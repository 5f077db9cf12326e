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

#include "servesim/request.h"

namespace servesim {

const char* to_string(RequestState s) {
  switch (s) {
    case RequestState::Queued: return "Queued";
    case RequestState::Encoding: return "Encoding";
    case RequestState::Prefilling: return "Prefilling";
    case RequestState::Decoding: return "Decoding";
    case RequestState::Preempted: return "Preempted";
    case RequestState::Migrating: return "Migrating";
    case RequestState::Complete: return "Complete";
    case RequestState::Failed: return "Failed";
  }
  return "?";
}

const char* to_string(RequestClass c) {
  return c == RequestClass::Online ? "online" : "offline";
}

const char* to_string(Modality m) {
  return m == Modality::Text ? "text" : "multimodal";
}

bool lifecycle_edge_allowed(RequestState from, RequestState to) {
  using S = RequestState;
  if (from == to) return true;
  switch (from) {
    case S::Queued:
      return to == S::Encoding || to == S::Prefilling || to == S::Failed;
    case S::Encoding:
      return to == S::Prefilling || to == S::Migrating || to == S::Failed;
    case S::Prefilling:
      return to == S::Decoding || to == S::Preempted || to == S::Migrating ||
             to == S::Failed;
    case S::Decoding:
      return to == S::Complete || to == S::Preempted || to == S::Migrating ||
             to == S::Failed;
    case S::Preempted:
      return to == S::Prefilling || to == S::Decoding || to == S::Migrating ||
             to == S::Failed;
    case S::Migrating:
      return to == S::Prefilling || to == S::Decoding || to == S::Failed;
    case S::Complete:
    case S::Failed:
      return false;  // terminal
  }
  return false;
}

}  // namespace servesim
