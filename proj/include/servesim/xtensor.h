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
#include <deque>
#include <map>
#include <optional>
#include <vector>

#include "servesim/common.h"

namespace servesim {

struct OutOfRange : SimError {
  explicit OutOfRange(const std::string& what) : SimError(what) {}
};

struct Unmapped : SimError {
  explicit Unmapped(const std::string& what) : SimError(what) {}
};

enum class PageStatus { Free, Allocated, Mapped, Reusable };

struct PhysicalPage {
  int page_id = 0;
  PageStatus status = PageStatus::Free;
  int owner_session = -1;  // -1 when unowned
};

struct MapCounters {
  int64_t maps = 0;
  int64_t unmaps = 0;
  int64_t remaps = 0;  // set remaps and single-page remaps
  int64_t prefetch_hits = 0;
};

struct XTensorSession {
  int session_id = 0;
  int64_t virt_start = 0;  // token-unit virtual address
  int64_t max_seq_len = 0;
  // Gap-free prefix: mapping[i] is the physical page backing page index i.
  std::vector<int> mapping;
  std::optional<int> prefetched;  // page pre-mapped for the next page index
  bool completed = false;
};

// Fixed-size physical page pool with a logically contiguous per-session view.
// Completed sessions leave their pages Reusable, grouped as sets keyed by
// page count so an equal-size newcomer remaps the whole set at once.
class PagePool {
 public:
  PagePool(int num_pages, int64_t page_size_tokens);

  XTensorSession create_session(int64_t max_seq_len);

  // (page_idx, offset) for a token-unit virtual offset. Throws OutOfRange /
  // Unmapped as SimError subclasses.
  std::pair<int64_t, int64_t> translate(const XTensorSession& session,
                                        int64_t virt_offset_tokens) const;

  // Grow the session's mapping to cover token_count tokens. Sources pages
  // from exact-size Reusable sets, then single Reusable pages, then Free
  // pages. Throws OutOfPages when the pool is exhausted.
  void ensure_mapped(XTensorSession& session, int64_t token_count);

  void complete_session(XTensorSession& session);

  // Map the next page ahead of need when the session sits on a page boundary.
  // No-op mid-page or on pool exhaustion.
  void prefetch_next(XTensorSession& session, int64_t current_tokens);

  // Return up to n Reusable pages to Free (pool pressure); counts unmaps.
  int reclaim_reusable(int n);

  const MapCounters& counters() const { return counters_; }
  int64_t page_size() const { return page_size_; }
  int free_pages() const { return static_cast<int>(free_.size()); }
  int reusable_pages() const;
  const std::vector<PhysicalPage>& pages() const { return pages_; }

 private:
  int take_page(int session_id);       // reusable single page or free page
  std::optional<std::vector<int>> take_reusable_set(int count);

  std::vector<PhysicalPage> pages_;
  std::deque<int> free_;
  // Reusable sets keyed by page count, FIFO within a key.
  std::map<int, std::deque<std::vector<int>>> reusable_sets_;
  int64_t page_size_;
  int next_session_id_ = 0;
  int64_t next_virt_start_ = 0;
  MapCounters counters_;
};

}  // namespace servesim
