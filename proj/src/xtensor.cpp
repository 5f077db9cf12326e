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

#include "servesim/xtensor.h"

#include <algorithm>

namespace servesim {

PagePool::PagePool(int num_pages, int64_t page_size_tokens)
    : page_size_(page_size_tokens) {
  if (num_pages < 0 || page_size_tokens < 1) {
    throw InvalidConfig("bad page pool parameters");
  }
  pages_.resize(num_pages);
  for (int i = 0; i < num_pages; ++i) {
    pages_[i].page_id = i;
    free_.push_back(i);
  }
}

XTensorSession PagePool::create_session(int64_t max_seq_len) {
  if (max_seq_len < 0) throw InvalidConfig("max_seq_len must be >= 0");
  XTensorSession s;
  s.session_id = next_session_id_++;
  s.virt_start = next_virt_start_;
  s.max_seq_len = max_seq_len;
  // Virtual ranges are disjoint by construction; no physical pages consumed.
  int64_t pages_span = (max_seq_len + page_size_ - 1) / page_size_;
  next_virt_start_ += pages_span * page_size_;
  return s;
}

std::pair<int64_t, int64_t> PagePool::translate(const XTensorSession& session,
                                                int64_t virt_offset_tokens) const {
  if (virt_offset_tokens < 0 || virt_offset_tokens >= session.max_seq_len) {
    throw OutOfRange("virtual offset outside session range");
  }
  int64_t page_idx = virt_offset_tokens / page_size_;
  int64_t offset = virt_offset_tokens % page_size_;
  if (page_idx >= static_cast<int64_t>(session.mapping.size())) {
    throw Unmapped("page not mapped");
  }
  return {page_idx, offset};
}

int PagePool::reusable_pages() const {
  int n = 0;
  for (const auto& [count, sets] : reusable_sets_) {
    n += count * static_cast<int>(sets.size());
  }
  return n;
}

std::optional<std::vector<int>> PagePool::take_reusable_set(int count) {
  auto it = reusable_sets_.find(count);
  if (it == reusable_sets_.end() || it->second.empty()) return std::nullopt;
  std::vector<int> set = std::move(it->second.front());
  it->second.pop_front();
  if (it->second.empty()) reusable_sets_.erase(it);
  return set;
}

int PagePool::take_page(int session_id) {
  // Break the smallest Reusable set first; the remainder stays Reusable under
  // its new size.
  if (!reusable_sets_.empty()) {
    auto it = reusable_sets_.begin();
    std::vector<int> set = std::move(it->second.front());
    it->second.pop_front();
    if (it->second.empty()) reusable_sets_.erase(it);
    int page = set.back();
    set.pop_back();
    if (!set.empty()) {
      reusable_sets_[static_cast<int>(set.size())].push_back(std::move(set));
    }
    pages_[page].status = PageStatus::Mapped;
    pages_[page].owner_session = session_id;
    counters_.remaps += 1;
    return page;
  }
  if (!free_.empty()) {
    int page = free_.front();
    free_.pop_front();
    pages_[page].status = PageStatus::Mapped;
    pages_[page].owner_session = session_id;
    counters_.maps += 1;
    return page;
  }
  return -1;
}

void PagePool::ensure_mapped(XTensorSession& session, int64_t token_count) {
  if (session.completed) throw SimError("session already completed");
  if (token_count > session.max_seq_len) {
    throw OutOfRange("token_count exceeds max_seq_len");
  }
  int64_t needed = (token_count + page_size_ - 1) / page_size_;
  int64_t mapped = static_cast<int64_t>(session.mapping.size());
  if (needed <= mapped) return;

  // Fresh session whose whole need matches a Reusable set: remap it in one
  // shot.
  if (mapped == 0 && !session.prefetched) {
    if (auto set = take_reusable_set(static_cast<int>(needed))) {
      for (int page : *set) {
        pages_[page].status = PageStatus::Mapped;
        pages_[page].owner_session = session.session_id;
        session.mapping.push_back(page);
      }
      counters_.remaps += 1;
      return;
    }
  }

  while (static_cast<int64_t>(session.mapping.size()) < needed) {
    if (session.prefetched) {
      session.mapping.push_back(*session.prefetched);
      session.prefetched.reset();
      counters_.prefetch_hits += 1;
      continue;
    }
    int page = take_page(session.session_id);
    if (page < 0) throw OutOfPages("physical page pool exhausted");
    session.mapping.push_back(page);
  }
}

void PagePool::complete_session(XTensorSession& session) {
  if (session.completed) throw SimError("session already completed");
  session.completed = true;
  for (int page : session.mapping) {
    pages_[page].status = PageStatus::Reusable;
    pages_[page].owner_session = -1;
  }
  if (session.prefetched) {
    pages_[*session.prefetched].status = PageStatus::Reusable;
    pages_[*session.prefetched].owner_session = -1;
    reusable_sets_[1].push_back({*session.prefetched});
    session.prefetched.reset();
  }
  if (!session.mapping.empty()) {
    reusable_sets_[static_cast<int>(session.mapping.size())].push_back(
        std::move(session.mapping));
  }
  session.mapping.clear();
}

void PagePool::prefetch_next(XTensorSession& session, int64_t current_tokens) {
  if (session.completed || session.prefetched) return;
  if (current_tokens <= 0 || current_tokens % page_size_ != 0) return;
  if (current_tokens >= session.max_seq_len) return;
  int64_t next_idx = current_tokens / page_size_;
  if (next_idx < static_cast<int64_t>(session.mapping.size())) return;
  int page = take_page(session.session_id);
  if (page < 0) return;  // silently skip on exhaustion
  session.prefetched = page;
}

int PagePool::reclaim_reusable(int n) {
  int reclaimed = 0;
  while (reclaimed < n && !reusable_sets_.empty()) {
    auto it = reusable_sets_.begin();
    std::vector<int>& set = it->second.front();
    while (!set.empty() && reclaimed < n) {
      int page = set.back();
      set.pop_back();
      pages_[page].status = PageStatus::Free;
      pages_[page].owner_session = -1;
      free_.push_back(page);
      counters_.unmaps += 1;
      ++reclaimed;
    }
    if (set.empty()) {
      it->second.pop_front();
      if (it->second.empty()) reusable_sets_.erase(it);
    } else {
      std::vector<int> rest = std::move(set);
      it->second.pop_front();
      if (it->second.empty()) reusable_sets_.erase(it);
      reusable_sets_[static_cast<int>(rest.size())].push_back(std::move(rest));
    }
  }
  return reclaimed;
}

}  // namespace servesim
