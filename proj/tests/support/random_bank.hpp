#pragma once

#include <random>
#include <string>
#include <vector>

#include "mgretrieval/memory_store.hpp"

namespace testing_support {

inline std::vector<std::string> keyword_pool(std::size_t n) {
  std::vector<std::string> pool;
  for (std::size_t i = 0; i < n; ++i) pool.push_back("kw" + std::to_string(i));
  return pool;
}

/// Bank with up to `max_records` records, each tagged with 1..4 keywords drawn
/// from a pool of `pool_size`.
inline mgr::MemoryBank random_bank(std::mt19937& rng, std::size_t max_records, std::size_t pool_size) {
  mgr::MemoryBank bank;
  auto pool = keyword_pool(pool_size);
  std::size_t n = 1 + rng() % max_records;
  for (std::size_t i = 0; i < n; ++i) {
    std::optional<std::string> session;
    if (rng() % 2) session = "session_" + std::to_string(rng() % 5);
    auto ts = mgr::Timestamp{std::chrono::microseconds(1650000000000000LL + static_cast<long long>(rng() % 1000000000))};
    auto id = bank.add_record("question " + std::to_string(i) + " \"quoted\" é", "answer " + std::to_string(rng()),
                              session, ts);
    std::vector<std::string> kws;
    for (auto k = 1 + rng() % 4; k > 0; --k) kws.push_back(pool[rng() % pool.size()]);
    bank.register_keywords(id, mgr::normalize_keywords(kws));
  }
  return bank;
}

}  // namespace testing_support
