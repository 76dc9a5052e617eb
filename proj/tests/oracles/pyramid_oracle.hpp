#pragma once

// Subset-lattice oracle: enumerates l-combinations with std::prev_permutation
// over a selector mask and computes memory sets by membership counting.

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace oracle {

struct Group {
  std::vector<std::string> keywords;
  std::vector<std::uint64_t> memories;
};

inline std::vector<Group> enumerate_level(const std::vector<std::string>& sorted_keys,
                                          const std::map<std::string, std::vector<std::uint64_t>>& postings,
                                          std::size_t l) {
  std::vector<Group> out;
  std::vector<bool> select(sorted_keys.size(), false);
  std::fill(select.begin(), select.begin() + static_cast<long>(l), true);
  do {
    Group g;
    for (std::size_t i = 0; i < sorted_keys.size(); ++i) {
      if (select[i]) g.keywords.push_back(sorted_keys[i]);
    }
    std::map<std::uint64_t, std::size_t> hits;
    for (const auto& k : g.keywords) {
      auto it = postings.find(k);
      if (it == postings.end()) continue;
      for (auto id : std::set<std::uint64_t>(it->second.begin(), it->second.end())) ++hits[id];
    }
    for (const auto& [id, n] : hits) {
      if (n == g.keywords.size()) g.memories.push_back(id);
    }
    out.push_back(std::move(g));
  } while (std::prev_permutation(select.begin(), select.end()));
  return out;
}

/// Expected traversal: level n down to 1, each level ordered by memory count
/// descending then keyword tuple ascending.
inline std::vector<Group> expected_traversal(std::vector<std::string> keys,
                                             const std::map<std::string, std::vector<std::uint64_t>>& postings) {
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  std::vector<Group> out;
  for (std::size_t l = keys.size(); l >= 1; --l) {
    auto level = enumerate_level(keys, postings, l);
    std::sort(level.begin(), level.end(), [](const Group& a, const Group& b) {
      if (a.memories.size() != b.memories.size()) return a.memories.size() > b.memories.size();
      return a.keywords < b.keywords;
    });
    out.insert(out.end(), level.begin(), level.end());
  }
  return out;
}

inline std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  std::uint64_t r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

}  // namespace oracle
