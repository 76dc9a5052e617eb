#pragma once

// Keyword pyramid: every non-empty subset of the query keywords, each mapped
// to the intersection of its keywords' posting lists, visited from the most
// specific level down.

#include <algorithm>
#include <cstdint>
#include <iterator>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mgretrieval/llm_gateway.hpp"
#include "mgretrieval/memory_store.hpp"
#include "mgretrieval/prompts.hpp"
#include "mgretrieval/structured_output.hpp"

namespace mgr {

inline constexpr std::size_t kMaxDepthCap = 8;

struct KeywordGroup {
  std::vector<std::string> keywords;  // sorted
  MemoryIdSet memories;

  std::size_t level() const { return keywords.size(); }
  friend bool operator==(const KeywordGroup&, const KeywordGroup&) = default;
};

inline MemoryIdSet intersect(const MemoryIdSet& a, const MemoryIdSet& b) {
  MemoryIdSet out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

inline MemoryIdSet unite(const MemoryIdSet& a, const MemoryIdSet& b) {
  MemoryIdSet out;
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

class KeywordPyramid {
 public:
  KeywordPyramid() = default;

  /// Builds the lattice for `query_keywords` over `mapping`. Duplicate keywords
  /// are collapsed; keywords missing from the mapping have empty posting lists.
  static KeywordPyramid build(const std::vector<std::string>& query_keywords,
                              const std::map<std::string, MemoryIdSet>& mapping) {
    KeywordPyramid p;
    p.query_keywords_ = query_keywords;
    std::vector<std::string> keys = query_keywords;
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    if (keys.empty()) throw ValidationError("build_pyramid: no query keywords");
    if (keys.size() > kMaxDepthCap) {
      throw ValidationError("build_pyramid: " + std::to_string(keys.size()) + " keywords exceeds the cap of " +
                            std::to_string(kMaxDepthCap));
    }
    const std::size_t n = keys.size();

    std::vector<MemoryIdSet> postings;
    for (const auto& k : keys) {
      auto it = mapping.find(k);
      postings.push_back(it == mapping.end() ? MemoryIdSet{} : it->second);
    }

    p.levels_.assign(n, {});
    for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
      KeywordGroup g;
      bool first = true;
      for (std::size_t i = 0; i < n; ++i) {
        if (!(mask & (1u << i))) continue;
        g.keywords.push_back(keys[i]);
        g.memories = first ? postings[i] : intersect(g.memories, postings[i]);
        first = false;
      }
      p.levels_[g.level() - 1].push_back(std::move(g));
    }
    for (auto& level : p.levels_) {
      std::sort(level.begin(), level.end(), [](const KeywordGroup& a, const KeywordGroup& b) {
        if (a.memories.size() != b.memories.size()) return a.memories.size() > b.memories.size();
        return a.keywords < b.keywords;
      });
    }
    for (std::size_t l = n; l >= 1; --l) {
      for (const auto& g : p.levels_[l - 1]) p.traversal_.push_back(g);
    }
    return p;
  }

  const std::vector<std::string>& query_keywords() const { return query_keywords_; }
  std::size_t depth() const { return levels_.size(); }

  /// Groups of size `l` (1-based), in traversal order.
  const std::vector<KeywordGroup>& level(std::size_t l) const { return levels_.at(l - 1); }
  const std::vector<KeywordGroup>& traversal() const { return traversal_; }
  std::size_t size() const { return traversal_.size(); }

  friend bool operator==(const KeywordPyramid&, const KeywordPyramid&) = default;

 private:
  std::vector<std::string> query_keywords_;
  std::vector<std::vector<KeywordGroup>> levels_;
  std::vector<KeywordGroup> traversal_;
};

inline KeywordPyramid build_pyramid(const std::vector<std::string>& query_keywords, const MemoryBank& bank) {
  return KeywordPyramid::build(query_keywords, bank.mapping());
}

struct GroupStep {
  const KeywordGroup* group = nullptr;
  std::size_t next_cursor = 0;
};

/// Group at `cursor` in traversal order, or nothing once exhausted.
inline std::optional<GroupStep> next_group(const KeywordPyramid& pyramid, std::size_t cursor) {
  if (cursor > pyramid.size()) throw std::out_of_range("next_group: cursor past the end of the pyramid");
  if (cursor == pyramid.size()) return std::nullopt;
  return GroupStep{&pyramid.traversal()[cursor], cursor + 1};
}

struct KeywordSelection {
  std::vector<std::string> keywords;  // model order, filtered to the vocabulary, capped
  std::vector<std::string> warnings;
};

inline std::string render_selection_request(const std::string& query, const KeywordVocabulary& vocabulary) {
  std::string out = "Question: " + query + "\n\nVocabulary:\n";
  for (const auto& k : vocabulary.entries()) out += "- " + k + "\n";
  return out;
}

/// One selection call. Keywords outside the vocabulary are dropped, duplicates
/// removed and the list capped at `depth_cap`. An unparsable reply yields an
/// empty selection with a warning.
inline KeywordSelection select_query_keywords(const std::string& query, const KeywordVocabulary& vocabulary,
                                              std::size_t depth_cap, LlmGateway& gateway, const PromptSet& prompts,
                                              CostTally* tally = nullptr) {
  if (depth_cap < 1 || depth_cap > kMaxDepthCap) {
    throw ValidationError("depth cap must be in [1, " + std::to_string(kMaxDepthCap) + "]");
  }
  if (vocabulary.empty()) throw ValidationError("select_query_keywords: vocabulary is empty");

  ChatRequest req;
  req.role = RoleTag::select;
  req.system_prompt = render_template(prompts.select, "max_keywords", std::to_string(depth_cap));
  req.user_prompt = render_selection_request(query, vocabulary);
  auto resp = gateway.complete(req, tally);

  KeywordSelection out;
  std::vector<std::string> picked;
  try {
    picked = parse_selection(resp.text).keywords;
  } catch (const SchemaError& e) {
    out.warnings.push_back(std::string("keyword selection unparsable: ") + e.what());
    return out;
  }
  for (const auto& k : normalize_keywords(picked)) {
    if (!vocabulary.contains(k)) {
      out.warnings.push_back("selected keyword '" + k + "' is not in the vocabulary; dropped");
      continue;
    }
    if (out.keywords.size() == depth_cap) {
      out.warnings.push_back("selected keyword '" + k + "' exceeds the depth cap; dropped");
      continue;
    }
    out.keywords.push_back(k);
  }
  return out;
}

}  // namespace mgr
