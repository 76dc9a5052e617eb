#pragma once

// Answer-quality metrics (F1, BLEU-1, ROUGE-L, ROUGE-2, METEOR) and the
// word/symbol token estimate used for cost accounting.
//
// All metrics operate on TokenizedText: lowercase maximal alphanumeric runs.
// Punctuation never forms tokens; it is only counted toward the symbol total.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mgretrieval/error.hpp"
#include "mgretrieval/text.hpp"

namespace mgr {

struct TokenizedText {
  std::vector<std::string> tokens;
  std::uint64_t words = 0;
  std::uint64_t symbols = 0;
};

inline TokenizedText tokenize(std::string_view text) {
  TokenizedText out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      out.tokens.push_back(std::move(current));
      current.clear();
    }
  };
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (detail::is_word_char(c)) {
      current.push_back(detail::ascii_lower(ch));
    } else {
      flush();
      if (!detail::is_space(c)) ++out.symbols;
    }
  }
  flush();
  out.words = out.tokens.size();
  return out;
}

/// Word and symbol tallies. Kept as integers so that sums over calls are exact
/// and the token estimate of a sum equals the sum of estimates up to rounding
/// of a single multiplication.
struct TokenCount {
  std::uint64_t words = 0;
  std::uint64_t symbols = 0;

  double estimate() const { return 1.1 * static_cast<double>(words) + 0.35 * static_cast<double>(symbols); }

  TokenCount& operator+=(const TokenCount& o) {
    words += o.words;
    symbols += o.symbols;
    return *this;
  }
  friend TokenCount operator+(TokenCount a, const TokenCount& b) { return a += b; }
  friend bool operator==(const TokenCount&, const TokenCount&) = default;
};

inline TokenCount count_tokens(std::string_view text) {
  TokenCount c;
  bool in_word = false;
  for (char ch : text) {
    auto u = static_cast<unsigned char>(ch);
    if (detail::is_word_char(u)) {
      if (!in_word) ++c.words;
      in_word = true;
    } else {
      in_word = false;
      if (!detail::is_space(u)) ++c.symbols;
    }
  }
  return c;
}

/// tokens = 1.1 w + 0.35 s
inline double estimate_tokens(std::string_view text) { return count_tokens(text).estimate(); }

struct MetricScores {
  double f1 = 0.0;
  double bleu1 = 0.0;
  double rouge_l = 0.0;
  double rouge_2 = 0.0;
  double meteor = 0.0;

  friend bool operator==(const MetricScores&, const MetricScores&) = default;
};

inline constexpr double kDefaultRougeBeta = 1.2;

namespace detail {

inline std::unordered_map<std::string, std::size_t> counts(const std::vector<std::string>& toks) {
  std::unordered_map<std::string, std::size_t> m;
  for (const auto& t : toks) ++m[t];
  return m;
}

inline double set_f1(const std::vector<std::string>& pred, const std::vector<std::string>& ref) {
  std::set<std::string> p(pred.begin(), pred.end());
  std::set<std::string> r(ref.begin(), ref.end());
  if (p.empty() || r.empty()) return 0.0;
  std::size_t common = 0;
  for (const auto& t : p) common += r.count(t);
  if (common == 0) return 0.0;
  double precision = static_cast<double>(common) / static_cast<double>(p.size());
  double recall = static_cast<double>(common) / static_cast<double>(r.size());
  return 2.0 * precision * recall / (precision + recall);
}

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

/// Set-based token F1, maximized over references.
inline double f1(std::string_view prediction, const std::vector<std::string>& references) {
  if (references.empty()) throw UndefinedMetricError("f1: no references");
  auto pred = tokenize(prediction).tokens;
  double best = 0.0;
  bool any_reference = false;
  for (const auto& r : references) {
    auto ref = tokenize(r).tokens;
    if (ref.empty()) continue;
    any_reference = true;
    best = std::max(best, detail::set_f1(pred, ref));
  }
  if (!any_reference) throw UndefinedMetricError("f1: all references are empty");
  return best;
}

/// Clipped unigram precision times brevity penalty. The effective reference
/// length is the reference length closest to the candidate length, ties going
/// to the shorter reference.
inline double bleu1(std::string_view prediction, const std::vector<std::string>& references) {
  auto cand = tokenize(prediction).tokens;
  if (cand.empty()) return 0.0;
  if (references.empty()) throw UndefinedMetricError("bleu1: no references");

  std::unordered_map<std::string, std::size_t> max_ref;
  std::size_t c = cand.size();
  std::size_t r = 0;
  bool have_r = false;
  for (const auto& ref_text : references) {
    auto ref = tokenize(ref_text).tokens;
    for (const auto& [tok, n] : detail::counts(ref)) max_ref[tok] = std::max(max_ref[tok], n);
    auto diff = [c](std::size_t len) { return len > c ? len - c : c - len; };
    if (!have_r || diff(ref.size()) < diff(r) || (diff(ref.size()) == diff(r) && ref.size() < r)) {
      r = ref.size();
      have_r = true;
    }
  }

  std::size_t clipped = 0;
  for (const auto& [tok, n] : detail::counts(cand)) {
    auto it = max_ref.find(tok);
    if (it != max_ref.end()) clipped += std::min(n, it->second);
  }
  double p1 = static_cast<double>(clipped) / static_cast<double>(c);
  double bp = c > r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
  return bp * p1;
}

inline double rouge_l(std::string_view prediction, std::string_view reference,
                      double beta = kDefaultRougeBeta) {
  auto ref = tokenize(reference).tokens;
  if (ref.empty()) throw UndefinedMetricError("rouge_l: empty reference");
  auto pred = tokenize(prediction).tokens;
  if (pred.empty()) return 0.0;
  auto lcs = static_cast<double>(detail::lcs_length(pred, ref));
  if (lcs == 0.0) return 0.0;
  double recall = lcs / static_cast<double>(ref.size());
  double precision = lcs / static_cast<double>(pred.size());
  double b2 = beta * beta;
  return (1.0 + b2) * recall * precision / (recall + b2 * precision);
}

/// Clipped reference-bigram recall. References shorter than two tokens score 0.
inline double rouge_2(std::string_view prediction, std::string_view reference) {
  auto ref = tokenize(reference).tokens;
  auto pred = tokenize(prediction).tokens;
  if (ref.size() < 2) return 0.0;
  std::map<std::pair<std::string, std::string>, std::size_t> ref_bigrams, pred_bigrams;
  for (std::size_t i = 0; i + 1 < ref.size(); ++i) ++ref_bigrams[{ref[i], ref[i + 1]}];
  for (std::size_t i = 0; i + 1 < pred.size(); ++i) ++pred_bigrams[{pred[i], pred[i + 1]}];
  std::size_t overlap = 0, total = 0;
  for (const auto& [bg, n] : ref_bigrams) {
    total += n;
    auto it = pred_bigrams.find(bg);
    if (it != pred_bigrams.end()) overlap += std::min(n, it->second);
  }
  return static_cast<double>(overlap) / static_cast<double>(total);
}

struct MeteorAlignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
};

namespace detail {

inline MeteorAlignment alignment_stats(const std::vector<long>& target) {
  MeteorAlignment a;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i] < 0) continue;
    ++a.matches;
    bool continues = i > 0 && target[i - 1] >= 0 && target[i] == target[i - 1] + 1;
    if (!continues) ++a.chunks;
  }
  return a;
}

/// Depth-first search over alignments that keep the maximum number of
/// matches, pruning on the chunk count. Only repeated tokens branch.
class ChunkSearch {
 public:
  ChunkSearch(const std::vector<std::string>& pred, const std::vector<std::string>& ref, std::size_t budget)
      : pred_(pred), budget_(budget), used_(ref.size(), false), target_(pred.size(), -1) {
    std::map<std::string, std::size_t> in_ref;
    for (std::size_t j = 0; j < ref.size(); ++j) {
      positions_[ref[j]].push_back(static_cast<long>(j));
      ++in_ref[ref[j]];
    }
    std::map<std::string, std::size_t> in_pred;
    for (const auto& t : pred) ++in_pred[t];
    for (const auto& [tok, n] : in_pred) {
      auto r = in_ref.count(tok) ? in_ref[tok] : 0;
      skips_left_[tok] = n > r ? n - r : 0;
    }
  }

  std::vector<long> run() {
    visit(0, 0);
    return best_;
  }

 private:
  void visit(std::size_t i, std::size_t chunks) {
    if (!best_.empty() && chunks >= best_chunks_) return;
    if (nodes_++ > budget_ && !best_.empty()) return;
    if (i == pred_.size()) {
      best_ = target_;
      best_chunks_ = chunks;
      return;
    }
    const auto& tok = pred_[i];
    long prev = i > 0 ? target_[i - 1] : -2;
    auto it = positions_.find(tok);
    if (it != positions_.end()) {
      // try the chunk-extending position first so the first leaf is greedy
      std::vector<long> order;
      for (long j : it->second) {
        if (j == prev + 1 && prev >= 0) order.insert(order.begin(), j);
        else order.push_back(j);
      }
      for (long j : order) {
        auto uj = static_cast<std::size_t>(j);
        if (used_[uj]) continue;
        bool extends = prev >= 0 && j == prev + 1;
        used_[uj] = true;
        target_[i] = j;
        visit(i + 1, chunks + (extends ? 0 : 1));
        used_[uj] = false;
        target_[i] = -1;
      }
    }
    auto& skips = skips_left_[tok];
    if (skips > 0) {
      --skips;
      visit(i + 1, chunks);
      ++skips;
    }
  }

  const std::vector<std::string>& pred_;
  std::size_t budget_;
  std::size_t nodes_ = 0;
  std::map<std::string, std::vector<long>> positions_;
  std::map<std::string, std::size_t> skips_left_;
  std::vector<bool> used_;
  std::vector<long> target_;
  std::vector<long> best_;
  std::size_t best_chunks_ = 0;
};

}  // namespace detail

inline constexpr std::size_t kMeteorSearchBudget = 200000;

/// Exact-match unigram alignment with the maximum number of matches and,
/// among those, the fewest chunks. The search is exhaustive up to
/// `search_budget` nodes; past that the best alignment found so far is used.
inline MeteorAlignment meteor_align(const std::vector<std::string>& pred,
                                    const std::vector<std::string>& ref,
                                    std::size_t search_budget = kMeteorSearchBudget) {
  return detail::alignment_stats(detail::ChunkSearch(pred, ref, search_budget).run());
}

/// Exact-match METEOR: F_mean = 10PR/(R+9P), Penalty = 0.5 (ch/m)^3.
inline double meteor(std::string_view prediction, std::string_view reference) {
  auto pred = tokenize(prediction).tokens;
  auto ref = tokenize(reference).tokens;
  if (pred.empty() || ref.empty()) return 0.0;
  auto al = meteor_align(pred, ref);
  if (al.matches == 0) return 0.0;
  double m = static_cast<double>(al.matches);
  double precision = m / static_cast<double>(pred.size());
  double recall = m / static_cast<double>(ref.size());
  double f_mean = 10.0 * precision * recall / (recall + 9.0 * precision);
  double penalty = 0.5 * std::pow(static_cast<double>(al.chunks) / m, 3.0);
  return f_mean * (1.0 - penalty);
}

/// All five metrics. Single-reference metrics take the best score over the
/// references; empty references are skipped.
inline MetricScores score_answer(std::string_view prediction,
                                 const std::vector<std::string>& references,
                                 double rouge_beta = kDefaultRougeBeta) {
  MetricScores s;
  s.f1 = f1(prediction, references);
  s.bleu1 = bleu1(prediction, references);
  for (const auto& r : references) {
    if (tokenize(r).tokens.empty()) continue;
    s.rouge_l = std::max(s.rouge_l, rouge_l(prediction, r, rouge_beta));
    s.rouge_2 = std::max(s.rouge_2, rouge_2(prediction, r));
    s.meteor = std::max(s.meteor, meteor(prediction, r));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Aggregation

/// One scored response plus the cost observables collected for it.
struct ScoredResponse {
  std::string category;
  MetricScores scores;
  double calls = 0.0;
  double tokens = 0.0;
  double seconds = 0.0;
};

struct CategoryRow {
  std::string category;
  std::size_t count = 0;
  MetricScores mean;
  double mean_calls = 0.0;
  double mean_tokens = 0.0;
  double mean_seconds = 0.0;
};

struct AggregateReport {
  std::vector<CategoryRow> categories;  // categories with at least one question
  CategoryRow overall;                  // weighted by per-category question counts
};

namespace detail {

inline void accumulate(CategoryRow& row, const ScoredResponse& r) {
  ++row.count;
  row.mean.f1 += r.scores.f1;
  row.mean.bleu1 += r.scores.bleu1;
  row.mean.rouge_l += r.scores.rouge_l;
  row.mean.rouge_2 += r.scores.rouge_2;
  row.mean.meteor += r.scores.meteor;
  row.mean_calls += r.calls;
  row.mean_tokens += r.tokens;
  row.mean_seconds += r.seconds;
}

inline void divide(CategoryRow& row) {
  if (row.count == 0) return;
  auto n = static_cast<double>(row.count);
  row.mean.f1 /= n;
  row.mean.bleu1 /= n;
  row.mean.rouge_l /= n;
  row.mean.rouge_2 /= n;
  row.mean.meteor /= n;
  row.mean_calls /= n;
  row.mean_tokens /= n;
  row.mean_seconds /= n;
}

}  // namespace detail

/// Per-category means and their question-count weighted average.
/// `category_order` fixes the row order; categories not listed follow in
/// lexicographic order.
inline AggregateReport aggregate(const std::vector<ScoredResponse>& responses,
                                 const std::vector<std::string>& category_order = {}) {
  std::map<std::string, CategoryRow> rows;
  for (const auto& r : responses) {
    auto& row = rows[r.category];
    row.category = r.category;
    detail::accumulate(row, r);
  }
  for (auto& [_, row] : rows) detail::divide(row);

  AggregateReport out;
  for (const auto& c : category_order) {
    auto it = rows.find(c);
    if (it == rows.end()) continue;
    out.categories.push_back(it->second);
    rows.erase(it);
  }
  for (auto& [_, row] : rows) out.categories.push_back(row);

  out.overall.category = "overall";
  for (const auto& row : out.categories) {
    auto w = static_cast<double>(row.count);
    out.overall.count += row.count;
    out.overall.mean.f1 += w * row.mean.f1;
    out.overall.mean.bleu1 += w * row.mean.bleu1;
    out.overall.mean.rouge_l += w * row.mean.rouge_l;
    out.overall.mean.rouge_2 += w * row.mean.rouge_2;
    out.overall.mean.meteor += w * row.mean.meteor;
    out.overall.mean_calls += w * row.mean_calls;
    out.overall.mean_tokens += w * row.mean_tokens;
    out.overall.mean_seconds += w * row.mean_seconds;
  }
  detail::divide(out.overall);
  return out;
}

}  // namespace mgr
