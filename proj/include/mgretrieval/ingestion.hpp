#pragma once

// Memory ingestion: keyword extraction, vocabulary matching and index update.

#include <algorithm>
#include <future>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mgretrieval/llm_gateway.hpp"
#include "mgretrieval/memory_store.hpp"
#include "mgretrieval/prompts.hpp"
#include "mgretrieval/structured_output.hpp"
#include "mgretrieval/text.hpp"

namespace mgr {

struct IngestOptions {
  std::size_t max_keywords_per_memory = 8;
  std::size_t max_match_candidates = 200;
  /// Number of extraction calls issued ahead of the sequential match/update step.
  std::size_t extraction_parallelism = 1;
};

struct MemoryInput {
  std::string question;
  std::string answer;
  std::optional<std::string> session;
  std::optional<Timestamp> ingested_at;
};

struct ExtractionOutcome {
  std::vector<std::string> raw_keywords;
  std::vector<std::string> matched;
  std::vector<std::string> novel;
  std::vector<std::string> final_keywords;
  bool used_llm = false;
  std::vector<std::string> warnings;
};

inline std::string render_memory_for_extraction(const MemoryInput& m) {
  std::string out = "Question: " + m.question + "\nAnswer: " + m.answer;
  if (m.session) out += "\nSession: " + *m.session;
  return out;
}

struct KeywordExtraction {
  std::vector<std::string> keywords;
  std::vector<std::string> warnings;
};

/// One extraction call. Keywords come back normalized, deduplicated and capped.
inline KeywordExtraction extract_keywords(const MemoryInput& memory, LlmGateway& gateway, const PromptSet& prompts,
                                          const IngestOptions& options = {}, CostTally* tally = nullptr) {
  ChatRequest req;
  req.role = RoleTag::extract;
  req.system_prompt =
      render_template(prompts.extract, "max_keywords", std::to_string(options.max_keywords_per_memory));
  req.user_prompt = render_memory_for_extraction(memory);
  auto resp = gateway.complete(req, tally);

  KeywordExtraction out;
  out.keywords = normalize_keywords(parse_keyword_list(resp.text).keywords);
  if (out.keywords.size() > options.max_keywords_per_memory) {
    out.warnings.push_back("extraction returned " + std::to_string(out.keywords.size()) + " keywords; truncated to " +
                           std::to_string(options.max_keywords_per_memory));
    out.keywords.resize(options.max_keywords_per_memory);
  }
  if (out.keywords.empty()) out.warnings.push_back("extraction returned no keywords; memory left unindexed");
  return out;
}

/// The `limit` vocabulary entries closest (normalized edit distance) to any of
/// `keywords`; ties keep vocabulary insertion order. Returns the whole
/// vocabulary when it fits.
inline std::vector<std::string> match_candidates(const std::vector<std::string>& keywords,
                                                 const KeywordVocabulary& vocabulary, std::size_t limit) {
  const auto& entries = vocabulary.entries();
  if (entries.size() <= limit) return entries;
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    double best = 1.0;
    for (const auto& k : keywords) best = std::min(best, normalized_edit_distance(k, entries[i]));
    scored.emplace_back(best, i);
  }
  std::stable_sort(scored.begin(), scored.end(), [](auto& a, auto& b) { return a.first < b.first; });
  scored.resize(limit);
  std::sort(scored.begin(), scored.end(), [](auto& a, auto& b) { return a.second < b.second; });
  std::vector<std::string> out;
  for (auto& [_, i] : scored) out.push_back(entries[i]);
  return out;
}

inline std::string render_match_request(const std::vector<std::string>& unmatched,
                                        const std::vector<std::string>& candidates) {
  std::string out = "New keywords:\n";
  for (const auto& k : unmatched) out += "- " + k + "\n";
  out += "\nExisting vocabulary:\n";
  for (const auto& k : candidates) out += "- " + k + "\n";
  return out;
}

/// Resolves raw keywords against the vocabulary. Exact normalized matches are
/// resolved locally; the model is consulted only for the rest, and only when
/// the vocabulary is non-empty.
inline ExtractionOutcome match_vocabulary(const std::vector<std::string>& raw, const KeywordVocabulary& vocabulary,
                                          LlmGateway& gateway, const PromptSet& prompts,
                                          const IngestOptions& options = {}, CostTally* tally = nullptr) {
  ExtractionOutcome out;
  out.raw_keywords = normalize_keywords(raw);
  if (out.raw_keywords.empty()) return out;

  auto add_unique = [](std::vector<std::string>& v, const std::string& k) {
    if (std::find(v.begin(), v.end(), k) == v.end()) v.push_back(k);
  };

  std::vector<std::string> unmatched;
  for (const auto& k : out.raw_keywords) {
    if (vocabulary.contains(k)) add_unique(out.matched, k);
    else unmatched.push_back(k);
  }

  if (!unmatched.empty() && !vocabulary.empty()) {
    ChatRequest req;
    req.role = RoleTag::match;
    req.system_prompt = prompts.match;
    req.user_prompt = render_match_request(unmatched, match_candidates(unmatched, vocabulary, options.max_match_candidates));
    auto resp = gateway.complete(req, tally);
    out.used_llm = true;
    auto result = parse_match_result(resp.text);

    for (const auto& k : unmatched) {
      bool resolved = false;
      for (const auto& [key, targets] : result.matches) {
        if (normalize_keyword(key) != k) continue;
        for (const auto& t : targets) {
          auto entry = normalize_keyword(t);
          if (entry.empty()) continue;
          if (vocabulary.contains(entry)) {
            add_unique(out.matched, entry);
            resolved = true;
          } else {
            out.warnings.push_back("matcher mapped '" + k + "' to '" + entry +
                                   "', which is not in the vocabulary; keeping it as new");
          }
        }
      }
      if (!resolved) add_unique(out.novel, k);
    }
  } else {
    for (const auto& k : unmatched) add_unique(out.novel, k);
  }

  for (const auto& k : out.matched) add_unique(out.final_keywords, k);
  for (const auto& k : out.novel) add_unique(out.final_keywords, k);
  return out;
}

struct IngestFailure {
  std::size_t index = 0;
  std::string message;
};

struct IngestedRecord {
  std::size_t index = 0;
  MemoryId id = 0;
  std::size_t vocabulary_size_before = 0;
  ExtractionOutcome outcome;
};

struct IngestReport {
  std::size_t records_added = 0;
  std::size_t records_indexed = 0;
  std::size_t new_vocabulary_entries = 0;
  std::size_t postings_updated = 0;
  CostTally aux;
  std::vector<IngestedRecord> records;
  std::vector<IngestFailure> failures;
  std::vector<std::string> warnings;
};

/// Adds every input to the bank. A record is stored only once its keywords
/// have been resolved; failures are collected per record and do not stop the
/// batch.
inline IngestReport ingest(const std::vector<MemoryInput>& inputs, MemoryBank& bank, LlmGateway& aux,
                           const PromptSet& prompts, const IngestOptions& options = {}) {
  IngestReport report;
  const std::size_t window = std::max<std::size_t>(1, options.extraction_parallelism);

  for (std::size_t base = 0; base < inputs.size(); base += window) {
    const std::size_t end = std::min(inputs.size(), base + window);

    struct Pending {
      std::optional<KeywordExtraction> extraction;
      std::string error;
      CostTally tally;
    };
    std::vector<Pending> pending(end - base);
    auto run_extraction = [&](std::size_t i) {
      auto& p = pending[i - base];
      const auto& in = inputs[i];
      try {
        if (is_blank(in.question)) throw ValidationError("question is empty");
        if (is_blank(in.answer)) throw ValidationError("answer is empty");
        p.extraction = extract_keywords(in, aux, prompts, options, &p.tally);
      } catch (const std::exception& e) {
        p.error = e.what();
      }
    };
    if (window == 1) {
      run_extraction(base);
    } else {
      std::vector<std::future<void>> jobs;
      for (std::size_t i = base; i < end; ++i) jobs.push_back(std::async(std::launch::async, run_extraction, i));
      for (auto& j : jobs) j.get();
    }

    for (std::size_t i = base; i < end; ++i) {
      auto& p = pending[i - base];
      report.aux += p.tally;
      if (!p.extraction) {
        report.failures.push_back({i, p.error});
        continue;
      }
      const auto& in = inputs[i];
      for (auto& w : p.extraction->warnings) report.warnings.push_back("record " + std::to_string(i) + ": " + w);
      try {
        IngestedRecord rec;
        rec.index = i;
        rec.vocabulary_size_before = bank.vocabulary().size();
        rec.outcome = match_vocabulary(p.extraction->keywords, bank.vocabulary(), aux, prompts, options, &report.aux);
        for (auto& w : rec.outcome.warnings) report.warnings.push_back("record " + std::to_string(i) + ": " + w);
        rec.id = bank.add_record(in.question, in.answer, in.session, in.ingested_at);
        ++report.records_added;
        if (!rec.outcome.final_keywords.empty()) {
          auto reg = bank.register_keywords(rec.id, rec.outcome.final_keywords);
          report.new_vocabulary_entries += reg.new_entries.size();
          report.postings_updated += reg.updated_postings;
          ++report.records_indexed;
        }
        report.records.push_back(std::move(rec));
      } catch (const std::exception& e) {
        report.failures.push_back({i, e.what()});
      }
    }
  }
  return report;
}

}  // namespace mgr
