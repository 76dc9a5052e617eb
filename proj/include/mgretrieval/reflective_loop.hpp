#pragma once

// Per-query reflective retrieval. Each round takes the next keyword group,
// drops memories already shown in earlier rounds, and asks the main model for
// an answer, a sufficiency flag and the ids of the memories worth keeping.
// The loop ends when the answer is accepted, the round budget is spent or the
// pyramid runs out; the final answer is then rewritten from the kept memories.

#include <algorithm>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mgretrieval/llm_gateway.hpp"
#include "mgretrieval/memory_store.hpp"
#include "mgretrieval/prompts.hpp"
#include "mgretrieval/pyramid.hpp"
#include "mgretrieval/structured_output.hpp"

namespace mgr {

struct RetrievalConfig {
  std::size_t depth_cap = 4;
  std::size_t max_rounds = 4;

  void validate() const {
    if (depth_cap < 1 || depth_cap > kMaxDepthCap) {
      throw ValidationError("depth must be in [1, " + std::to_string(kMaxDepthCap) + "]");
    }
    if (max_rounds < 1) throw ValidationError("max_rounds must be >= 1");
  }
};

enum class StopReason { accepted, max_rounds, pyramid_exhausted, no_keywords };

inline const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::accepted: return "accepted";
    case StopReason::max_rounds: return "max_rounds";
    case StopReason::pyramid_exhausted: return "pyramid_exhausted";
    case StopReason::no_keywords: return "no_keywords";
  }
  return "unknown";
}

/// R~ = R \ seen, then seen := seen U R.
inline MemoryIdSet filter_new(const MemoryIdSet& retrieved, MemoryIdSet& seen) {
  MemoryIdSet fresh;
  std::set_difference(retrieved.begin(), retrieved.end(), seen.begin(), seen.end(), std::back_inserter(fresh));
  seen = unite(seen, retrieved);
  return fresh;
}

/// "[id] question / answer / session"
inline std::string render_memory(const MemoryRecord& m) {
  return "[" + std::to_string(m.id) + "] " + m.question + " / " + m.answer + " / " + m.session.value_or("no session");
}

inline std::string render_memory_section(const std::vector<const MemoryRecord*>& memories) {
  if (memories.empty()) return "none\n";
  std::string out;
  for (const auto* m : memories) out += render_memory(*m) + "\n";
  return out;
}

inline std::vector<const MemoryRecord*> expand(const MemoryBank& bank, const MemoryIdSet& ids) {
  std::vector<const MemoryRecord*> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(&bank.record(id));
  return out;
}

/// Answer-round request: question, previous answer, critical memories and the
/// newly retrieved memories, each in a labeled section.
inline ChatRequest assemble_input(const std::string& query, const std::optional<std::string>& previous_answer,
                                  const std::vector<const MemoryRecord*>& critical,
                                  const std::vector<const MemoryRecord*>& fresh, const PromptSet& prompts) {
  ChatRequest req;
  req.role = RoleTag::answer;
  req.system_prompt = prompts.answer;
  std::string prev = previous_answer && !is_blank(*previous_answer) ? *previous_answer : "none";
  req.user_prompt = "Question: " + query + "\n\nPrevious answer: " + prev + "\n\nCritical memories:\n" +
                    render_memory_section(critical) + "\nNewly retrieved memories:\n" +
                    render_memory_section(fresh);
  return req;
}

inline constexpr std::string_view kReaskSuffix =
    "\n\nYour previous reply could not be parsed. Reply with only the JSON object "
    "{\"answer\": \"...\", \"sufficient\": true or false, \"critical_ids\": [id, ...]}.";

struct RoundAnswer {
  std::string answer;
  bool sufficient = false;
  MemoryIdSet critical_ids;
  bool reasked = false;
  bool degraded = false;
  std::vector<std::string> warnings;
};

/// One answer/assessment call. Critical ids not in `shown` are dropped. If the
/// reply cannot be parsed even after one re-ask, the round degrades to
/// (previous answer, not sufficient, previous critical ids).
inline RoundAnswer answer_round(const ChatRequest& request, const MemoryIdSet& shown, LlmGateway& gateway,
                                const std::optional<std::string>& previous_answer,
                                const MemoryIdSet& previous_critical, CostTally* tally = nullptr) {
  RoundAnswer out;
  std::optional<AnswerAssessment> parsed;
  try {
    parsed = parse_answer_assessment(gateway.complete(request, tally).text);
  } catch (const SchemaError& first) {
    out.reasked = true;
    out.warnings.push_back(std::string("assessment unparsable, re-asking: ") + first.what());
    ChatRequest retry = request;
    retry.user_prompt += kReaskSuffix;
    try {
      parsed = parse_answer_assessment(gateway.complete(retry, tally).text);
    } catch (const SchemaError& second) {
      out.warnings.push_back(std::string("assessment unparsable after re-ask: ") + second.what());
    }
  }
  if (!parsed) {
    out.degraded = true;
    out.answer = previous_answer.value_or("");
    out.sufficient = false;
    out.critical_ids = previous_critical;
    return out;
  }
  out.answer = trim(parsed->answer);
  out.sufficient = parsed->sufficient;
  for (auto id : parsed->critical_ids) {
    if (std::binary_search(shown.begin(), shown.end(), id)) {
      out.critical_ids.push_back(id);
    } else {
      out.warnings.push_back("critical id " + std::to_string(id) + " was not shown to the model; dropped");
    }
  }
  std::sort(out.critical_ids.begin(), out.critical_ids.end());
  out.critical_ids.erase(std::unique(out.critical_ids.begin(), out.critical_ids.end()), out.critical_ids.end());
  return out;
}

inline ChatRequest rewrite_request(const std::string& answer, const std::vector<const MemoryRecord*>& critical,
                                   const PromptSet& prompts) {
  ChatRequest req;
  req.role = RoleTag::rewrite;
  req.system_prompt = prompts.rewrite;
  req.user_prompt = "Draft answer: " + answer + "\n\nSupporting memories:\n" + render_memory_section(critical);
  return req;
}

/// Strips code fences and one level of matching quotes from a rewrite reply.
inline std::string clean_rewrite(std::string text) {
  text = trim(text);
  if (text.rfind("```", 0) == 0) {
    auto nl = text.find('\n');
    auto close = text.rfind("```");
    if (nl != std::string::npos && close != std::string::npos && close > nl) text = trim(text.substr(nl + 1, close - nl - 1));
  }
  if (text.size() >= 2 && ((text.front() == '"' && text.back() == '"') || (text.front() == '\'' && text.back() == '\''))) {
    text = trim(text.substr(1, text.size() - 2));
  }
  return text;
}

struct RewriteResult {
  std::string text;
  bool fell_back = false;
  std::vector<std::string> warnings;
};

/// Retrieval-free rewrite of the final answer. Best effort: any failure keeps
/// the original answer.
inline RewriteResult rewrite(const std::string& answer, const std::vector<const MemoryRecord*>& critical,
                             LlmGateway& gateway, const PromptSet& prompts, CostTally* tally = nullptr) {
  RewriteResult out;
  if (is_blank(answer)) {
    out.text = answer;
    out.fell_back = true;
    out.warnings.push_back("rewrite skipped: empty answer");
    return out;
  }
  try {
    out.text = clean_rewrite(gateway.complete(rewrite_request(answer, critical, prompts), tally).text);
    if (out.text.empty()) {
      out.text = answer;
      out.fell_back = true;
      out.warnings.push_back("rewrite returned empty text; keeping the answer");
    }
  } catch (const Error& e) {
    out.text = answer;
    out.fell_back = true;
    out.warnings.push_back(std::string("rewrite failed; keeping the answer: ") + e.what());
  }
  return out;
}

struct RoundRecord {
  std::size_t index = 0;  // 1-based
  std::vector<std::string> group;
  std::size_t retrieved = 0;  // |R|
  MemoryIdSet fresh_ids;      // R~
  MemoryIdSet shown_ids;      // previous critical ids U R~
  std::string answer;
  bool sufficient = false;
  MemoryIdSet critical_ids;
  bool reasked = false;
  bool degraded = false;
  CostTally cost;
};

struct QueryTrace {
  std::string query;
  std::vector<std::string> selected_keywords;
  std::vector<RoundRecord> rounds;
  std::vector<std::vector<std::string>> skipped_groups;  // no new memories, no round spent
  std::string final_answer;
  std::string rewritten_answer;
  MemoryIdSet final_critical_ids;
  StopReason stop_reason = StopReason::pyramid_exhausted;
  CostTally main;
  CostTally aux;
  std::vector<std::string> warnings;

  std::size_t answer_calls() const {
    std::size_t n = 0;
    for (const auto& r : rounds) n += r.cost.calls;
    return n;
  }
};

/// Shared, read-only resources for answering queries over one bank.
struct Retriever {
  const MemoryBank& bank;
  LlmGateway& main;
  LlmGateway& aux;
  const PromptSet& prompts;
  RetrievalConfig config{};

  QueryTrace run_query(const std::string& query) const {
    QueryTrace trace;
    run_query(query, trace);
    return trace;
  }

  /// Fills `trace` as the query progresses, so that on an exception it still
  /// holds the rounds played and the cost spent so far.
  void run_query(const std::string& query, QueryTrace& trace) const;
};

namespace detail {

/// Union of the posting lists of the `k` keywords with the most memories;
/// ties keep vocabulary insertion order.
inline MemoryIdSet most_populous_union(const MemoryBank& bank, std::size_t k) {
  std::vector<std::pair<std::size_t, std::size_t>> ranked;  // (posting size, insertion order)
  const auto& entries = bank.vocabulary().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) ranked.emplace_back(bank.associated_memories(entries[i]).size(), i);
  std::stable_sort(ranked.begin(), ranked.end(), [](auto& a, auto& b) { return a.first > b.first; });
  MemoryIdSet out;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) {
    out = unite(out, bank.associated_memories(entries[ranked[i].second]));
  }
  return out;
}

}  // namespace detail

inline void Retriever::run_query(const std::string& query, QueryTrace& trace) const {
  config.validate();
  if (is_blank(query)) throw ValidationError("run_query: question is empty");
  if (bank.empty()) throw ValidationError("run_query: memory bank is empty");

  trace = QueryTrace{};
  trace.query = query;

  if (!bank.vocabulary().empty()) {
    auto sel = select_query_keywords(query, bank.vocabulary(), config.depth_cap, aux, prompts, &trace.aux);
    trace.selected_keywords = std::move(sel.keywords);
    for (auto& w : sel.warnings) trace.warnings.push_back(std::move(w));
  } else {
    trace.warnings.push_back("vocabulary is empty; skipping keyword selection");
  }

  MemoryIdSet seen;
  std::optional<std::string> answer;
  MemoryIdSet critical;

  auto play_round = [&](std::vector<std::string> group, const MemoryIdSet& retrieved, const MemoryIdSet& fresh) {
    RoundRecord round;
    round.index = trace.rounds.size() + 1;
    round.group = std::move(group);
    round.retrieved = retrieved.size();
    round.fresh_ids = fresh;
    round.shown_ids = unite(critical, fresh);
    auto request = assemble_input(query, answer, expand(bank, critical), expand(bank, fresh), prompts);
    RoundAnswer result;
    try {
      result = answer_round(request, round.shown_ids, main, answer, critical, &round.cost);
    } catch (...) {
      trace.main += round.cost;
      throw;
    }
    round.answer = result.answer;
    round.sufficient = result.sufficient;
    round.critical_ids = result.critical_ids;
    round.reasked = result.reasked;
    round.degraded = result.degraded;
    for (auto& w : result.warnings) trace.warnings.push_back("round " + std::to_string(round.index) + ": " + w);
    trace.main += round.cost;
    answer = result.answer;
    critical = result.critical_ids;
    trace.rounds.push_back(std::move(round));
    return result.sufficient;
  };

  if (trace.selected_keywords.empty()) {
    trace.warnings.push_back("no query keywords; answering from the most populous keywords");
    auto retrieved = detail::most_populous_union(bank, config.depth_cap);
    auto fresh = filter_new(retrieved, seen);
    play_round({}, retrieved, fresh);
    trace.stop_reason = StopReason::no_keywords;
  } else {
    auto pyramid = build_pyramid(trace.selected_keywords, bank);
    trace.stop_reason = StopReason::pyramid_exhausted;
    std::size_t cursor = 0;
    while (auto step = next_group(pyramid, cursor)) {
      cursor = step->next_cursor;
      const auto& group = *step->group;
      auto fresh = filter_new(group.memories, seen);
      if (fresh.empty()) {
        trace.skipped_groups.push_back(group.keywords);
        continue;
      }
      if (play_round(group.keywords, group.memories, fresh)) {
        trace.stop_reason = StopReason::accepted;
        break;
      }
      if (trace.rounds.size() >= config.max_rounds) {
        trace.stop_reason = StopReason::max_rounds;
        break;
      }
    }
  }

  trace.final_answer = answer.value_or("");
  trace.final_critical_ids = critical;
  if (trace.rounds.empty()) {
    trace.warnings.push_back("no keyword group retrieved any memory");
    trace.rewritten_answer = trace.final_answer;
    return;
  }
  auto rw = rewrite(trace.final_answer, expand(bank, critical), main, prompts, &trace.main);
  trace.rewritten_answer = std::move(rw.text);
  for (auto& w : rw.warnings) trace.warnings.push_back(std::move(w));
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json cost_to_json(const CostTally& c, bool include_timing) {
  nlohmann::json j = {{"calls", c.calls},
                      {"words_in", c.tokens_in.words},
                      {"symbols_in", c.tokens_in.symbols},
                      {"words_out", c.tokens_out.words},
                      {"symbols_out", c.tokens_out.symbols},
                      {"tokens", c.tokens().estimate()}};
  if (include_timing) j["latency_s"] = std::chrono::duration<double>(c.latency).count();
  return j;
}

inline CostTally cost_from_json(const nlohmann::json& j) {
  CostTally c;
  c.calls = j.at("calls").get<std::uint64_t>();
  c.tokens_in = {j.at("words_in").get<std::uint64_t>(), j.at("symbols_in").get<std::uint64_t>()};
  c.tokens_out = {j.at("words_out").get<std::uint64_t>(), j.at("symbols_out").get<std::uint64_t>()};
  if (j.contains("latency_s")) {
    c.latency = std::chrono::duration_cast<Duration>(std::chrono::duration<double>(j.at("latency_s").get<double>()));
  }
  return c;
}

/// Structured form of a trace. Timing fields are omitted unless requested so
/// that scripted runs serialize byte-identically.
inline nlohmann::json trace_to_json(const QueryTrace& t, bool include_timing = false) {
  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& r : t.rounds) {
    rounds.push_back({{"round", r.index},
                      {"group", r.group},
                      {"retrieved", r.retrieved},
                      {"fresh_ids", r.fresh_ids},
                      {"shown_ids", r.shown_ids},
                      {"answer", r.answer},
                      {"sufficient", r.sufficient},
                      {"critical_ids", r.critical_ids},
                      {"reasked", r.reasked},
                      {"degraded", r.degraded},
                      {"cost", cost_to_json(r.cost, include_timing)}});
  }
  return {{"query", t.query},
          {"selected_keywords", t.selected_keywords},
          {"rounds", std::move(rounds)},
          {"skipped_groups", t.skipped_groups},
          {"final_answer", t.final_answer},
          {"rewritten_answer", t.rewritten_answer},
          {"final_critical_ids", t.final_critical_ids},
          {"stop_reason", to_string(t.stop_reason)},
          {"main", cost_to_json(t.main, include_timing)},
          {"aux", cost_to_json(t.aux, include_timing)},
          {"warnings", t.warnings}};
}

}  // namespace mgr
