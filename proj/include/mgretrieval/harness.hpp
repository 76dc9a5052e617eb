#pragma once

// Evaluation harness: dataset readers, per-question scoring, category
// aggregation and cost accounting.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mgretrieval/ingestion.hpp"
#include "mgretrieval/llm_gateway.hpp"
#include "mgretrieval/memory_store.hpp"
#include "mgretrieval/metrics.hpp"
#include "mgretrieval/prompts.hpp"
#include "mgretrieval/reflective_loop.hpp"

namespace mgr {

enum class Category { single_hop, multi_hop, temporal, open_domain };

inline const char* to_string(Category c) {
  switch (c) {
    case Category::single_hop: return "single_hop";
    case Category::multi_hop: return "multi_hop";
    case Category::temporal: return "temporal";
    case Category::open_domain: return "open_domain";
  }
  return "unknown";
}

inline const std::vector<std::string>& category_order() {
  static const std::vector<std::string> order{"single_hop", "multi_hop", "temporal", "open_domain"};
  return order;
}

inline std::optional<Category> category_from_string(std::string_view s) {
  for (auto c : {Category::single_hop, Category::multi_hop, Category::temporal, Category::open_domain}) {
    if (s == to_string(c)) return c;
  }
  return std::nullopt;
}

/// LoCoMo QA category codes. Code 5 (adversarial) is not one of the four
/// evaluated categories and is handled by the reader.
inline std::optional<Category> category_from_locomo_code(int code) {
  switch (code) {
    case 1: return Category::multi_hop;
    case 2: return Category::temporal;
    case 3: return Category::open_domain;
    case 4: return Category::single_hop;
    default: return std::nullopt;
  }
}

struct EvalQuestion {
  std::string id;
  std::string question;
  std::vector<std::string> references;
  Category category = Category::single_hop;
  std::string conversation_id;
};

struct Conversation {
  std::string id;
  std::vector<MemoryInput> memories;
};

struct Dataset {
  std::vector<Conversation> conversations;
  std::vector<EvalQuestion> questions;
  std::size_t skipped_questions = 0;  // LoCoMo adversarial items
};

enum class DatasetFormat { locomo_json, simple_jsonl };

inline std::optional<DatasetFormat> dataset_format_from_string(std::string_view s) {
  if (s == "locomo_json" || s == "locomo") return DatasetFormat::locomo_json;
  if (s == "simple_jsonl" || s == "jsonl") return DatasetFormat::simple_jsonl;
  return std::nullopt;
}

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path.string(), "cannot open file");
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline Conversation& conversation_for(Dataset& ds, const std::string& id) {
  for (auto& c : ds.conversations) {
    if (c.id == id) return c;
  }
  ds.conversations.push_back(Conversation{id, {}});
  return ds.conversations.back();
}

inline std::string text_field(const nlohmann::json& obj, const char* key, const std::string& where, bool required) {
  if (!obj.contains(key) || obj.at(key).is_null()) {
    if (required) throw ParseError(where + "." + key, "missing field");
    return {};
  }
  const auto& v = obj.at(key);
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number()) return v.dump();
  throw ParseError(where + "." + key, "must be text");
}

inline std::vector<std::string> references_from(const nlohmann::json& v, const std::string& where) {
  std::vector<std::string> refs;
  if (v.is_string() || v.is_number()) {
    refs.push_back(v.is_string() ? v.get<std::string>() : v.dump());
  } else if (v.is_array()) {
    for (const auto& e : v) {
      if (e.is_string()) refs.push_back(e.get<std::string>());
      else if (e.is_number()) refs.push_back(e.dump());
      else throw ParseError(where, "answers must be text");
    }
  } else {
    throw ParseError(where, "answers must be text or a list of text");
  }
  refs.erase(std::remove_if(refs.begin(), refs.end(), [](const std::string& r) { return is_blank(r); }), refs.end());
  if (refs.empty()) throw ParseError(where, "question has no non-empty answer");
  return refs;
}

inline Category category_from_json(const nlohmann::json& v, const std::string& where) {
  if (v.is_string()) {
    if (auto c = category_from_string(v.get<std::string>())) return *c;
  } else if (v.is_number_integer()) {
    if (auto c = category_from_locomo_code(v.get<int>())) return *c;
  }
  throw ParseError(where, "unknown category " + v.dump());
}

/// One line per object:
///   {"kind": "memory", "conversation"?: id, "question": ..., "answer": ..., "session"?: ...}
///   {"kind": "question", "conversation"?: id, "id"?: ..., "question": ..., "answers": [...], "category": ...}
inline Dataset load_simple_jsonl(const std::filesystem::path& path) {
  Dataset ds;
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> question_counts;
  while (std::getline(in, line)) {
    ++lineno;
    if (is_blank(line)) continue;
    std::string where = "line " + std::to_string(lineno);
    auto obj = nlohmann::json::parse(line, nullptr, false);
    if (obj.is_discarded() || !obj.is_object()) throw ParseError(where, "not a JSON object");
    auto kind = text_field(obj, "kind", where, true);
    auto conv = text_field(obj, "conversation", where, false);
    if (conv.empty()) conv = "default";
    if (kind == "memory") {
      MemoryInput m;
      m.question = text_field(obj, "question", where, true);
      m.answer = text_field(obj, "answer", where, true);
      auto session = text_field(obj, "session", where, false);
      if (!session.empty()) m.session = session;
      conversation_for(ds, conv).memories.push_back(std::move(m));
    } else if (kind == "question") {
      EvalQuestion q;
      q.conversation_id = conv;
      conversation_for(ds, conv);
      q.question = text_field(obj, "question", where, true);
      if (!obj.contains("answers")) throw ParseError(where + ".answers", "missing field");
      q.references = references_from(obj.at("answers"), where + ".answers");
      if (!obj.contains("category")) throw ParseError(where + ".category", "missing field");
      q.category = category_from_json(obj.at("category"), where + ".category");
      q.id = text_field(obj, "id", where, false);
      if (q.id.empty()) q.id = conv + "#" + std::to_string(question_counts[conv]);
      ++question_counts[conv];
      ds.questions.push_back(std::move(q));
    } else {
      throw ParseError(where + ".kind", "expected 'memory' or 'question', got '" + kind + "'");
    }
  }
  return ds;
}

inline std::string render_turn(const nlohmann::json& turn, const std::string& where) {
  if (!turn.is_object()) throw ParseError(where, "turn must be an object");
  auto speaker = text_field(turn, "speaker", where, true);
  auto text = text_field(turn, "text", where, false);
  auto caption = text_field(turn, "blip_caption", where, false);
  if (!caption.empty()) text += (text.empty() ? "" : " ") + std::string("[shares an image: ") + caption + "]";
  if (is_blank(text)) text = "(no text)";
  return speaker + ": " + text;
}

/// LoCoMo release format: an array of samples, each with a `conversation`
/// object holding `session_<n>` turn lists and `session_<n>_date_time`
/// strings, and a `qa` list. Consecutive turns are paired into one memory.
inline Dataset load_locomo_json(const std::filesystem::path& path) {
  auto doc = nlohmann::json::parse(read_file(path), nullptr, false);
  if (doc.is_discarded()) throw ParseError("$", "malformed JSON");
  if (doc.is_object()) doc = nlohmann::json::array({doc});
  if (!doc.is_array()) throw ParseError("$", "expected an array of samples");

  Dataset ds;
  for (std::size_t si = 0; si < doc.size(); ++si) {
    const auto& sample = doc[si];
    std::string where = "$[" + std::to_string(si) + "]";
    if (!sample.is_object()) throw ParseError(where, "sample must be an object");
    auto conv_id = text_field(sample, "sample_id", where, false);
    if (conv_id.empty()) conv_id = "conv-" + std::to_string(si);
    if (!sample.contains("conversation") || !sample.at("conversation").is_object()) {
      throw ParseError(where + ".conversation", "missing conversation object");
    }
    const auto& conv = sample.at("conversation");

    std::vector<std::pair<int, std::string>> sessions;
    for (const auto& [key, value] : conv.items()) {
      if (key.rfind("session_", 0) != 0 || !value.is_array()) continue;
      auto num = key.substr(8);
      if (num.empty() || !std::all_of(num.begin(), num.end(), [](char c) { return c >= '0' && c <= '9'; })) continue;
      sessions.emplace_back(std::stoi(num), key);
    }
    std::sort(sessions.begin(), sessions.end());

    auto& out = conversation_for(ds, conv_id);
    for (const auto& [n, key] : sessions) {
      std::string label = key;
      auto date_key = key + "_date_time";
      if (conv.contains(date_key) && conv.at(date_key).is_string()) label += " (" + conv.at(date_key).get<std::string>() + ")";
      const auto& turns = conv.at(key);
      std::string swhere = where + ".conversation." + key;
      for (std::size_t t = 0; t < turns.size(); t += 2) {
        MemoryInput m;
        m.question = render_turn(turns[t], swhere + "[" + std::to_string(t) + "]");
        m.answer = t + 1 < turns.size() ? render_turn(turns[t + 1], swhere + "[" + std::to_string(t + 1) + "]")
                                        : std::string("(no reply)");
        m.session = label;
        out.memories.push_back(std::move(m));
      }
    }

    if (!sample.contains("qa")) continue;
    const auto& qa = sample.at("qa");
    if (!qa.is_array()) throw ParseError(where + ".qa", "must be an array");
    std::size_t counter = 0;
    for (std::size_t qi = 0; qi < qa.size(); ++qi) {
      std::string qwhere = where + ".qa[" + std::to_string(qi) + "]";
      const auto& item = qa[qi];
      if (!item.is_object()) throw ParseError(qwhere, "must be an object");
      if (!item.contains("category")) throw ParseError(qwhere + ".category", "missing field");
      const auto& cat = item.at("category");
      if (cat.is_number_integer() && cat.get<int>() == 5) {
        ++ds.skipped_questions;
        continue;
      }
      EvalQuestion q;
      q.category = category_from_json(cat, qwhere + ".category");
      q.conversation_id = conv_id;
      q.id = conv_id + "#" + std::to_string(counter++);
      q.question = text_field(item, "question", qwhere, true);
      if (!item.contains("answer")) throw ParseError(qwhere + ".answer", "missing field");
      q.references = references_from(item.at("answer"), qwhere + ".answer");
      ds.questions.push_back(std::move(q));
    }
  }
  return ds;
}

}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format) {
  return format == DatasetFormat::locomo_json ? detail::load_locomo_json(path) : detail::load_simple_jsonl(path);
}

/// Line-delimited {question, answer, session?} records for `ingest`.
inline std::vector<MemoryInput> load_memory_inputs(const std::filesystem::path& path) {
  std::vector<MemoryInput> out;
  std::istringstream in(detail::read_file(path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (is_blank(line)) continue;
    std::string where = "line " + std::to_string(lineno);
    auto obj = nlohmann::json::parse(line, nullptr, false);
    if (obj.is_discarded() || !obj.is_object()) throw ParseError(where, "not a JSON object");
    MemoryInput m;
    m.question = detail::text_field(obj, "question", where, true);
    m.answer = detail::text_field(obj, "answer", where, true);
    auto session = detail::text_field(obj, "session", where, false);
    if (!session.empty()) m.session = session;
    out.push_back(std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
  RetrievalConfig retrieval;
  IngestOptions ingest;
  std::size_t parallelism = 1;
  std::optional<std::filesystem::path> cache_dir;
  double rouge_beta = kDefaultRougeBeta;
};

struct QuestionResult {
  EvalQuestion question;
  QueryTrace trace;
  MetricScores scores;
  std::string prediction;
  double seconds = 0.0;
  std::optional<std::string> error;
};

struct ConversationIngestion {
  std::string conversation_id;
  std::size_t memories = 0;
  std::size_t records_indexed = 0;
  std::size_t vocabulary_size = 0;
  bool cached = false;
  CostTally aux;
  std::vector<IngestFailure> failures;
};

struct EvalRun {
  nlohmann::json config;
  std::vector<ConversationIngestion> ingestion;
  std::vector<QuestionResult> questions;
  AggregateReport aggregate;
  GatewayCounters main_counters;  // gateway deltas over the run
  GatewayCounters aux_counters;
};

/// Key for a cached bank: memory contents, extraction/matching prompts,
/// auxiliary provider name and ingestion options.
inline std::string bank_cache_key(const Conversation& conv, const PromptSet& prompts, const std::string& provider,
                                  const IngestOptions& options) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& m : conv.memories) j.push_back({m.question, m.answer, m.session.value_or("")});
  std::string blob = j.dump() + "\x1f" + prompts.extract + "\x1f" + prompts.match + "\x1f" + provider + "\x1f" +
                     std::to_string(options.max_keywords_per_memory) + "/" +
                     std::to_string(options.max_match_candidates);
  return hex64(fnv1a64(blob));
}

namespace detail {

inline GatewayCounters counters_delta(const GatewayCounters& after, const GatewayCounters& before) {
  GatewayCounters d;
  d.calls = after.calls - before.calls;
  d.failures = after.failures - before.failures;
  d.tokens_in = {after.tokens_in.words - before.tokens_in.words, after.tokens_in.symbols - before.tokens_in.symbols};
  d.tokens_out = {after.tokens_out.words - before.tokens_out.words,
                  after.tokens_out.symbols - before.tokens_out.symbols};
  d.latency = after.latency - before.latency;
  return d;
}

inline QuestionResult evaluate_question(const EvalQuestion& q, const MemoryBank& bank, LlmGateway& main,
                                        LlmGateway& aux, const PromptSet& prompts, const EvalOptions& options) {
  QuestionResult r;
  r.question = q;
  Retriever retriever{bank, main, aux, prompts, options.retrieval};
  auto start = std::chrono::steady_clock::now();
  try {
    retriever.run_query(q.question, r.trace);
    r.prediction = r.trace.rewritten_answer;
    r.scores = score_answer(r.prediction, q.references, options.rouge_beta);
  } catch (const std::exception& e) {
    r.error = e.what();
    r.scores = MetricScores{};
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace detail

inline std::vector<ScoredResponse> scored_responses(const std::vector<QuestionResult>& questions) {
  std::vector<ScoredResponse> out;
  for (const auto& q : questions) {
    out.push_back({to_string(q.question.category), q.scores, static_cast<double>(q.trace.main.calls),
                   q.trace.main.tokens().estimate(), q.seconds});
  }
  return out;
}

/// Builds (or loads) one bank per conversation, answers every question with
/// the reflective loop and scores the rewritten answer. Results are ordered
/// as the questions appear in the dataset regardless of parallelism.
inline EvalRun evaluate(const Dataset& dataset, LlmGateway& main, LlmGateway& aux, const PromptSet& prompts,
                        const EvalOptions& options = {}) {
  options.retrieval.validate();
  EvalRun run;
  run.config = {{"depth", options.retrieval.depth_cap},
                {"max_rounds", options.retrieval.max_rounds},
                {"main_provider", main.provider().name()},
                {"aux_provider", aux.provider().name()},
                {"max_keywords_per_memory", options.ingest.max_keywords_per_memory},
                {"rouge_beta", options.rouge_beta},
                {"prompts", prompts.fingerprint()}};
  auto main_before = main.counters();
  auto aux_before = aux.counters();

  std::map<std::string, MemoryBank> banks;
  for (const auto& conv : dataset.conversations) {
    ConversationIngestion ing;
    ing.conversation_id = conv.id;
    ing.memories = conv.memories.size();
    MemoryBank bank;
    std::optional<std::filesystem::path> cache_file;
    if (options.cache_dir) {
      cache_file = *options.cache_dir /
                   ("bank-" + bank_cache_key(conv, prompts, aux.provider().name(), options.ingest) + ".json");
    }
    if (cache_file && std::filesystem::exists(*cache_file)) {
      bank = MemoryBank::load(*cache_file);
      ing.cached = true;
    } else {
      auto report = ingest(conv.memories, bank, aux, prompts, options.ingest);
      ing.aux = report.aux;
      ing.failures = report.failures;
      if (cache_file && report.failures.empty()) {
        std::filesystem::create_directories(*options.cache_dir);
        bank.snapshot(*cache_file);
      }
    }
    MemoryIdSet indexed;
    for (const auto& [_, ids] : bank.mapping()) indexed = unite(indexed, ids);
    ing.records_indexed = indexed.size();
    ing.vocabulary_size = bank.vocabulary().size();
    run.ingestion.push_back(std::move(ing));
    banks.emplace(conv.id, std::move(bank));
  }

  static const MemoryBank kEmptyBank;
  auto bank_for = [&](const std::string& id) -> const MemoryBank& {
    auto it = banks.find(id);
    return it == banks.end() ? kEmptyBank : it->second;
  };

  run.questions.resize(dataset.questions.size());
  const std::size_t window = std::max<std::size_t>(1, options.parallelism);
  for (std::size_t base = 0; base < dataset.questions.size(); base += window) {
    std::size_t end = std::min(dataset.questions.size(), base + window);
    if (window == 1) {
      const auto& q = dataset.questions[base];
      run.questions[base] = detail::evaluate_question(q, bank_for(q.conversation_id), main, aux, prompts, options);
      continue;
    }
    std::vector<std::future<QuestionResult>> jobs;
    for (std::size_t i = base; i < end; ++i) {
      jobs.push_back(std::async(std::launch::async, [&, i] {
        const auto& q = dataset.questions[i];
        return detail::evaluate_question(q, bank_for(q.conversation_id), main, aux, prompts, options);
      }));
    }
    for (std::size_t i = base; i < end; ++i) run.questions[i] = jobs[i - base].get();
  }

  run.aggregate = aggregate(scored_responses(run.questions), category_order());
  run.main_counters = detail::counters_delta(main.counters(), main_before);
  run.aux_counters = detail::counters_delta(aux.counters(), aux_before);
  return run;
}

// ---------------------------------------------------------------------------
// Cost report

struct CostReport {
  std::size_t memories_ingested = 0;  // excludes cached banks
  CostTally ingestion_aux;
  std::size_t responses = 0;
  CostTally response_main;
  CostTally response_aux;
  double total_seconds = 0.0;

  double per_memory_aux_calls() const {
    return memories_ingested ? static_cast<double>(ingestion_aux.calls) / static_cast<double>(memories_ingested) : 0.0;
  }
  double per_memory_aux_tokens() const {
    return memories_ingested ? ingestion_aux.tokens().estimate() / static_cast<double>(memories_ingested) : 0.0;
  }
  double per_response_main_calls() const {
    return responses ? static_cast<double>(response_main.calls) / static_cast<double>(responses) : 0.0;
  }
  double per_response_main_tokens() const {
    return responses ? response_main.tokens().estimate() / static_cast<double>(responses) : 0.0;
  }
  double per_response_aux_calls() const {
    return responses ? static_cast<double>(response_aux.calls) / static_cast<double>(responses) : 0.0;
  }
  double per_response_aux_tokens() const {
    return responses ? response_aux.tokens().estimate() / static_cast<double>(responses) : 0.0;
  }
  double mean_seconds() const { return responses ? total_seconds / static_cast<double>(responses) : 0.0; }

  /// Totals summed from per-question and per-conversation tallies.
  CostTally total_main() const { return response_main; }
  CostTally total_aux() const {
    CostTally t = ingestion_aux;
    t += response_aux;
    return t;
  }
};

inline CostReport cost_report(const EvalRun& run) {
  CostReport c;
  for (const auto& ing : run.ingestion) {
    if (!ing.cached) c.memories_ingested += ing.memories;
    c.ingestion_aux += ing.aux;
  }
  for (const auto& q : run.questions) {
    ++c.responses;
    c.response_main += q.trace.main;
    c.response_aux += q.trace.aux;
    c.total_seconds += q.seconds;
  }
  return c;
}

inline bool accounting_consistent(const CostReport& c, const GatewayCounters& main, const GatewayCounters& aux) {
  auto m = c.total_main();
  auto a = c.total_aux();
  return m.calls == main.calls && m.tokens_in == main.tokens_in && m.tokens_out == main.tokens_out &&
         a.calls == aux.calls && a.tokens_in == aux.tokens_in && a.tokens_out == aux.tokens_out;
}

// ---------------------------------------------------------------------------
// Report rendering

namespace detail {

inline nlohmann::json scores_to_json(const MetricScores& s) {
  return {{"f1", s.f1}, {"bleu1", s.bleu1}, {"rouge_l", s.rouge_l}, {"rouge_2", s.rouge_2}, {"meteor", s.meteor}};
}

inline MetricScores scores_from_json(const nlohmann::json& j) {
  return {j.at("f1").get<double>(), j.at("bleu1").get<double>(), j.at("rouge_l").get<double>(),
          j.at("rouge_2").get<double>(), j.at("meteor").get<double>()};
}

inline nlohmann::json row_to_json(const CategoryRow& r, bool include_timing) {
  nlohmann::json j = {{"category", r.category},
                      {"count", r.count},
                      {"scores", scores_to_json(r.mean)},
                      {"calls", r.mean_calls},
                      {"tokens", r.mean_tokens}};
  if (include_timing) j["time_s"] = r.mean_seconds;
  return j;
}

inline nlohmann::json counters_to_json(const GatewayCounters& g) {
  CostTally t;
  t.calls = g.calls;
  t.tokens_in = g.tokens_in;
  t.tokens_out = g.tokens_out;
  t.latency = g.latency;
  auto j = cost_to_json(t, false);
  j["failures"] = g.failures;
  return j;
}

inline GatewayCounters counters_from_json(const nlohmann::json& j) {
  auto t = cost_from_json(j);
  GatewayCounters g;
  g.calls = t.calls;
  g.tokens_in = t.tokens_in;
  g.tokens_out = t.tokens_out;
  g.failures = j.value("failures", std::uint64_t{0});
  return g;
}

}  // namespace detail

inline nlohmann::json cost_report_to_json(const CostReport& c, bool include_timing) {
  nlohmann::json j = {
      {"memory_construction",
       {{"memories", c.memories_ingested},
        {"aux", cost_to_json(c.ingestion_aux, false)},
        {"aux_calls_per_memory", c.per_memory_aux_calls()},
        {"aux_tokens_per_memory", c.per_memory_aux_tokens()}}},
      {"question_response",
       {{"responses", c.responses},
        {"main", cost_to_json(c.response_main, false)},
        {"aux", cost_to_json(c.response_aux, false)},
        {"main_calls_per_response", c.per_response_main_calls()},
        {"main_tokens_per_response", c.per_response_main_tokens()},
        {"aux_calls_per_response", c.per_response_aux_calls()},
        {"aux_tokens_per_response", c.per_response_aux_tokens()}}}};
  if (include_timing) j["question_response"]["time_s_per_response"] = c.mean_seconds();
  return j;
}

/// Machine-readable run report. Without timing the output is a pure function
/// of the dataset, the configuration and the provider replies.
inline nlohmann::json run_to_json(const EvalRun& run, bool include_timing = true) {
  nlohmann::json ingestion = nlohmann::json::array();
  for (const auto& ing : run.ingestion) {
    nlohmann::json failures = nlohmann::json::array();
    for (const auto& f : ing.failures) failures.push_back({{"index", f.index}, {"message", f.message}});
    ingestion.push_back({{"conversation", ing.conversation_id},
                         {"memories", ing.memories},
                         {"records_indexed", ing.records_indexed},
                         {"vocabulary_size", ing.vocabulary_size},
                         {"cached", ing.cached},
                         {"aux", cost_to_json(ing.aux, false)},
                         {"failures", std::move(failures)}});
  }
  nlohmann::json questions = nlohmann::json::array();
  for (const auto& q : run.questions) {
    nlohmann::json j = {{"id", q.question.id},
                        {"conversation", q.question.conversation_id},
                        {"category", to_string(q.question.category)},
                        {"question", q.question.question},
                        {"references", q.question.references},
                        {"prediction", q.prediction},
                        {"scores", detail::scores_to_json(q.scores)},
                        {"error", q.error ? nlohmann::json(*q.error) : nlohmann::json(nullptr)},
                        {"trace", trace_to_json(q.trace, include_timing)}};
    if (include_timing) j["time_s"] = q.seconds;
    questions.push_back(std::move(j));
  }
  nlohmann::json categories = nlohmann::json::array();
  for (const auto& row : run.aggregate.categories) categories.push_back(detail::row_to_json(row, include_timing));
  auto cost = cost_report(run);
  return {{"config", run.config},
          {"ingestion", std::move(ingestion)},
          {"questions", std::move(questions)},
          {"aggregate",
           {{"categories", std::move(categories)}, {"overall", detail::row_to_json(run.aggregate.overall, include_timing)}}},
          {"cost", cost_report_to_json(cost, include_timing)},
          {"gateway", {{"main", detail::counters_to_json(run.main_counters)}, {"aux", detail::counters_to_json(run.aux_counters)}}},
          {"accounting_consistent", accounting_consistent(cost, run.main_counters, run.aux_counters)}};
}

/// Reads back the parts of a report needed for aggregation and cost
/// reporting. Traces are reduced to their cost tallies and stop reason.
inline EvalRun run_from_json(const nlohmann::json& doc) {
  EvalRun run;
  try {
    run.config = doc.at("config");
    for (const auto& ing : doc.at("ingestion")) {
      ConversationIngestion c;
      c.conversation_id = ing.at("conversation").get<std::string>();
      c.memories = ing.at("memories").get<std::size_t>();
      c.records_indexed = ing.at("records_indexed").get<std::size_t>();
      c.vocabulary_size = ing.at("vocabulary_size").get<std::size_t>();
      c.cached = ing.at("cached").get<bool>();
      c.aux = cost_from_json(ing.at("aux"));
      for (const auto& f : ing.at("failures")) c.failures.push_back({f.at("index").get<std::size_t>(), f.at("message").get<std::string>()});
      run.ingestion.push_back(std::move(c));
    }
    for (const auto& qj : doc.at("questions")) {
      QuestionResult q;
      q.question.id = qj.at("id").get<std::string>();
      q.question.conversation_id = qj.at("conversation").get<std::string>();
      auto cat = category_from_string(qj.at("category").get<std::string>());
      if (!cat) throw ParseError("questions.category", "unknown category");
      q.question.category = *cat;
      q.question.question = qj.at("question").get<std::string>();
      q.question.references = qj.at("references").get<std::vector<std::string>>();
      q.prediction = qj.at("prediction").get<std::string>();
      q.scores = detail::scores_from_json(qj.at("scores"));
      if (!qj.at("error").is_null()) q.error = qj.at("error").get<std::string>();
      q.seconds = qj.value("time_s", 0.0);
      const auto& t = qj.at("trace");
      q.trace.query = t.at("query").get<std::string>();
      q.trace.main = cost_from_json(t.at("main"));
      q.trace.aux = cost_from_json(t.at("aux"));
      q.trace.final_answer = t.at("final_answer").get<std::string>();
      q.trace.rewritten_answer = t.at("rewritten_answer").get<std::string>();
      run.questions.push_back(std::move(q));
    }
    run.main_counters = detail::counters_from_json(doc.at("gateway").at("main"));
    run.aux_counters = detail::counters_from_json(doc.at("gateway").at("aux"));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("report", e.what());
  }
  run.aggregate = aggregate(scored_responses(run.questions), category_order());
  return run;
}

namespace detail {

inline std::string fixed(double v, int precision = 2) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}

inline std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

}  // namespace detail

/// Scores x100 per category and the weighted overall row.
inline std::string render_score_table(const AggregateReport& agg, bool include_timing = true) {
  std::string out = "Category        N      F1  BLEU-1 ROUGE-L ROUGE-2  METEOR   Calls    Tokens";
  if (include_timing) out += "  Time(s)";
  out += "\n";
  auto row = [&](const CategoryRow& r) {
    std::string line = r.category;
    line.resize(12, ' ');
    line += detail::pad(std::to_string(r.count), 5);
    for (double v : {r.mean.f1, r.mean.bleu1, r.mean.rouge_l, r.mean.rouge_2, r.mean.meteor}) {
      line += detail::pad(detail::fixed(100.0 * v), 8);
    }
    line += detail::pad(detail::fixed(r.mean_calls), 8);
    line += detail::pad(detail::fixed(r.mean_tokens, 1), 10);
    if (include_timing) line += detail::pad(detail::fixed(r.mean_seconds), 9);
    out += line + "\n";
  };
  for (const auto& r : agg.categories) row(r);
  row(agg.overall);
  return out;
}

inline std::string render_cost_table(const CostReport& c, bool include_timing = true) {
  std::string out;
  out += "Memory construction (" + std::to_string(c.memories_ingested) + " memories)\n";
  out += "  aux calls per memory      " + detail::fixed(c.per_memory_aux_calls()) + "\n";
  out += "  aux tokens per memory     " + detail::fixed(c.per_memory_aux_tokens(), 1) + "\n";
  out += "Question response (" + std::to_string(c.responses) + " questions)\n";
  out += "  main calls per response   " + detail::fixed(c.per_response_main_calls()) + "\n";
  out += "  main tokens per response  " + detail::fixed(c.per_response_main_tokens(), 1) + "\n";
  out += "  aux calls per response    " + detail::fixed(c.per_response_aux_calls()) + "\n";
  out += "  aux tokens per response   " + detail::fixed(c.per_response_aux_tokens(), 1) + "\n";
  if (include_timing) out += "  time per response (s)     " + detail::fixed(c.mean_seconds(), 3) + "\n";
  return out;
}

/// Writes report.json and report.txt into `dir`.
inline void write_report(const EvalRun& run, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "report.json", std::ios::binary | std::ios::trunc);
    out << run_to_json(run, true).dump(2) << '\n';
  }
  std::ofstream txt(dir / "report.txt", std::ios::binary | std::ios::trunc);
  txt << render_score_table(run.aggregate) << '\n' << render_cost_table(cost_report(run));
}

}  // namespace mgr
