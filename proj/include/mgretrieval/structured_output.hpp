#pragma once

// Decoding of the JSON objects the model is instructed to emit. Completions
// are searched for the first well-formed object (fenced blocks first, then
// balanced braces in running text) and mapped onto a typed schema.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "mgretrieval/error.hpp"
#include "mgretrieval/text.hpp"

namespace mgr {

enum class Schema { keyword_list, match_result, selection, answer_assessment };

/// {"keywords": ["...", ...]}
struct KeywordList {
  std::vector<std::string> keywords;
  friend bool operator==(const KeywordList&, const KeywordList&) = default;
};

/// {"matches": {"<raw keyword>": ["<vocabulary entry>", ...] | null, ...}}
/// An empty list or null declares the raw keyword new.
struct MatchResult {
  std::vector<std::pair<std::string, std::vector<std::string>>> matches;
  friend bool operator==(const MatchResult&, const MatchResult&) = default;
};

/// {"keywords": ["...", ...]} chosen from the vocabulary.
struct Selection {
  std::vector<std::string> keywords;
  friend bool operator==(const Selection&, const Selection&) = default;
};

/// {"answer": "...", "sufficient": bool, "critical_ids": [int, ...]}
struct AnswerAssessment {
  std::string answer;
  bool sufficient = false;
  std::vector<std::uint64_t> critical_ids;
  friend bool operator==(const AnswerAssessment&, const AnswerAssessment&) = default;
};

using StructuredValue = std::variant<KeywordList, MatchResult, Selection, AnswerAssessment>;

namespace detail {

inline std::vector<std::string_view> fenced_blocks(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    auto open = text.find("```", pos);
    if (open == std::string_view::npos) break;
    // Skip the info string ("json", "JSON", ...); the body may start on the same line.
    auto body = open + 3;
    while (body < text.size() && is_word_char(static_cast<unsigned char>(text[body]))) ++body;
    auto close = text.find("```", body);
    if (close == std::string_view::npos) break;
    out.push_back(text.substr(body, close - body));
    pos = close + 3;
  }
  return out;
}

/// Every balanced {...} region, in order of its opening brace. Braces inside
/// JSON strings are ignored.
inline std::vector<std::string_view> balanced_objects(std::string_view text) {
  std::vector<std::string_view> out;
  for (std::size_t start = text.find('{'); start != std::string_view::npos; start = text.find('{', start + 1)) {
    int depth = 0;
    bool in_string = false, escaped = false;
    for (std::size_t i = start; i < text.size(); ++i) {
      char c = text[i];
      if (in_string) {
        if (escaped) escaped = false;
        else if (c == '\\') escaped = true;
        else if (c == '"') in_string = false;
        continue;
      }
      if (c == '"') in_string = true;
      else if (c == '{') ++depth;
      else if (c == '}' && --depth == 0) {
        out.push_back(text.substr(start, i - start + 1));
        break;
      }
    }
  }
  return out;
}

inline std::vector<std::string> string_list(const nlohmann::json& obj, const char* field,
                                            std::string_view snippet) {
  if (!obj.contains(field)) throw SchemaError(SchemaErrorKind::missing_field, field, std::string(snippet));
  const auto& v = obj.at(field);
  if (!v.is_array()) throw SchemaError(SchemaErrorKind::wrong_type, field, std::string(snippet));
  std::vector<std::string> out;
  for (const auto& e : v) {
    if (!e.is_string()) throw SchemaError(SchemaErrorKind::wrong_type, field, std::string(snippet));
    out.push_back(e.get<std::string>());
  }
  return out;
}

inline std::optional<std::uint64_t> id_from(const nlohmann::json& e) {
  if (e.is_number_unsigned()) return e.get<std::uint64_t>();
  if (e.is_number_integer()) {
    auto v = e.get<std::int64_t>();
    if (v < 0) return std::nullopt;
    return static_cast<std::uint64_t>(v);
  }
  if (e.is_string()) {
    // Models sometimes echo the rendered form, e.g. "[12]".
    auto s = trim(e.get<std::string>());
    if (s.size() >= 2 && s.front() == '[' && s.back() == ']') s = s.substr(1, s.size() - 2);
    if (s.empty() || s.size() > 19) return std::nullopt;
    std::uint64_t v = 0;
    for (char c : s) {
      if (c < '0' || c > '9') return std::nullopt;
      v = v * 10 + static_cast<std::uint64_t>(c - '0');
    }
    return v;
  }
  return std::nullopt;
}

}  // namespace detail

/// First JSON object found in a completion. Throws SchemaError(no_object).
inline nlohmann::json extract_json_object(std::string_view text) {
  std::vector<std::string_view> candidates = detail::fenced_blocks(text);
  for (auto c : detail::balanced_objects(text)) candidates.push_back(c);
  for (auto c : candidates) {
    auto parsed = nlohmann::json::parse(c.begin(), c.end(), nullptr, /*allow_exceptions=*/false);
    if (parsed.is_object()) return parsed;
  }
  throw SchemaError(SchemaErrorKind::no_object, "", std::string(text));
}

inline KeywordList parse_keyword_list(std::string_view text) {
  auto obj = extract_json_object(text);
  return KeywordList{detail::string_list(obj, "keywords", obj.dump())};
}

inline Selection parse_selection(std::string_view text) {
  auto obj = extract_json_object(text);
  return Selection{detail::string_list(obj, "keywords", obj.dump())};
}

inline MatchResult parse_match_result(std::string_view text) {
  auto obj = extract_json_object(text);
  auto snippet = obj.dump();
  if (!obj.contains("matches")) throw SchemaError(SchemaErrorKind::missing_field, "matches", snippet);
  const auto& m = obj.at("matches");
  if (!m.is_object()) throw SchemaError(SchemaErrorKind::wrong_type, "matches", snippet);
  MatchResult out;
  for (const auto& [raw, targets] : m.items()) {
    std::vector<std::string> entries;
    if (targets.is_string()) {
      entries.push_back(targets.get<std::string>());
    } else if (targets.is_array()) {
      for (const auto& t : targets) {
        if (!t.is_string()) throw SchemaError(SchemaErrorKind::wrong_type, "matches." + raw, snippet);
        entries.push_back(t.get<std::string>());
      }
    } else if (!targets.is_null()) {
      throw SchemaError(SchemaErrorKind::wrong_type, "matches." + raw, snippet);
    }
    out.matches.emplace_back(raw, std::move(entries));
  }
  return out;
}

inline AnswerAssessment parse_answer_assessment(std::string_view text) {
  auto obj = extract_json_object(text);
  auto snippet = obj.dump();
  auto need = [&](const char* field) -> const nlohmann::json& {
    if (!obj.contains(field)) throw SchemaError(SchemaErrorKind::missing_field, field, snippet);
    return obj.at(field);
  };
  AnswerAssessment out;
  const auto& answer = need("answer");
  if (answer.is_string()) out.answer = answer.get<std::string>();
  else if (answer.is_number()) out.answer = answer.dump();
  else throw SchemaError(SchemaErrorKind::wrong_type, "answer", snippet);

  const auto& sufficient = need("sufficient");
  if (sufficient.is_boolean()) {
    out.sufficient = sufficient.get<bool>();
  } else if (sufficient.is_string() && (sufficient == "true" || sufficient == "false")) {
    out.sufficient = sufficient == "true";
  } else {
    throw SchemaError(SchemaErrorKind::wrong_type, "sufficient", snippet);
  }

  const auto& ids = need("critical_ids");
  if (!ids.is_array()) throw SchemaError(SchemaErrorKind::wrong_type, "critical_ids", snippet);
  for (const auto& e : ids) {
    auto id = detail::id_from(e);
    if (!id) throw SchemaError(SchemaErrorKind::wrong_type, "critical_ids", snippet);
    out.critical_ids.push_back(*id);
  }
  return out;
}

inline StructuredValue parse_structured(std::string_view text, Schema schema) {
  switch (schema) {
    case Schema::keyword_list: return parse_keyword_list(text);
    case Schema::match_result: return parse_match_result(text);
    case Schema::selection: return parse_selection(text);
    case Schema::answer_assessment: return parse_answer_assessment(text);
  }
  throw SchemaError(SchemaErrorKind::no_object, "", std::string(text));
}

}  // namespace mgr
