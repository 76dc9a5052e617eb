#pragma once

// System prompts for the five model roles. Built-in defaults can be replaced
// file by file from a prompts directory:
//   extract.txt  match.txt  select.txt  answer.txt  rewrite.txt

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include "mgretrieval/error.hpp"
#include "mgretrieval/text.hpp"

namespace mgr {

inline constexpr std::string_view kExtractPrompt = R"(You index conversation memories for later retrieval.
Read one memory (a question and its answer) and extract the keywords that best describe what it is about: people, places, objects, events, activities, topics and dates.
Rules:
- Return at most {max_keywords} keywords.
- Each keyword is a short noun phrase of one to three words, in lowercase.
- Prefer specific terms over generic ones; do not return stop words.
Respond with only a JSON object of the form {"keywords": ["...", "..."]}.)";

inline constexpr std::string_view kMatchPrompt = R"(You maintain a keyword vocabulary for a memory index.
You receive newly extracted keywords and a list of existing vocabulary entries.
For each new keyword, decide whether it means the same thing as one or more existing entries (synonyms, spelling variants, singular/plural, a more specific phrasing of the same concept).
- If it does, map it to those existing entries, copied exactly as listed.
- If no entry has the same meaning, map it to an empty list; it will be added as a new entry.
Do not invent entries that are not in the list.
Respond with only a JSON object of the form {"matches": {"<new keyword>": ["<existing entry>", ...], ...}} covering every new keyword.)";

inline constexpr std::string_view kSelectPrompt = R"(You plan retrieval over a keyword-indexed memory of past conversations.
Given a question and the keyword vocabulary, select the keywords most useful for finding the memories needed to answer the question.
Rules:
- Select at most {max_keywords} keywords, most important first.
- Copy keywords exactly as they appear in the vocabulary; never invent new ones.
Respond with only a JSON object of the form {"keywords": ["...", "..."]}.)";

inline constexpr std::string_view kAnswerPrompt = R"(You answer questions about a user's past conversations using retrieved memories.
You receive the question, your previous answer (if any), the critical memories you kept from earlier rounds, and newly retrieved memories. Each memory is shown as "[id] question / answer / session".
Tasks:
1. Answer the question as precisely as the memories allow. Keep the answer short.
2. Decide whether the available memories are sufficient to answer with confidence.
3. List the ids of the memories that are essential for the answer; they will be kept for the next round. Only use ids that appear in the input.
Respond with only a JSON object of the form {"answer": "...", "sufficient": true or false, "critical_ids": [id, ...]}.)";

inline constexpr std::string_view kRewritePrompt = R"(You rewrite a drafted answer into the final answer shown to the user.
Use only the draft answer and the supporting memories provided; do not add new facts.
Formatting guidelines:
- Answer in a short phrase, not a full sentence, unless a sentence is required.
- Convert relative dates ("yesterday", "three days ago", "last week") into absolute dates using the session dates of the supporting memories, written as "D Month YYYY" (for example "26 April 2022").
- Write numbers as digits and keep names exactly as they appear in the memories.
Examples:
Draft: "three days ago" with a supporting memory from a session dated 29 April 2022 -> 26 April 2022
Draft: "She went hiking and also swam" -> hiking, swimming
Respond with only the final answer text.)";

struct PromptSet {
  std::string extract{kExtractPrompt};
  std::string match{kMatchPrompt};
  std::string select{kSelectPrompt};
  std::string answer{kAnswerPrompt};
  std::string rewrite{kRewritePrompt};

  /// Built-in prompts overridden by any of the five files present in `dir`.
  static PromptSet load(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw ValidationError("prompts directory not found: " + dir.string());
    PromptSet set;
    auto read = [&](const char* file, std::string& target) {
      auto path = dir / file;
      if (!std::filesystem::exists(path)) return;
      std::ifstream in(path, std::ios::binary);
      if (!in) throw Error("cannot read prompt file " + path.string());
      std::stringstream buf;
      buf << in.rdbuf();
      target = buf.str();
      while (!target.empty() && (target.back() == '\n' || target.back() == '\r')) target.pop_back();
    };
    read("extract.txt", set.extract);
    read("match.txt", set.match);
    read("select.txt", set.select);
    read("answer.txt", set.answer);
    read("rewrite.txt", set.rewrite);
    return set;
  }

  /// Content hash over all five prompts; part of bank cache keys.
  std::string fingerprint() const {
    std::uint64_t h = fnv1a64(extract);
    for (const auto* p : {&match, &select, &answer, &rewrite}) h = fnv1a64(*p, h ^ 0x9e3779b97f4a7c15ULL);
    return hex64(h);
  }
};

/// Replaces every "{name}" with `value`.
inline std::string render_template(std::string text, std::string_view name, std::string_view value) {
  std::string needle = "{" + std::string(name) + "}";
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + value.size())) {
    text.replace(pos, needle.size(), value);
  }
  return text;
}

}  // namespace mgr
