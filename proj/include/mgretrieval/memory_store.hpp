#pragma once

// Append-only memory bank: raw (question, answer) records, the keyword
// vocabulary and the keyword -> memory-id inverted mapping.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mgretrieval/error.hpp"
#include "mgretrieval/text.hpp"

namespace mgr {

using MemoryId = std::uint64_t;
using MemoryIdSet = std::vector<MemoryId>;  // sorted, duplicate-free
using Timestamp = std::chrono::sys_time<std::chrono::microseconds>;

inline Timestamp now_timestamp() {
  return std::chrono::time_point_cast<std::chrono::microseconds>(std::chrono::system_clock::now());
}

/// RFC-3339 UTC with microsecond precision, e.g. 2022-04-26T09:30:00.000000Z.
inline std::string format_rfc3339(Timestamp ts) {
  using namespace std::chrono;
  auto day = floor<days>(ts);
  year_month_day ymd{day};
  hh_mm_ss tod{ts - day};
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02d:%02d:%02d.%06lldZ", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                static_cast<int>(tod.hours().count()), static_cast<int>(tod.minutes().count()),
                static_cast<int>(tod.seconds().count()),
                static_cast<long long>(tod.subseconds().count()));
  return buf;
}

/// Accepts "YYYY-MM-DDTHH:MM:SS[.fraction](Z|+HH:MM|-HH:MM)".
inline std::optional<Timestamp> parse_rfc3339(const std::string& text) {
  using namespace std::chrono;
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0, consumed = 0;
  if (std::sscanf(text.c_str(), "%4d-%2d-%2d%*1[Tt ]%2d:%2d:%2d%n", &y, &mo, &d, &h, &mi, &s, &consumed) != 6 ||
      consumed != 19) {
    return std::nullopt;
  }
  std::size_t pos = 19;
  long long micros = 0;
  if (pos < text.size() && text[pos] == '.') {
    ++pos;
    int digits = 0;
    while (pos < text.size() && text[pos] >= '0' && text[pos] <= '9') {
      if (digits < 6) {
        micros = micros * 10 + (text[pos] - '0');
        ++digits;
      }
      ++pos;
    }
    if (digits == 0) return std::nullopt;
    for (; digits < 6; ++digits) micros *= 10;
  }
  long long offset_min = 0;
  if (pos < text.size() && (text[pos] == 'Z' || text[pos] == 'z')) {
    ++pos;
  } else if (pos < text.size() && (text[pos] == '+' || text[pos] == '-')) {
    int oh = 0, om = 0;
    if (pos + 6 > text.size() || std::sscanf(text.c_str() + pos + 1, "%2d:%2d", &oh, &om) != 2) {
      return std::nullopt;
    }
    offset_min = (oh * 60 + om) * (text[pos] == '-' ? -1 : 1);
    pos += 6;
  } else {
    return std::nullopt;
  }
  if (pos != text.size()) return std::nullopt;
  year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || s > 60) return std::nullopt;
  return Timestamp{sys_days{ymd}} + hours{h} + minutes{mi} + seconds{s} + microseconds{micros} -
         minutes{offset_min};
}

struct MemoryRecord {
  MemoryId id = 0;
  std::string question;
  std::string answer;
  std::optional<std::string> session;
  Timestamp ingested_at{};

  friend bool operator==(const MemoryRecord&, const MemoryRecord&) = default;
};

/// Ordered, append-only set of normalized keywords.
class KeywordVocabulary {
 public:
  bool contains(const std::string& keyword) const { return index_.count(keyword) != 0; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<std::string>& entries() const { return entries_; }

  /// Position in insertion order, if present.
  std::optional<std::size_t> order_of(const std::string& keyword) const {
    auto it = index_.find(keyword);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  /// Returns true if the keyword was new.
  bool insert(const std::string& keyword) {
    if (contains(keyword)) return false;
    index_.emplace(keyword, entries_.size());
    entries_.push_back(keyword);
    return true;
  }

  friend bool operator==(const KeywordVocabulary& a, const KeywordVocabulary& b) {
    return a.entries_ == b.entries_;
  }

 private:
  std::vector<std::string> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct RegistrationResult {
  std::vector<std::string> new_entries;
  std::size_t updated_postings = 0;
};

class MemoryBank {
 public:
  static constexpr int kFormatVersion = 1;

  MemoryId add_record(const std::string& question, const std::string& answer,
                      std::optional<std::string> session = std::nullopt,
                      std::optional<Timestamp> ingested_at = std::nullopt) {
    if (is_blank(question)) throw ValidationError("add_record: question is empty");
    if (is_blank(answer)) throw ValidationError("add_record: answer is empty");
    MemoryId id = records_.empty() ? 0 : records_.rbegin()->first + 1;
    records_.emplace(id, MemoryRecord{id, question, answer, std::move(session),
                                      ingested_at.value_or(now_timestamp())});
    return id;
  }

  /// Inserts unseen keywords into the vocabulary and adds `memory_id` to the
  /// posting list of every keyword, at most once per (memory, keyword) pair.
  RegistrationResult register_keywords(MemoryId memory_id, const std::vector<std::string>& keywords) {
    if (!records_.count(memory_id)) {
      throw LookupError("register_keywords: unknown memory id " + std::to_string(memory_id));
    }
    if (keywords.empty()) throw ValidationError("register_keywords: keyword list is empty");
    for (const auto& k : keywords) {
      if (k.empty() || normalize_keyword(k) != k) {
        throw ValidationError("register_keywords: keyword not normalized: '" + k + "'");
      }
    }
    RegistrationResult result;
    for (const auto& k : keywords) {
      if (vocabulary_.insert(k)) result.new_entries.push_back(k);
      auto& postings = mapping_[k];
      auto it = std::lower_bound(postings.begin(), postings.end(), memory_id);
      if (it == postings.end() || *it != memory_id) {
        postings.insert(it, memory_id);
        ++result.updated_postings;
      }
    }
    return result;
  }

  /// Posting list for a keyword; empty for unknown keywords.
  const MemoryIdSet& associated_memories(const std::string& keyword) const {
    static const MemoryIdSet kEmpty;
    auto it = mapping_.find(keyword);
    return it == mapping_.end() ? kEmpty : it->second;
  }

  const MemoryRecord& record(MemoryId id) const {
    auto it = records_.find(id);
    if (it == records_.end()) throw LookupError("unknown memory id " + std::to_string(id));
    return it->second;
  }
  bool has_record(MemoryId id) const { return records_.count(id) != 0; }

  const std::map<MemoryId, MemoryRecord>& records() const { return records_; }
  const KeywordVocabulary& vocabulary() const { return vocabulary_; }
  const std::map<std::string, MemoryIdSet>& mapping() const { return mapping_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  /// Checks every cross-structure invariant; returns a description of the first
  /// violation.
  std::optional<std::string> check_integrity() const {
    for (const auto& [id, rec] : records_) {
      if (rec.id != id) return "record key " + std::to_string(id) + " holds id " + std::to_string(rec.id);
      if (is_blank(rec.question) || is_blank(rec.answer)) return "record " + std::to_string(id) + " has empty text";
    }
    for (const auto& k : vocabulary_.entries()) {
      if (k.empty() || normalize_keyword(k) != k) return "vocabulary entry not normalized: '" + k + "'";
    }
    for (const auto& [k, ids] : mapping_) {
      if (!vocabulary_.contains(k)) return "mapping keyword '" + k + "' missing from vocabulary";
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (!records_.count(ids[i])) return "mapping '" + k + "' references unknown id " + std::to_string(ids[i]);
        if (i > 0 && ids[i - 1] >= ids[i]) return "mapping '" + k + "' is not sorted and duplicate-free";
      }
    }
    return std::nullopt;
  }

  friend bool operator==(const MemoryBank&, const MemoryBank&) = default;

  nlohmann::json to_json() const {
    nlohmann::json records = nlohmann::json::array();
    for (const auto& [id, rec] : records_) {
      records.push_back({{"id", id},
                         {"question", rec.question},
                         {"answer", rec.answer},
                         {"session", rec.session ? nlohmann::json(*rec.session) : nlohmann::json(nullptr)},
                         {"ingested_at", format_rfc3339(rec.ingested_at)}});
    }
    nlohmann::json mapping = nlohmann::json::object();
    for (const auto& [k, ids] : mapping_) mapping[k] = ids;
    return {{"format_version", kFormatVersion},
            {"records", std::move(records)},
            {"vocabulary", vocabulary_.entries()},
            {"mapping", std::move(mapping)}};
  }

  static MemoryBank from_json(const nlohmann::json& doc);

  void snapshot(const std::filesystem::path& path) const {
    auto tmp = path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw Error("snapshot: cannot open " + tmp.string() + " for writing");
      out << to_json().dump(2) << '\n';
      if (!out) throw Error("snapshot: write to " + tmp.string() + " failed");
    }
    std::filesystem::rename(tmp, path);
  }

  static MemoryBank load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError(path.string(), "cannot open bank file");
    std::stringstream buf;
    buf << in.rdbuf();
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(buf.str());
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("$", std::string("malformed bank document: ") + e.what());
    }
    return from_json(doc);
  }

 private:
  std::map<MemoryId, MemoryRecord> records_;
  KeywordVocabulary vocabulary_;
  std::map<std::string, MemoryIdSet> mapping_;
};

inline MemoryBank MemoryBank::from_json(const nlohmann::json& doc) {
  using nlohmann::json;
  if (!doc.is_object()) throw ParseError("$", "bank document must be an object");
  for (const auto& [key, _] : doc.items()) {
    if (key != "format_version" && key != "records" && key != "vocabulary" && key != "mapping") {
      throw ParseError(key, "unknown top-level field");
    }
  }
  auto require = [&](const char* key) -> const json& {
    if (!doc.contains(key)) throw ParseError(key, "missing field");
    return doc.at(key);
  };
  const auto& version = require("format_version");
  if (!version.is_number_integer()) throw ParseError("format_version", "must be an integer");
  if (version.get<int>() != kFormatVersion) {
    throw ParseError("format_version", "unsupported version " + version.dump());
  }

  MemoryBank bank;
  const auto& records = require("records");
  if (!records.is_array()) throw ParseError("records", "must be an array");
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    std::string where = "records[" + std::to_string(i) + "]";
    if (!r.is_object()) throw ParseError(where, "must be an object");
    for (const auto& [key, _] : r.items()) {
      if (key != "id" && key != "question" && key != "answer" && key != "session" && key != "ingested_at") {
        throw ParseError(where + "." + key, "unknown field");
      }
    }
    auto field = [&](const char* key) -> const json& {
      if (!r.contains(key)) throw ParseError(where + "." + key, "missing field");
      return r.at(key);
    };
    const auto& id = field("id");
    if (!id.is_number_unsigned()) throw ParseError(where + ".id", "must be a non-negative integer");
    const auto& q = field("question");
    const auto& a = field("answer");
    if (!q.is_string() || is_blank(q.get<std::string>())) throw ParseError(where + ".question", "must be non-empty text");
    if (!a.is_string() || is_blank(a.get<std::string>())) throw ParseError(where + ".answer", "must be non-empty text");
    const auto& s = field("session");
    if (!s.is_null() && !s.is_string()) throw ParseError(where + ".session", "must be text or null");
    const auto& ts = field("ingested_at");
    if (!ts.is_string()) throw ParseError(where + ".ingested_at", "must be RFC-3339 text");
    auto parsed = parse_rfc3339(ts.get<std::string>());
    if (!parsed) throw ParseError(where + ".ingested_at", "invalid RFC-3339 timestamp");

    MemoryRecord rec{id.get<MemoryId>(), q.get<std::string>(), a.get<std::string>(),
                     s.is_null() ? std::nullopt : std::optional<std::string>(s.get<std::string>()), *parsed};
    if (!bank.records_.emplace(rec.id, std::move(rec)).second) {
      throw ParseError(where + ".id", "duplicate id " + id.dump());
    }
  }

  const auto& vocabulary = require("vocabulary");
  if (!vocabulary.is_array()) throw ParseError("vocabulary", "must be an array");
  for (std::size_t i = 0; i < vocabulary.size(); ++i) {
    std::string where = "vocabulary[" + std::to_string(i) + "]";
    const auto& v = vocabulary[i];
    if (!v.is_string()) throw ParseError(where, "must be text");
    auto k = v.get<std::string>();
    if (k.empty() || normalize_keyword(k) != k) throw ParseError(where, "keyword not normalized");
    if (!bank.vocabulary_.insert(k)) throw ParseError(where, "duplicate keyword '" + k + "'");
  }

  const auto& mapping = require("mapping");
  if (!mapping.is_object()) throw ParseError("mapping", "must be an object");
  for (const auto& [k, ids] : mapping.items()) {
    std::string where = "mapping." + k;
    if (!bank.vocabulary_.contains(k)) throw ParseError(where, "keyword missing from vocabulary");
    if (!ids.is_array()) throw ParseError(where, "must be an array of ids");
    MemoryIdSet postings;
    for (const auto& id : ids) {
      if (!id.is_number_unsigned()) throw ParseError(where, "ids must be non-negative integers");
      auto value = id.get<MemoryId>();
      if (!bank.records_.count(value)) throw ParseError(where, "unknown memory id " + std::to_string(value));
      if (!postings.empty() && postings.back() >= value) throw ParseError(where, "ids must be sorted and unique");
      postings.push_back(value);
    }
    bank.mapping_.emplace(k, std::move(postings));
  }
  return bank;
}

}  // namespace mgr
