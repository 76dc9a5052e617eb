#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace mgr {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input rejected before any state was touched (empty text, bad config value).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A referenced entity (memory id, keyword) does not exist.
class LookupError : public Error {
 public:
  using Error::Error;
};

/// A document on disk or a dataset file could not be decoded. `where` names
/// the offending field or JSON path.
class ParseError : public Error {
 public:
  ParseError(std::string where, const std::string& message)
      : Error(where.empty() ? message : where + ": " + message), where_(std::move(where)) {}

  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

/// A metric was asked for on inputs where it is not defined.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

enum class GatewayErrorKind { precondition, transport, http_status, missing_api_key, bad_response };

inline const char* to_string(GatewayErrorKind kind) {
  switch (kind) {
    case GatewayErrorKind::precondition: return "precondition";
    case GatewayErrorKind::transport: return "transport";
    case GatewayErrorKind::http_status: return "http_status";
    case GatewayErrorKind::missing_api_key: return "missing_api_key";
    case GatewayErrorKind::bad_response: return "bad_response";
  }
  return "unknown";
}

class GatewayError : public Error {
 public:
  GatewayError(GatewayErrorKind kind, const std::string& message, int attempts = 0, int status = 0)
      : Error(std::string(to_string(kind)) + ": " + message),
        kind_(kind),
        attempts_(attempts),
        status_(status) {}

  GatewayErrorKind kind() const noexcept { return kind_; }
  int attempts() const noexcept { return attempts_; }
  int status() const noexcept { return status_; }

 private:
  GatewayErrorKind kind_;
  int attempts_;
  int status_;
};

enum class SchemaErrorKind { no_object, missing_field, wrong_type };

inline const char* to_string(SchemaErrorKind kind) {
  switch (kind) {
    case SchemaErrorKind::no_object: return "no_object";
    case SchemaErrorKind::missing_field: return "missing_field";
    case SchemaErrorKind::wrong_type: return "wrong_type";
  }
  return "unknown";
}

/// Structured completion did not satisfy its schema. `snippet` holds the text
/// that was being decoded, truncated for logging.
class SchemaError : public Error {
 public:
  SchemaError(SchemaErrorKind kind, std::string field, std::string snippet)
      : Error(make_message(kind, field, snippet)),
        kind_(kind),
        field_(std::move(field)),
        snippet_(std::move(snippet)) {}

  SchemaErrorKind kind() const noexcept { return kind_; }
  const std::string& field() const noexcept { return field_; }
  const std::string& snippet() const noexcept { return snippet_; }

 private:
  static std::string make_message(SchemaErrorKind kind, const std::string& field,
                                  const std::string& snippet) {
    constexpr std::size_t kMaxSnippet = 160;
    std::string msg = to_string(kind);
    if (!field.empty()) msg += " '" + field + "'";
    msg += " in: ";
    msg += snippet.size() > kMaxSnippet ? snippet.substr(0, kMaxSnippet) + "..." : snippet;
    return msg;
  }

  SchemaErrorKind kind_;
  std::string field_;
  std::string snippet_;
};

}  // namespace mgr
