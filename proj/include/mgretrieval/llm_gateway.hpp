#pragma once

// Chat-completion gateway. A provider turns a ChatRequest into text; the
// gateway validates requests, measures cost and keeps shared counters.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "mgretrieval/error.hpp"
#include "mgretrieval/metrics.hpp"
#include "mgretrieval/text.hpp"

namespace mgr {

enum class RoleTag { extract, match, select, answer, rewrite };

inline const char* to_string(RoleTag role) {
  switch (role) {
    case RoleTag::extract: return "extract";
    case RoleTag::match: return "match";
    case RoleTag::select: return "select";
    case RoleTag::answer: return "answer";
    case RoleTag::rewrite: return "rewrite";
  }
  return "unknown";
}

inline std::optional<RoleTag> role_from_string(std::string_view s) {
  for (auto r : {RoleTag::extract, RoleTag::match, RoleTag::select, RoleTag::answer, RoleTag::rewrite}) {
    if (s == to_string(r)) return r;
  }
  return std::nullopt;
}

struct ChatRequest {
  std::string system_prompt;
  std::string user_prompt;
  double temperature = 0.0;
  RoleTag role = RoleTag::answer;
};

using Duration = std::chrono::nanoseconds;

struct ChatResponse {
  std::string text;
  TokenCount tokens_in;
  TokenCount tokens_out;
  Duration latency{0};

  double estimated_tokens_in() const { return tokens_in.estimate(); }
  double estimated_tokens_out() const { return tokens_out.estimate(); }
};

/// Calls, tokens and latency spent on behalf of one caller.
struct CostTally {
  std::uint64_t calls = 0;
  TokenCount tokens_in;
  TokenCount tokens_out;
  Duration latency{0};

  TokenCount tokens() const { return tokens_in + tokens_out; }

  CostTally& operator+=(const CostTally& o) {
    calls += o.calls;
    tokens_in += o.tokens_in;
    tokens_out += o.tokens_out;
    latency += o.latency;
    return *this;
  }
};

/// What a provider hands back: the completion text and how long it took.
struct ProviderReply {
  std::string text;
  Duration latency{0};
};

class ChatProvider {
 public:
  virtual ~ChatProvider() = default;
  virtual ProviderReply send(const ChatRequest& request) = 0;
  virtual std::string name() const = 0;
};

// ---------------------------------------------------------------------------
// Scripted provider

/// Deterministic provider driven by rules. Lookup order: a rule whose
/// `user_hash` equals the FNV-1a hash of the user prompt; then rules whose
/// `contains` substrings all occur in the user prompt (in declaration order);
/// then the catch-all rule for the role. Latency is always zero.
class ScriptedProvider : public ChatProvider {
 public:
  enum class Failure { none, transport, http_status };

  struct Rule {
    RoleTag role = RoleTag::answer;
    std::optional<std::string> user_hash;
    std::vector<std::string> contains;
    std::string response;
    Failure failure = Failure::none;
  };

  ScriptedProvider() = default;
  explicit ScriptedProvider(std::vector<Rule> rules) : rules_(std::move(rules)) {}

  static std::string hash_prompt(std::string_view user_prompt) { return hex64(fnv1a64(user_prompt)); }

  ScriptedProvider& on(RoleTag role, std::string response) {
    rules_.push_back(Rule{role, std::nullopt, {}, std::move(response), Failure::none});
    return *this;
  }
  ScriptedProvider& on_contains(RoleTag role, std::vector<std::string> needles, std::string response) {
    rules_.push_back(Rule{role, std::nullopt, std::move(needles), std::move(response), Failure::none});
    return *this;
  }
  ScriptedProvider& on_prompt(RoleTag role, std::string_view user_prompt, std::string response) {
    rules_.push_back(Rule{role, hash_prompt(user_prompt), {}, std::move(response), Failure::none});
    return *this;
  }
  ScriptedProvider& fail(RoleTag role, Failure failure = Failure::transport) {
    rules_.push_back(Rule{role, std::nullopt, {}, "", failure});
    return *this;
  }

  const std::vector<Rule>& rules() const { return rules_; }

  ProviderReply send(const ChatRequest& request) override {
    const Rule* rule = find(request);
    if (!rule) {
      throw GatewayError(GatewayErrorKind::transport,
                         std::string("scripted provider has no rule for role ") + to_string(request.role), 1);
    }
    switch (rule->failure) {
      case Failure::transport: throw GatewayError(GatewayErrorKind::transport, "scripted transport failure", 1);
      case Failure::http_status: throw GatewayError(GatewayErrorKind::http_status, "scripted HTTP 503", 1, 503);
      case Failure::none: break;
    }
    return ProviderReply{rule->response, Duration{0}};
  }

  std::string name() const override { return "scripted"; }

  /// {"rules": [{"role": "answer", "user_hash"?: "...", "contains"?: "..." | [...],
  ///             "response"?: "..." | {...}, "error"?: "transport" | "http_status"}]}
  /// Object-valued responses are serialized compactly.
  static ScriptedProvider from_json(const nlohmann::json& doc) {
    if (!doc.is_object() || !doc.contains("rules") || !doc.at("rules").is_array()) {
      throw ParseError("rules", "script must be an object with a 'rules' array");
    }
    std::vector<Rule> rules;
    const auto& arr = doc.at("rules");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const auto& r = arr[i];
      std::string where = "rules[" + std::to_string(i) + "]";
      if (!r.is_object()) throw ParseError(where, "must be an object");
      Rule rule;
      if (!r.contains("role") || !r.at("role").is_string()) throw ParseError(where + ".role", "missing role");
      auto role = role_from_string(r.at("role").get<std::string>());
      if (!role) throw ParseError(where + ".role", "unknown role " + r.at("role").dump());
      rule.role = *role;
      if (r.contains("user_hash")) {
        if (!r.at("user_hash").is_string()) throw ParseError(where + ".user_hash", "must be text");
        rule.user_hash = r.at("user_hash").get<std::string>();
      }
      if (r.contains("contains")) {
        const auto& c = r.at("contains");
        if (c.is_string()) {
          rule.contains.push_back(c.get<std::string>());
        } else if (c.is_array()) {
          for (const auto& s : c) {
            if (!s.is_string()) throw ParseError(where + ".contains", "must hold text");
            rule.contains.push_back(s.get<std::string>());
          }
        } else {
          throw ParseError(where + ".contains", "must be text or an array of text");
        }
      }
      if (r.contains("error")) {
        auto e = r.at("error").is_string() ? r.at("error").get<std::string>() : std::string{};
        if (e == "transport") rule.failure = Failure::transport;
        else if (e == "http_status") rule.failure = Failure::http_status;
        else throw ParseError(where + ".error", "expected 'transport' or 'http_status'");
      } else {
        if (!r.contains("response")) throw ParseError(where + ".response", "missing response");
        const auto& resp = r.at("response");
        rule.response = resp.is_string() ? resp.get<std::string>() : resp.dump();
      }
      rules.push_back(std::move(rule));
    }
    return ScriptedProvider(std::move(rules));
  }

  static ScriptedProvider load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError(path.string(), "cannot open script");
    std::stringstream buf;
    buf << in.rdbuf();
    auto doc = nlohmann::json::parse(buf.str(), nullptr, false);
    if (doc.is_discarded()) throw ParseError(path.string(), "malformed script JSON");
    return from_json(doc);
  }

 private:
  const Rule* find(const ChatRequest& request) const {
    auto hash = hash_prompt(request.user_prompt);
    for (const auto& r : rules_) {
      if (r.role == request.role && r.user_hash && *r.user_hash == hash) return &r;
    }
    for (const auto& r : rules_) {
      if (r.role != request.role || r.user_hash || r.contains.empty()) continue;
      bool all = std::all_of(r.contains.begin(), r.contains.end(), [&](const std::string& needle) {
        return request.user_prompt.find(needle) != std::string::npos;
      });
      if (all) return &r;
    }
    for (const auto& r : rules_) {
      if (r.role == request.role && !r.user_hash && r.contains.empty()) return &r;
    }
    return nullptr;
  }

  std::vector<Rule> rules_;
};

/// Provider backed by a function; handy for property tests that synthesize
/// replies from the prompt. The function must be pure for traces to be
/// reproducible.
class CallbackProvider : public ChatProvider {
 public:
  using Fn = std::function<std::string(const ChatRequest&)>;
  explicit CallbackProvider(Fn fn, std::string name = "callback") : fn_(std::move(fn)), name_(std::move(name)) {}
  ProviderReply send(const ChatRequest& request) override { return ProviderReply{fn_(request), Duration{0}}; }
  std::string name() const override { return name_; }

 private:
  Fn fn_;
  std::string name_;
};

// ---------------------------------------------------------------------------
// OpenAI-compatible HTTP provider

struct ProviderConfig {
  std::string base_url = "https://api.openai.com/v1";
  std::string model_name = "gpt-4o-mini";
  std::string api_key_env = "OPENAI_API_KEY";  // empty: send no Authorization header
  std::chrono::milliseconds request_timeout{60000};
  int max_retries = 3;
  std::chrono::milliseconds backoff_base{500};

  void validate() const {
    if (base_url.empty()) throw ValidationError("provider: base_url is empty");
    if (model_name.empty()) throw ValidationError("provider: model_name is empty");
    if (request_timeout.count() <= 0) throw ValidationError("provider: timeout must be positive");
    if (max_retries < 0) throw ValidationError("provider: max_retries must be >= 0");
  }
};

class HttpProvider : public ChatProvider {
 public:
  explicit HttpProvider(ProviderConfig config) : config_(std::move(config)) {
    config_.validate();
    auto scheme = config_.base_url.find("://");
    auto host_start = scheme == std::string::npos ? 0 : scheme + 3;
    auto path_start = config_.base_url.find('/', host_start);
    origin_ = config_.base_url.substr(0, path_start);
    path_prefix_ = path_start == std::string::npos ? "" : config_.base_url.substr(path_start);
    while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
  }

  const ProviderConfig& config() const { return config_; }
  std::string endpoint_path() const { return path_prefix_ + "/chat/completions"; }

  static nlohmann::json request_body(const ProviderConfig& config, const ChatRequest& request) {
    return {{"model", config.model_name},
            {"messages",
             nlohmann::json::array({{{"role", "system"}, {"content", request.system_prompt}},
                                    {{"role", "user"}, {"content", request.user_prompt}}})},
            {"temperature", request.temperature}};
  }

  /// choices[0].message.content
  static std::string completion_text(const std::string& body) {
    auto doc = nlohmann::json::parse(body, nullptr, false);
    if (doc.is_discarded()) throw GatewayError(GatewayErrorKind::bad_response, "response is not JSON");
    try {
      return doc.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      throw GatewayError(GatewayErrorKind::bad_response, "missing choices[0].message.content");
    }
  }

  ProviderReply send(const ChatRequest& request) override {
    httplib::Headers headers;
    if (!config_.api_key_env.empty()) {
      const char* key = std::getenv(config_.api_key_env.c_str());
      if (!key || !*key) {
        throw GatewayError(GatewayErrorKind::missing_api_key,
                           "environment variable " + config_.api_key_env + " is not set");
      }
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    auto body = request_body(config_, request).dump();

    httplib::Client client(origin_);
    auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(config_.request_timeout);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);

    const int attempts = config_.max_retries + 1;
    auto start = std::chrono::steady_clock::now();
    std::string last_error;
    int last_status = 0;
    for (int attempt = 1; attempt <= attempts; ++attempt) {
      if (attempt > 1) std::this_thread::sleep_for(backoff(attempt - 1));
      auto res = client.Post(endpoint_path(), headers, body, "application/json");
      if (!res) {
        last_status = 0;
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status == 429 || res->status >= 500) {
        last_status = res->status;
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status < 200 || res->status >= 300) {
        throw GatewayError(GatewayErrorKind::http_status,
                           "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200), attempt,
                           res->status);
      }
      auto text = completion_text(res->body);
      return ProviderReply{std::move(text), std::chrono::steady_clock::now() - start};
    }
    if (last_status != 0) {
      throw GatewayError(GatewayErrorKind::http_status,
                         last_error + " after " + std::to_string(attempts) + " attempts", attempts, last_status);
    }
    throw GatewayError(GatewayErrorKind::transport,
                       last_error + " after " + std::to_string(attempts) + " attempts", attempts);
  }

  std::string name() const override { return "http:" + config_.model_name; }

 private:
  std::chrono::milliseconds backoff(int retry) {
    std::lock_guard lock(rng_mutex_);
    std::uniform_real_distribution<double> jitter(0.5, 1.5);
    double ms = static_cast<double>(config_.backoff_base.count()) * static_cast<double>(1 << std::min(retry - 1, 10));
    return std::chrono::milliseconds(static_cast<long long>(ms * jitter(rng_)));
  }

  ProviderConfig config_;
  std::string origin_;
  std::string path_prefix_;
  std::mutex rng_mutex_;
  std::mt19937 rng_{std::random_device{}()};
};

// ---------------------------------------------------------------------------
// Gateway

struct GatewayCounters {
  std::uint64_t calls = 0;
  std::uint64_t failures = 0;
  TokenCount tokens_in;
  TokenCount tokens_out;
  Duration latency{0};

  TokenCount tokens() const { return tokens_in + tokens_out; }
};

struct TranscriptEntry {
  ChatRequest request;
  std::optional<std::string> response;  // empty when the call failed
};

class LlmGateway {
 public:
  explicit LlmGateway(std::shared_ptr<ChatProvider> provider) : provider_(std::move(provider)) {
    if (!provider_) throw ValidationError("gateway: provider is null");
  }

  /// Sends one request. Every call that passes validation counts once toward
  /// `calls` and its prompt tokens, whether or not the provider succeeds.
  ChatResponse complete(const ChatRequest& request, CostTally* tally = nullptr) {
    if (is_blank(request.user_prompt)) throw GatewayError(GatewayErrorKind::precondition, "user prompt is empty");
    if (is_blank(request.system_prompt)) throw GatewayError(GatewayErrorKind::precondition, "system prompt is empty");
    if (!(request.temperature >= 0.0 && request.temperature <= 2.0)) {
      throw GatewayError(GatewayErrorKind::precondition, "temperature outside [0, 2]");
    }

    ChatResponse response;
    response.tokens_in = count_tokens(request.system_prompt) + count_tokens(request.user_prompt);
    calls_.fetch_add(1, std::memory_order_relaxed);
    words_in_.fetch_add(response.tokens_in.words, std::memory_order_relaxed);
    symbols_in_.fetch_add(response.tokens_in.symbols, std::memory_order_relaxed);
    if (tally) {
      ++tally->calls;
      tally->tokens_in += response.tokens_in;
    }

    ProviderReply reply;
    try {
      reply = provider_->send(request);
    } catch (...) {
      failures_.fetch_add(1, std::memory_order_relaxed);
      record(request, std::nullopt);
      throw;
    }
    response.text = std::move(reply.text);
    response.latency = reply.latency;
    response.tokens_out = count_tokens(response.text);
    words_out_.fetch_add(response.tokens_out.words, std::memory_order_relaxed);
    symbols_out_.fetch_add(response.tokens_out.symbols, std::memory_order_relaxed);
    latency_ns_.fetch_add(static_cast<std::uint64_t>(response.latency.count()), std::memory_order_relaxed);
    if (tally) {
      tally->tokens_out += response.tokens_out;
      tally->latency += response.latency;
    }
    record(request, response.text);
    return response;
  }

  GatewayCounters counters() const {
    GatewayCounters c;
    c.calls = calls_.load();
    c.failures = failures_.load();
    c.tokens_in = {words_in_.load(), symbols_in_.load()};
    c.tokens_out = {words_out_.load(), symbols_out_.load()};
    c.latency = Duration(static_cast<Duration::rep>(latency_ns_.load()));
    return c;
  }

  void reset_counters() {
    calls_ = 0;
    failures_ = 0;
    words_in_ = symbols_in_ = words_out_ = symbols_out_ = 0;
    latency_ns_ = 0;
  }

  void enable_transcript(bool on = true) {
    std::lock_guard lock(transcript_mutex_);
    transcript_enabled_ = on;
  }
  std::vector<TranscriptEntry> transcript() const {
    std::lock_guard lock(transcript_mutex_);
    return transcript_;
  }

  const ChatProvider& provider() const { return *provider_; }

 private:
  void record(const ChatRequest& request, std::optional<std::string> response) {
    std::lock_guard lock(transcript_mutex_);
    if (transcript_enabled_) transcript_.push_back({request, std::move(response)});
  }

  std::shared_ptr<ChatProvider> provider_;
  std::atomic<std::uint64_t> calls_{0}, failures_{0};
  std::atomic<std::uint64_t> words_in_{0}, symbols_in_{0}, words_out_{0}, symbols_out_{0};
  std::atomic<std::uint64_t> latency_ns_{0};
  mutable std::mutex transcript_mutex_;
  bool transcript_enabled_ = false;
  std::vector<TranscriptEntry> transcript_;
};

}  // namespace mgr
