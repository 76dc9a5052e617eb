#pragma once

// INI configuration for the command-line tool.
//
//   [provider.main] / [provider.aux]
//     type = http | scripted
//     base_url, model_name, api_key_env, timeout (seconds), retries   (http)
//     script = path/to/script.json                                     (scripted)
//   [retrieval]   depth = 4, max_rounds = 4
//   [prompts]     directory = path
//   [evaluation]  parallelism = 1, cache_dir = path
//
// Relative paths are resolved against the directory holding the config file.

#include <chrono>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "mgretrieval/error.hpp"
#include "mgretrieval/llm_gateway.hpp"
#include "mgretrieval/reflective_loop.hpp"

namespace mgr {

struct ProviderSettings {
  enum class Kind { http, scripted };
  Kind kind = Kind::http;
  ProviderConfig http;
  std::filesystem::path script;
};

struct AppConfig {
  ProviderSettings main;
  ProviderSettings aux;
  RetrievalConfig retrieval;
  std::optional<std::filesystem::path> prompts_dir;
  std::size_t parallelism = 1;
  std::optional<std::filesystem::path> cache_dir;

  AppConfig() { main.http.model_name = "gpt-4o"; }

  static AppConfig load(const std::filesystem::path& path);
};

inline std::shared_ptr<ChatProvider> make_provider(const ProviderSettings& s) {
  if (s.kind == ProviderSettings::Kind::scripted) {
    return std::make_shared<ScriptedProvider>(ScriptedProvider::load(s.script));
  }
  return std::make_shared<HttpProvider>(s.http);
}

namespace detail {

namespace pt = boost::property_tree;

inline const pt::ptree* section(const pt::ptree& root, const std::string& name) {
  auto it = root.find(name);
  return it == root.not_found() ? nullptr : &it->second;
}

template <typename T>
T value_or(const pt::ptree* sec, const std::string& section_name, const char* key, T fallback) {
  if (!sec) return fallback;
  auto v = sec->get_optional<std::string>(pt::ptree::path_type(key, '/'));
  if (!v) return fallback;
  try {
    return sec->get<T>(pt::ptree::path_type(key, '/'));
  } catch (const pt::ptree_error&) {
    throw ParseError(section_name + "." + key, "invalid value '" + *v + "'");
  }
}

inline void read_provider(const pt::ptree& root, const std::string& name, const std::filesystem::path& base,
                          ProviderSettings& out) {
  const auto* sec = section(root, name);
  if (!sec) return;
  auto type = value_or<std::string>(sec, name, "type", "http");
  if (type == "scripted") {
    out.kind = ProviderSettings::Kind::scripted;
    auto script = value_or<std::string>(sec, name, "script", "");
    if (script.empty()) throw ParseError(name + ".script", "scripted provider needs a script path");
    out.script = std::filesystem::path(script).is_absolute() ? std::filesystem::path(script) : base / script;
  } else if (type == "http") {
    out.kind = ProviderSettings::Kind::http;
  } else {
    throw ParseError(name + ".type", "expected 'http' or 'scripted', got '" + type + "'");
  }
  auto& h = out.http;
  h.base_url = value_or<std::string>(sec, name, "base_url", h.base_url);
  h.model_name = value_or<std::string>(sec, name, "model_name", h.model_name);
  h.api_key_env = value_or<std::string>(sec, name, "api_key_env", h.api_key_env);
  auto timeout_s = value_or<double>(sec, name, "timeout", static_cast<double>(h.request_timeout.count()) / 1000.0);
  h.request_timeout = std::chrono::milliseconds(static_cast<long long>(timeout_s * 1000.0));
  h.max_retries = value_or<int>(sec, name, "retries", h.max_retries);
  try {
    h.validate();
  } catch (const ValidationError& e) {
    throw ParseError(name, e.what());
  }
}

}  // namespace detail

inline AppConfig AppConfig::load(const std::filesystem::path& path) {
  namespace pt = boost::property_tree;
  pt::ptree root;
  try {
    pt::read_ini(path.string(), root);
  } catch (const pt::ini_parser_error& e) {
    throw ParseError(path.string(), e.what());
  }
  auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  for (const auto& [name, _] : root) {
    if (name != "provider.main" && name != "provider.aux" && name != "retrieval" && name != "prompts" &&
        name != "evaluation") {
      throw ParseError(name, "unknown config section");
    }
  }

  AppConfig cfg;
  detail::read_provider(root, "provider.main", base, cfg.main);
  detail::read_provider(root, "provider.aux", base, cfg.aux);

  const auto* retrieval = detail::section(root, "retrieval");
  cfg.retrieval.depth_cap = detail::value_or<std::size_t>(retrieval, "retrieval", "depth", cfg.retrieval.depth_cap);
  cfg.retrieval.max_rounds =
      detail::value_or<std::size_t>(retrieval, "retrieval", "max_rounds", cfg.retrieval.max_rounds);
  try {
    cfg.retrieval.validate();
  } catch (const ValidationError& e) {
    throw ParseError("retrieval", e.what());
  }

  auto dir = detail::value_or<std::string>(detail::section(root, "prompts"), "prompts", "directory", "");
  if (!dir.empty()) cfg.prompts_dir = std::filesystem::path(dir).is_absolute() ? std::filesystem::path(dir) : base / dir;

  const auto* eval = detail::section(root, "evaluation");
  cfg.parallelism = detail::value_or<std::size_t>(eval, "evaluation", "parallelism", cfg.parallelism);
  if (cfg.parallelism == 0) throw ParseError("evaluation.parallelism", "must be >= 1");
  auto cache = detail::value_or<std::string>(eval, "evaluation", "cache_dir", "");
  if (!cache.empty()) cfg.cache_dir = std::filesystem::path(cache).is_absolute() ? std::filesystem::path(cache) : base / cache;
  return cfg;
}

}  // namespace mgr
