// mgretrieval: ingest memories, answer questions, evaluate and report costs.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mgretrieval.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::string prompts_dir;
};

struct Runtime {
  mgr::AppConfig config;
  mgr::PromptSet prompts;
  std::unique_ptr<mgr::LlmGateway> main;
  std::unique_ptr<mgr::LlmGateway> aux;
};

Runtime make_runtime(const Common& common) {
  Runtime rt;
  if (!common.config_path.empty()) rt.config = mgr::AppConfig::load(common.config_path);
  if (!common.prompts_dir.empty()) rt.config.prompts_dir = fs::path(common.prompts_dir);
  if (rt.config.prompts_dir) rt.prompts = mgr::PromptSet::load(*rt.config.prompts_dir);
  rt.main = std::make_unique<mgr::LlmGateway>(mgr::make_provider(rt.config.main));
  rt.aux = std::make_unique<mgr::LlmGateway>(mgr::make_provider(rt.config.aux));
  return rt;
}

void print_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("--config", common.config_path, "INI configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--prompts", common.prompts_dir, "Directory overriding the built-in prompts")
      ->check(CLI::ExistingDirectory);
}

int run_ingest(const Common& common, const std::string& input, const std::string& bank_path) {
  auto rt = make_runtime(common);
  mgr::MemoryBank bank = fs::exists(bank_path) ? mgr::MemoryBank::load(bank_path) : mgr::MemoryBank{};
  auto inputs = mgr::load_memory_inputs(input);
  auto report = mgr::ingest(inputs, bank, *rt.aux, rt.prompts);
  bank.snapshot(bank_path);

  print_warnings(report.warnings);
  for (const auto& f : report.failures) std::cerr << "error: record " << f.index << ": " << f.message << "\n";
  nlohmann::json summary = {{"records_added", report.records_added},
                            {"records_indexed", report.records_indexed},
                            {"new_vocabulary_entries", report.new_vocabulary_entries},
                            {"postings_updated", report.postings_updated},
                            {"failures", report.failures.size()},
                            {"aux", mgr::cost_to_json(report.aux, false)},
                            {"bank_records", bank.size()},
                            {"vocabulary_size", bank.vocabulary().size()}};
  std::cout << summary.dump(2) << "\n";
  return report.failures.empty() ? 0 : 2;
}

int run_query(const Common& common, const std::string& bank_path, const std::string& question,
              std::optional<std::size_t> max_rounds, std::optional<std::size_t> depth, const std::string& trace_path) {
  auto rt = make_runtime(common);
  auto bank = mgr::MemoryBank::load(bank_path);
  auto cfg = rt.config.retrieval;
  if (max_rounds) cfg.max_rounds = *max_rounds;
  if (depth) cfg.depth_cap = *depth;
  mgr::Retriever retriever{bank, *rt.main, *rt.aux, rt.prompts, cfg};
  auto trace = retriever.run_query(question);
  print_warnings(trace.warnings);
  if (!trace_path.empty()) {
    std::ofstream out(trace_path, std::ios::binary | std::ios::trunc);
    out << mgr::trace_to_json(trace, true).dump(2) << "\n";
  }
  std::cout << trace.rewritten_answer << "\n";
  return 0;
}

int run_inspect(const Common& common, const std::string& bank_path, const std::string& query,
                const std::vector<std::string>& keywords, std::optional<std::size_t> depth) {
  auto bank = mgr::MemoryBank::load(bank_path);
  std::vector<std::string> selected;
  std::vector<std::string> warnings;
  std::size_t cap = depth.value_or(4);
  if (!keywords.empty()) {
    for (const auto& k : mgr::normalize_keywords(keywords)) {
      if (bank.vocabulary().contains(k)) selected.push_back(k);
      else warnings.push_back("keyword '" + k + "' is not in the vocabulary; dropped");
    }
    if (selected.size() > cap) selected.resize(cap);
  } else {
    if (query.empty()) throw mgr::ValidationError("inspect needs --query or --keywords");
    auto rt = make_runtime(common);
    if (!depth) cap = rt.config.retrieval.depth_cap;
    auto sel = mgr::select_query_keywords(query, bank.vocabulary(), cap, *rt.aux, rt.prompts);
    selected = sel.keywords;
    warnings = sel.warnings;
  }
  print_warnings(warnings);

  nlohmann::json doc = {{"query", query}, {"selected_keywords", selected}};
  if (selected.empty()) {
    doc["levels"] = nlohmann::json::array();
    doc["traversal"] = nlohmann::json::array();
  } else {
    auto pyramid = mgr::build_pyramid(selected, bank);
    auto group_json = [](const mgr::KeywordGroup& g) {
      return nlohmann::json{{"keywords", g.keywords}, {"size", g.memories.size()}, {"memories", g.memories}};
    };
    nlohmann::json levels = nlohmann::json::array();
    for (std::size_t l = 1; l <= pyramid.depth(); ++l) {
      nlohmann::json groups = nlohmann::json::array();
      for (const auto& g : pyramid.level(l)) groups.push_back(group_json(g));
      levels.push_back({{"level", l}, {"groups", std::move(groups)}});
    }
    nlohmann::json traversal = nlohmann::json::array();
    for (const auto& g : pyramid.traversal()) traversal.push_back(g.keywords);
    doc["levels"] = std::move(levels);
    doc["traversal"] = std::move(traversal);
  }
  std::cout << doc.dump(2) << "\n";
  return 0;
}

int run_evaluate(const Common& common, const std::string& dataset_path, const std::string& format,
                 const std::string& out_dir, const std::string& cache_dir, std::optional<std::size_t> parallel,
                 std::optional<std::size_t> max_rounds, std::optional<std::size_t> depth) {
  auto fmt = mgr::dataset_format_from_string(format);
  if (!fmt) throw mgr::ValidationError("unknown dataset format '" + format + "'");
  auto rt = make_runtime(common);
  auto dataset = mgr::load_dataset(dataset_path, *fmt);

  mgr::EvalOptions options;
  options.retrieval = rt.config.retrieval;
  if (max_rounds) options.retrieval.max_rounds = *max_rounds;
  if (depth) options.retrieval.depth_cap = *depth;
  options.parallelism = parallel.value_or(rt.config.parallelism);
  options.cache_dir = rt.config.cache_dir;
  if (!cache_dir.empty()) options.cache_dir = fs::path(cache_dir);

  auto run = mgr::evaluate(dataset, *rt.main, *rt.aux, rt.prompts, options);
  mgr::write_report(run, out_dir);
  if (dataset.skipped_questions) {
    std::cerr << "note: skipped " << dataset.skipped_questions << " adversarial questions\n";
  }
  for (const auto& q : run.questions) {
    if (q.error) std::cerr << "error: question " << q.question.id << ": " << *q.error << "\n";
  }
  std::cout << mgr::render_score_table(run.aggregate) << "\n" << mgr::render_cost_table(mgr::cost_report(run));
  std::cout << "report written to " << (fs::path(out_dir) / "report.json").string() << "\n";
  return 0;
}

int run_cost_report(const std::string& report_path, bool as_json) {
  std::ifstream in(report_path);
  if (!in) throw mgr::ParseError(report_path, "cannot open report");
  auto doc = nlohmann::json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw mgr::ParseError(report_path, "malformed report JSON");
  auto run = mgr::run_from_json(doc);
  auto cost = mgr::cost_report(run);
  if (as_json) {
    auto j = mgr::cost_report_to_json(cost, true);
    j["accounting_consistent"] = mgr::accounting_consistent(cost, run.main_counters, run.aux_counters);
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << mgr::render_cost_table(cost);
    if (!mgr::accounting_consistent(cost, run.main_counters, run.aux_counters)) {
      std::cout << "warning: per-question tallies do not match gateway counters\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Keyword-pyramid reflective retrieval over conversational memory"};
  app.require_subcommand(1);

  Common common;

  std::string input, bank_path, question, trace_path, query, dataset_path, format = "simple_jsonl", out_dir,
                                                                  cache_dir, report_path;
  std::vector<std::string> keywords;
  std::optional<std::size_t> max_rounds, depth, parallel;
  bool as_json = false;

  auto* ingest = app.add_subcommand("ingest", "Extract keywords from memories and index them into a bank");
  ingest->add_option("--input", input, "Line-delimited {question, answer, session?} records")
      ->required()
      ->check(CLI::ExistingFile);
  ingest->add_option("--bank", bank_path, "Bank snapshot (created if missing)")->required();
  add_common(ingest, common);

  auto* q = app.add_subcommand("query", "Answer one question from a bank");
  q->add_option("--bank", bank_path, "Bank snapshot")->required()->check(CLI::ExistingFile);
  q->add_option("--question", question, "Question text")->required();
  q->add_option("--max-rounds", max_rounds, "Reflective round budget")->check(CLI::Range(1, 64));
  q->add_option("--depth", depth, "Maximum number of query keywords (pyramid depth)")->check(CLI::Range(1, 8));
  q->add_option("--trace", trace_path, "Write the query trace as JSON");
  add_common(q, common);

  auto* ev = app.add_subcommand("evaluate", "Run a dataset through ingestion and question answering");
  ev->add_option("--dataset", dataset_path, "Dataset file")->required()->check(CLI::ExistingFile);
  ev->add_option("--format", format, "locomo_json | simple_jsonl")->capture_default_str();
  ev->add_option("--out", out_dir, "Output directory for report.json and report.txt")->required();
  ev->add_option("--cache", cache_dir, "Directory for cached banks");
  ev->add_option("--parallel", parallel, "Questions evaluated concurrently")->check(CLI::Range(1, 256));
  ev->add_option("--max-rounds", max_rounds, "Reflective round budget")->check(CLI::Range(1, 64));
  ev->add_option("--depth", depth, "Pyramid depth")->check(CLI::Range(1, 8));
  add_common(ev, common);

  auto* insp = app.add_subcommand("inspect", "Show the keyword pyramid for a query");
  insp->add_option("--bank", bank_path, "Bank snapshot")->required()->check(CLI::ExistingFile);
  insp->add_option("--query", query, "Question text (keywords selected by the auxiliary model)");
  insp->add_option("--keywords", keywords, "Use these keywords instead of model selection")->delimiter(',');
  insp->add_option("--depth", depth, "Pyramid depth")->check(CLI::Range(1, 8));
  add_common(insp, common);

  auto* cost = app.add_subcommand("cost-report", "Summarize calls, tokens and time from an evaluation report");
  cost->add_option("--run", report_path, "report.json written by evaluate")->required()->check(CLI::ExistingFile);
  cost->add_flag("--json", as_json, "Emit JSON instead of a table");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) return run_ingest(common, input, bank_path);
    if (*q) return run_query(common, bank_path, question, max_rounds, depth, trace_path);
    if (*ev) return run_evaluate(common, dataset_path, format, out_dir, cache_dir, parallel, max_rounds, depth);
    if (*insp) return run_inspect(common, bank_path, query, keywords, depth);
    if (*cost) return run_cost_report(report_path, as_json);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
