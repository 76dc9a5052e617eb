#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "mgretrieval/ingestion.hpp"
#include "support/scripted.hpp"

namespace {

/// Extraction replies with the whitespace-separated words after "Question: ";
/// a question containing "BROKEN" gets an unparsable reply.
std::shared_ptr<mgr::CallbackProvider> echo_extractor() {
  return std::make_shared<mgr::CallbackProvider>([](const mgr::ChatRequest& r) -> std::string {
    if (r.role == mgr::RoleTag::match) return R"({"matches": {}})";
    auto line = r.user_prompt.substr(10, r.user_prompt.find('\n') - 10);
    if (line.find("BROKEN") != std::string::npos) return "no keywords for you";
    std::istringstream in(line);
    nlohmann::json kws = nlohmann::json::array();
    for (std::string w; in >> w;) kws.push_back(w);
    return nlohmann::json{{"keywords", kws}}.dump();
  });
}

mgr::MemoryInput memory(std::string q, std::string a = "answer") { return {std::move(q), std::move(a), {}, {}}; }

}  // namespace

class IngestionTest : public ::testing::Test {
 protected:
  mgr::PromptSet prompts;
};

TEST_F(IngestionTest, ExtractReturnsNormalizedKeywords) {
  auto p = testing_support::scripted();
  p->on(mgr::RoleTag::extract, R"({"keywords":["james","adventure","book"]})");
  mgr::LlmGateway gw(p);
  auto x = mgr::extract_keywords(memory("What did James read?"), gw, prompts);
  EXPECT_EQ(x.keywords, (std::vector<std::string>{"james", "adventure", "book"}));
  EXPECT_TRUE(x.warnings.empty());
}

TEST_F(IngestionTest, ExtractDeduplicatesAfterNormalization) {
  auto p = testing_support::scripted();
  p->on(mgr::RoleTag::extract, R"({"keywords":["Paris ", "paris", "  New   York"]})");
  mgr::LlmGateway gw(p);
  auto x = mgr::extract_keywords(memory("q"), gw, prompts);
  EXPECT_EQ(x.keywords, (std::vector<std::string>{"paris", "new york"}));
}

TEST_F(IngestionTest, ExtractEmptyListWarns) {
  auto p = testing_support::scripted();
  p->on(mgr::RoleTag::extract, R"({"keywords":[]})");
  mgr::LlmGateway gw(p);
  auto x = mgr::extract_keywords(memory("q"), gw, prompts);
  EXPECT_TRUE(x.keywords.empty());
  EXPECT_EQ(x.warnings.size(), 1u);
}

TEST_F(IngestionTest, ExtractCapsKeywordCount) {
  auto p = testing_support::scripted();
  p->on(mgr::RoleTag::extract, R"({"keywords":["a","b","c","d"]})");
  mgr::LlmGateway gw(p);
  mgr::IngestOptions opt;
  opt.max_keywords_per_memory = 2;
  auto x = mgr::extract_keywords(memory("q"), gw, prompts, opt);
  EXPECT_EQ(x.keywords, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(x.warnings.size(), 1u);
}

TEST_F(IngestionTest, ExtractPromptCarriesTheCap) {
  auto p = std::make_shared<mgr::CallbackProvider>([](const mgr::ChatRequest& r) {
    EXPECT_NE(r.system_prompt.find("at most 8"), std::string::npos) << r.system_prompt;
    EXPECT_EQ(r.system_prompt.find("{max_keywords}"), std::string::npos);
    EXPECT_EQ(r.user_prompt, "Question: q\nAnswer: a\nSession: s1");
    return std::string(R"({"keywords":["x"]})");
  });
  mgr::LlmGateway gw(p);
  mgr::extract_keywords({"q", "a", "s1", {}}, gw, prompts);
}

TEST_F(IngestionTest, ExactMatchNeedsNoCall) {
  auto p = testing_support::scripted();
  mgr::LlmGateway gw(p);
  mgr::KeywordVocabulary v;
  v.insert("paris");
  auto out = mgr::match_vocabulary({"paris"}, v, gw, prompts);
  EXPECT_EQ(out.matched, std::vector<std::string>{"paris"});
  EXPECT_TRUE(out.novel.empty());
  EXPECT_FALSE(out.used_llm);
  EXPECT_EQ(gw.counters().calls, 0u);
}

TEST_F(IngestionTest, ModelMapsToExistingEntry) {
  auto p = testing_support::scripted();
  p->on(mgr::RoleTag::match, R"({"matches": {"france trip": ["travel"]}})");
  mgr::LlmGateway gw(p);
  mgr::KeywordVocabulary v;
  v.insert("travel");
  auto out = mgr::match_vocabulary({"france trip"}, v, gw, prompts);
  EXPECT_EQ(out.matched, std::vector<std::string>{"travel"});
  EXPECT_TRUE(out.novel.empty());
  EXPECT_EQ(out.final_keywords, std::vector<std::string>{"travel"});
  EXPECT_EQ(gw.counters().calls, 1u);
}

TEST_F(IngestionTest, EmptyVocabularyMakesEverythingNovel) {
  auto p = testing_support::scripted();
  mgr::LlmGateway gw(p);
  auto out = mgr::match_vocabulary({"skiing"}, {}, gw, prompts);
  EXPECT_EQ(out.novel, std::vector<std::string>{"skiing"});
  EXPECT_EQ(out.final_keywords, std::vector<std::string>{"skiing"});
  EXPECT_EQ(gw.counters().calls, 0u);
}

TEST_F(IngestionTest, EmptyRawNeedsNoCall) {
  auto p = testing_support::scripted();
  mgr::LlmGateway gw(p);
  mgr::KeywordVocabulary v;
  v.insert("x");
  auto out = mgr::match_vocabulary({}, v, gw, prompts);
  EXPECT_TRUE(out.final_keywords.empty());
  EXPECT_EQ(gw.counters().calls, 0u);
}

TEST_F(IngestionTest, InventedMatchTargetBecomesNovel) {
  auto p = testing_support::scripted();
  p->on(mgr::RoleTag::match, R"({"matches": {"hiking": ["outdoors"], "dog": null}})");
  mgr::LlmGateway gw(p);
  mgr::KeywordVocabulary v;
  v.insert("travel");
  auto out = mgr::match_vocabulary({"hiking", "dog", "travel"}, v, gw, prompts);
  EXPECT_EQ(out.matched, std::vector<std::string>{"travel"});
  EXPECT_EQ(out.novel, (std::vector<std::string>{"hiking", "dog"}));
  EXPECT_EQ(out.final_keywords, (std::vector<std::string>{"travel", "hiking", "dog"}));
  ASSERT_EQ(out.warnings.size(), 1u);
  EXPECT_NE(out.warnings[0].find("outdoors"), std::string::npos);
}

TEST_F(IngestionTest, OneKeywordMayMatchSeveralEntries) {
  auto p = testing_support::scripted();
  p->on(mgr::RoleTag::match, R"({"matches": {"paris trip": ["paris", "travel"]}})");
  mgr::LlmGateway gw(p);
  mgr::KeywordVocabulary v;
  v.insert("paris");
  v.insert("travel");
  auto out = mgr::match_vocabulary({"paris trip"}, v, gw, prompts);
  EXPECT_EQ(out.matched, (std::vector<std::string>{"paris", "travel"}));
}

TEST_F(IngestionTest, CandidateListIsTruncatedByEditDistance) {
  mgr::KeywordVocabulary v;
  for (const auto* k : {"zzzz", "paris", "parish", "london", "pairs"}) v.insert(k);
  auto c = mgr::match_candidates({"paris"}, v, 2);
  EXPECT_EQ(c, (std::vector<std::string>{"paris", "parish"}));
  EXPECT_EQ(mgr::match_candidates({"paris"}, v, 10).size(), 5u);
}

TEST_F(IngestionTest, DisjointRecordsGetSingletonPostings) {
  mgr::MemoryBank bank;
  mgr::LlmGateway gw(echo_extractor());
  auto rep = mgr::ingest({memory("paris travel"), memory("dog max")}, bank, gw, prompts);
  EXPECT_EQ(rep.records_added, 2u);
  EXPECT_EQ(rep.records_indexed, 2u);
  EXPECT_EQ(bank.vocabulary().size(), 4u);
  EXPECT_EQ(rep.new_vocabulary_entries, 4u);
  for (const auto& [k, ids] : bank.mapping()) EXPECT_EQ(ids.size(), 1u) << k;
  // the second record has no exact match against {paris, travel}, so one match call
  EXPECT_EQ(gw.counters().calls, 3u);
  EXPECT_EQ(rep.aux.calls, 3u);
}

TEST_F(IngestionTest, SharedKeywordGetsTwoPostings) {
  mgr::MemoryBank bank;
  mgr::LlmGateway gw(echo_extractor());
  mgr::ingest({memory("paris"), memory("paris")}, bank, gw, prompts);
  EXPECT_EQ(bank.associated_memories("paris"), (mgr::MemoryIdSet{0, 1}));
  EXPECT_EQ(gw.counters().calls, 2u);
}

TEST_F(IngestionTest, FailuresAreIsolated) {
  mgr::MemoryBank bank;
  mgr::LlmGateway gw(echo_extractor());
  auto rep = mgr::ingest({memory("paris"), memory("BROKEN"), memory("london")}, bank, gw, prompts);
  EXPECT_EQ(rep.records_indexed, 2u);
  ASSERT_EQ(rep.failures.size(), 1u);
  EXPECT_EQ(rep.failures[0].index, 1u);
  EXPECT_EQ(bank.size(), 2u);
  EXPECT_EQ(rep.aux.calls, gw.counters().calls);
}

TEST_F(IngestionTest, BlankInputFailsWithoutCalls) {
  mgr::MemoryBank bank;
  mgr::LlmGateway gw(echo_extractor());
  auto rep = mgr::ingest({memory("  ", "a"), memory("q", "")}, bank, gw, prompts);
  EXPECT_EQ(rep.failures.size(), 2u);
  EXPECT_EQ(gw.counters().calls, 0u);
  EXPECT_TRUE(bank.empty());
}

TEST_F(IngestionTest, ZeroKeywordMemoryIsStoredUnindexed) {
  auto p = testing_support::scripted();
  p->on(mgr::RoleTag::extract, R"({"keywords":[]})");
  mgr::LlmGateway gw(p);
  mgr::MemoryBank bank;
  auto rep = mgr::ingest({memory("hi")}, bank, gw, prompts);
  EXPECT_EQ(rep.records_added, 1u);
  EXPECT_EQ(rep.records_indexed, 0u);
  EXPECT_EQ(bank.size(), 1u);
  EXPECT_TRUE(bank.mapping().empty());
  EXPECT_EQ(rep.warnings.size(), 1u);
}

TEST_F(IngestionTest, RandomBatchesConserveAndStayWithinCallBudget) {
  std::mt19937 rng(8);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<mgr::MemoryInput> inputs;
    for (int i = 0, n = 1 + rng() % 20; i < n; ++i) {
      std::string q;
      for (int k = 0, m = rng() % 4; k < m; ++k) q += "kw" + std::to_string(rng() % 15) + " ";
      if (rng() % 10 == 0) q += "BROKEN";
      if (q.empty()) q = "kw0";
      inputs.push_back(memory(q));
    }
    mgr::MemoryBank bank;
    mgr::LlmGateway gw(echo_extractor());
    mgr::IngestOptions opt;
    opt.extraction_parallelism = 1 + rng() % 4;
    auto rep = mgr::ingest(inputs, bank, gw, prompts, opt);

    std::size_t total_final = 0;
    for (const auto& r : rep.records) {
      total_final += r.outcome.final_keywords.size();
      for (const auto& k : r.outcome.novel) ASSERT_GE(*bank.vocabulary().order_of(k), r.vocabulary_size_before);
      for (const auto& k : r.outcome.matched) ASSERT_LT(*bank.vocabulary().order_of(k), r.vocabulary_size_before);
    }
    std::size_t postings = 0;
    for (const auto& [_, ids] : bank.mapping()) postings += ids.size();
    ASSERT_EQ(postings, total_final);
    ASSERT_EQ(rep.postings_updated, postings);
    ASSERT_LE(gw.counters().calls, 2 * inputs.size());
    ASSERT_EQ(rep.aux.calls, gw.counters().calls);
    ASSERT_EQ(rep.aux.tokens(), gw.counters().tokens());
    ASSERT_EQ(rep.records.size() + rep.failures.size(), inputs.size());
    ASSERT_FALSE(bank.check_integrity());
  }
}

TEST_F(IngestionTest, DisjointScriptsAreOrderInsensitive) {
  auto run = [&](std::vector<mgr::MemoryInput> in) {
    mgr::MemoryBank bank;
    mgr::LlmGateway gw(echo_extractor());
    mgr::ingest(in, bank, gw, prompts);
    std::map<std::string, std::vector<std::string>> by_keyword;
    for (const auto& [k, ids] : bank.mapping()) {
      for (auto id : ids) by_keyword[k].push_back(bank.record(id).question);
    }
    return by_keyword;
  };
  EXPECT_EQ(run({memory("paris travel"), memory("dog max")}), run({memory("dog max"), memory("paris travel")}));
}
