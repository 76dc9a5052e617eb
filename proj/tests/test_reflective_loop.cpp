#include <fstream>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "mgretrieval/reflective_loop.hpp"
#include "support/walkthrough.hpp"
#include "support/random_bank.hpp"
#include "support/scripted.hpp"

namespace {

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

mgr::MemoryBank bank_with(const std::vector<std::pair<std::string, std::vector<std::string>>>& memories) {
  mgr::MemoryBank bank;
  for (const auto& [text, kws] : memories) {
    auto id = bank.add_record(text, "answer to " + text, std::nullopt, mgr::Timestamp{});
    if (!kws.empty()) bank.register_keywords(id, kws);
  }
  return bank;
}

std::string assessment(const std::string& answer, bool sufficient, const std::vector<int>& ids) {
  return nlohmann::json{{"answer", answer}, {"sufficient", sufficient}, {"critical_ids", ids}}.dump();
}

}  // namespace

TEST(FilterNew, SetDifferenceThenUnion) {
  mgr::MemoryIdSet seen;
  EXPECT_EQ(mgr::filter_new({1, 2, 3}, seen), (mgr::MemoryIdSet{1, 2, 3}));
  EXPECT_EQ(mgr::filter_new({2, 3, 4}, seen), (mgr::MemoryIdSet{4}));
  EXPECT_EQ(seen, (mgr::MemoryIdSet{1, 2, 3, 4}));
  EXPECT_TRUE(mgr::filter_new({1, 4}, seen).empty());
}

TEST(AssembleInput, FirstRoundUsesNoneMarkers) {
  auto bank = bank_with({{"a", {"k"}}, {"b", {"k"}}, {"c", {"k"}}});
  mgr::PromptSet prompts;
  auto req = mgr::assemble_input("Who?", std::nullopt, {}, mgr::expand(bank, {0, 1, 2}), prompts);
  EXPECT_EQ(req.role, mgr::RoleTag::answer);
  EXPECT_EQ(req.system_prompt, prompts.answer);
  EXPECT_EQ(req.user_prompt,
            "Question: Who?\n\nPrevious answer: none\n\nCritical memories:\nnone\n\nNewly retrieved memories:\n"
            "[0] a / answer to a / no session\n[1] b / answer to b / no session\n[2] c / answer to c / no session\n");
}

TEST(AssembleInput, LaterRoundCarriesCriticalAndFresh) {
  mgr::MemoryBank bank;
  bank.add_record("q0", "a0", "s1");
  bank.add_record("q1", "a1");
  mgr::PromptSet prompts;
  auto req = mgr::assemble_input("Who?", std::string("Bob"), mgr::expand(bank, {0}), mgr::expand(bank, {1}), prompts);
  EXPECT_NE(req.user_prompt.find("Previous answer: Bob\n"), std::string::npos);
  EXPECT_NE(req.user_prompt.find("Critical memories:\n[0] q0 / a0 / s1\n"), std::string::npos);
  EXPECT_NE(req.user_prompt.find("Newly retrieved memories:\n[1] q1 / a1 / no session\n"), std::string::npos);
}

TEST(AssembleInput, EmptySectionsStayWellFormed) {
  mgr::PromptSet prompts;
  auto req = mgr::assemble_input("Who?", std::nullopt, {}, {}, prompts);
  EXPECT_NE(req.user_prompt.find("Critical memories:\nnone\n\nNewly retrieved memories:\nnone\n"), std::string::npos);
}

class AnswerRoundTest : public ::testing::Test {
 protected:
  mgr::RoundAnswer run(std::vector<std::string> replies, mgr::MemoryIdSet shown = {12, 15}) {
    auto it = std::make_shared<std::size_t>(0);
    auto provider = std::make_shared<mgr::CallbackProvider>([replies, it](const mgr::ChatRequest&) {
      return replies.at(std::min((*it)++, replies.size() - 1));
    });
    gw = std::make_unique<mgr::LlmGateway>(provider);
    mgr::ChatRequest req{"system", "user", 0.0, mgr::RoleTag::answer};
    return mgr::answer_round(req, shown, *gw, std::string("prev"), {15}, &tally);
  }
  std::unique_ptr<mgr::LlmGateway> gw;
  mgr::CostTally tally;
};

TEST_F(AnswerRoundTest, ParsesAssessment) {
  auto r = run({assessment("three days ago", false, {12, 15})});
  EXPECT_EQ(r.answer, "three days ago");
  EXPECT_FALSE(r.sufficient);
  EXPECT_EQ(r.critical_ids, (mgr::MemoryIdSet{12, 15}));
  EXPECT_EQ(tally.calls, 1u);
}

TEST_F(AnswerRoundTest, DropsIdsThatWereNotShown) {
  auto r = run({assessment("x", true, {999})});
  EXPECT_TRUE(r.sufficient);
  EXPECT_TRUE(r.critical_ids.empty());
  EXPECT_EQ(r.warnings.size(), 1u);
}

TEST_F(AnswerRoundTest, ReasksOnceThenSucceeds) {
  auto r = run({"garbage", assessment("ok", true, {12})});
  EXPECT_TRUE(r.reasked);
  EXPECT_FALSE(r.degraded);
  EXPECT_EQ(r.answer, "ok");
  EXPECT_EQ(tally.calls, 2u);
}

TEST_F(AnswerRoundTest, DegradesAfterSecondFailure) {
  auto r = run({"garbage", "{\"answer\": 1}"});
  EXPECT_TRUE(r.degraded);
  EXPECT_EQ(r.answer, "prev");
  EXPECT_FALSE(r.sufficient);
  EXPECT_EQ(r.critical_ids, (mgr::MemoryIdSet{15}));
  EXPECT_EQ(tally.calls, 2u);
}

TEST(Rewrite, ProducesCalendarDate) {
  mgr::MemoryBank bank;
  bank.add_record("James, did you finish anything?", "I finished my book three days ago.", "session_3 (29 April 2022)");
  auto p = testing_support::scripted();
  p->on_contains(mgr::RoleTag::rewrite, {"Draft answer: three days ago", "29 April 2022"}, "\"26 April 2022\"");
  mgr::LlmGateway gw(p);
  mgr::PromptSet prompts;
  auto r = mgr::rewrite("three days ago", mgr::expand(bank, {0}), gw, prompts);
  EXPECT_EQ(r.text, "26 April 2022");
  EXPECT_FALSE(r.fell_back);
}

TEST(Rewrite, IdentityKeepsAnswer) {
  auto p = testing_support::scripted();
  p->on(mgr::RoleTag::rewrite, "7 May 2023");
  mgr::LlmGateway gw(p);
  EXPECT_EQ(mgr::rewrite("7 May 2023", {}, gw, mgr::PromptSet{}).text, "7 May 2023");
}

TEST(Rewrite, GatewayFailureFallsBack) {
  auto p = testing_support::scripted();
  p->fail(mgr::RoleTag::rewrite);
  mgr::LlmGateway gw(p);
  auto r = mgr::rewrite("three days ago", {}, gw, mgr::PromptSet{});
  EXPECT_EQ(r.text, "three days ago");
  EXPECT_TRUE(r.fell_back);
  EXPECT_EQ(r.warnings.size(), 1u);
}

TEST(Rewrite, CleansFencesAndQuotes) {
  EXPECT_EQ(mgr::clean_rewrite("```\n26 April 2022\n```"), "26 April 2022");
  EXPECT_EQ(mgr::clean_rewrite("  '26 April 2022' "), "26 April 2022");
  EXPECT_EQ(mgr::clean_rewrite("He said \"hi\""), "He said \"hi\"");
}

TEST(Walkthrough, ThreeRoundsThenRewrite) {
  testing_support::WalkthroughRun run;
  ASSERT_TRUE(run.ingestion.failures.empty());
  EXPECT_EQ(run.bank.size(), 12u);
  auto t = run.query();
  EXPECT_EQ(t.selected_keywords, (std::vector<std::string>{"james", "adventure", "book"}));
  ASSERT_EQ(t.rounds.size(), 3u);
  EXPECT_EQ(t.rounds[0].group, (std::vector<std::string>{"adventure", "book", "james"}));
  EXPECT_EQ(t.rounds[0].fresh_ids.size(), 3u);
  EXPECT_FALSE(t.rounds[0].sufficient);
  EXPECT_EQ(t.rounds[0].critical_ids.size(), 2u);
  EXPECT_EQ(t.rounds[1].group, (std::vector<std::string>{"adventure", "james"}));
  EXPECT_EQ(t.rounds[1].fresh_ids.size(), 6u);
  EXPECT_FALSE(t.rounds[1].sufficient);
  EXPECT_TRUE(t.rounds[2].sufficient);
  EXPECT_EQ(t.stop_reason, mgr::StopReason::accepted);
  EXPECT_EQ(t.final_answer, "three days ago");
  EXPECT_EQ(t.rewritten_answer, "26 April 2022");
  EXPECT_EQ(t.main.calls, 4u);
  EXPECT_EQ(t.aux.calls, 1u);
}

TEST(Walkthrough, MatchesGoldenTraceByteForByte) {
  testing_support::WalkthroughRun a, b;
  auto first = mgr::trace_to_json(a.query()).dump(2) + "\n";
  auto second = mgr::trace_to_json(b.query()).dump(2) + "\n";
  EXPECT_EQ(first, second);
  auto golden = testing_support::kWalkthroughDir + "/expected_trace.json";
  if (std::getenv("MGR_UPDATE_GOLDEN")) std::ofstream(golden, std::ios::binary) << first;
  EXPECT_EQ(first, read_text(golden));
}

TEST(Walkthrough, QueriesDoNotMutateTheBank) {
  testing_support::WalkthroughRun run;
  auto before = run.bank.to_json().dump();
  run.query();
  EXPECT_EQ(run.bank.to_json().dump(), before);
}

TEST(RunQuery, ExhaustsSmallPyramid) {
  // Q = {a, b}: groups {a,b}, {a}, {b}, every one bringing something new
  auto bank = bank_with({{"m0", {"a", "b"}}, {"m1", {"a"}}, {"m2", {"b"}}});
  auto p = testing_support::scripted();
  p->on(mgr::RoleTag::select, R"({"keywords": ["a", "b"]})");
  p->on(mgr::RoleTag::answer, assessment("not sure", false, {}));
  p->on(mgr::RoleTag::rewrite, "not sure");
  mgr::LlmGateway main(p), aux(p);
  mgr::PromptSet prompts;
  mgr::Retriever r{bank, main, aux, prompts, {4, 4}};
  auto t = r.run_query("q");
  EXPECT_EQ(t.rounds.size(), 3u);
  EXPECT_EQ(t.stop_reason, mgr::StopReason::pyramid_exhausted);
}

TEST(RunQuery, RedundantGroupsAreSkippedWithoutRounds) {
  // every memory carries both keywords, so {a} and {b} add nothing after {a,b}
  auto bank = bank_with({{"m0", {"a", "b"}}, {"m1", {"a", "b"}}});
  auto p = testing_support::scripted();
  p->on(mgr::RoleTag::select, R"({"keywords": ["a", "b"]})");
  p->on(mgr::RoleTag::answer, assessment("x", false, {0}));
  p->on(mgr::RoleTag::rewrite, "x");
  mgr::LlmGateway main(p), aux(p);
  mgr::PromptSet prompts;
  mgr::Retriever r{bank, main, aux, prompts, {4, 4}};
  auto t = r.run_query("q");
  EXPECT_EQ(t.rounds.size(), 1u);
  EXPECT_EQ(t.skipped_groups.size(), 2u);
  EXPECT_EQ(t.stop_reason, mgr::StopReason::pyramid_exhausted);
  EXPECT_EQ(main.counters().calls, 2u);
}

TEST(RunQuery, StopsAtRoundBudget) {
  auto bank = bank_with({{"m0", {"a", "b"}}, {"m1", {"a"}}, {"m2", {"b"}}});
  auto p = testing_support::scripted();
  p->on(mgr::RoleTag::select, R"({"keywords": ["a", "b"]})");
  p->on(mgr::RoleTag::answer, assessment("x", false, {}));
  p->on(mgr::RoleTag::rewrite, "x");
  mgr::LlmGateway main(p), aux(p);
  mgr::PromptSet prompts;
  mgr::Retriever r{bank, main, aux, prompts, {4, 2}};
  auto t = r.run_query("q");
  EXPECT_EQ(t.rounds.size(), 2u);
  EXPECT_EQ(t.stop_reason, mgr::StopReason::max_rounds);
  EXPECT_EQ(t.final_answer, "x");
}

TEST(RunQuery, NoKeywordsFallsBackToPopularKeywords) {
  auto bank = bank_with({{"m0", {"a"}}, {"m1", {"a"}}, {"m2", {"b"}}, {"m3", {"c"}}});
  auto p = testing_support::scripted();
  p->on(mgr::RoleTag::select, R"({"keywords": ["unicorn"]})");
  p->on(mgr::RoleTag::answer, assessment("fallback answer", false, {0}));
  p->on(mgr::RoleTag::rewrite, "fallback answer");
  mgr::LlmGateway main(p), aux(p);
  mgr::PromptSet prompts;
  mgr::Retriever r{bank, main, aux, prompts, {2, 4}};
  auto t = r.run_query("q");
  EXPECT_EQ(t.stop_reason, mgr::StopReason::no_keywords);
  ASSERT_EQ(t.rounds.size(), 1u);
  // top-2 populous keywords: a (2 memories), then b (first in insertion order among ties)
  EXPECT_EQ(t.rounds[0].fresh_ids, (mgr::MemoryIdSet{0, 1, 2}));
  EXPECT_EQ(t.rewritten_answer, "fallback answer");
}

TEST(RunQuery, Preconditions) {
  mgr::MemoryBank empty;
  auto p = testing_support::scripted();
  mgr::LlmGateway gw(p);
  mgr::PromptSet prompts;
  EXPECT_THROW((mgr::Retriever{empty, gw, gw, prompts}.run_query("q")), mgr::ValidationError);
  auto bank = bank_with({{"m0", {"a"}}});
  EXPECT_THROW((mgr::Retriever{bank, gw, gw, prompts}.run_query(" ")), mgr::ValidationError);
  EXPECT_THROW((mgr::Retriever{bank, gw, gw, prompts, {0, 4}}.run_query("q")), mgr::ValidationError);
  EXPECT_THROW((mgr::Retriever{bank, gw, gw, prompts, {4, 0}}.run_query("q")), mgr::ValidationError);
}

TEST(RunQuery, PartialCostSurvivesGatewayFailure) {
  auto bank = bank_with({{"m0", {"a"}}});
  auto p = testing_support::scripted();
  p->on(mgr::RoleTag::select, R"({"keywords": ["a"]})");
  p->fail(mgr::RoleTag::answer);
  mgr::LlmGateway main(p), aux(p);
  mgr::PromptSet prompts;
  mgr::QueryTrace trace;
  EXPECT_THROW((mgr::Retriever{bank, main, aux, prompts}.run_query("q", trace)), mgr::GatewayError);
  EXPECT_EQ(trace.main.calls, 1u);
  EXPECT_EQ(trace.aux.calls, 1u);
}

TEST(RunQuery, RandomizedLawsHold) {
  std::mt19937 rng(4242);
  mgr::PromptSet prompts;
  for (int trial = 0; trial < 200; ++trial) {
    auto bank = testing_support::random_bank(rng, 40, 8);
    const auto& vocab = bank.vocabulary().entries();
    std::vector<std::string> q;
    for (const auto& k : vocab) {
      if (rng() % 2) q.push_back(k);
    }
    auto seed = rng();
    // answers are a pure function of the prompt: sufficiency and critical ids
    // are derived from a hash so the run is reproducible
    auto provider = std::make_shared<mgr::CallbackProvider>([q, seed](const mgr::ChatRequest& r) -> std::string {
      if (r.role == mgr::RoleTag::select) return nlohmann::json{{"keywords", q}}.dump();
      if (r.role == mgr::RoleTag::rewrite) return "rewritten";
      auto h = mgr::fnv1a64(r.user_prompt, seed);
      std::vector<int> ids;
      for (std::size_t pos = r.user_prompt.find("\n["); pos != std::string::npos; pos = r.user_prompt.find("\n[", pos + 1)) {
        if ((h >> (ids.size() % 60)) & 1) ids.push_back(std::stoi(r.user_prompt.substr(pos + 2)));
      }
      ids.push_back(999);
      return assessment("answer " + std::to_string(h % 1000), h % 5 == 0, ids);
    });
    mgr::LlmGateway main(provider), aux(provider);
    mgr::RetrievalConfig cfg{1 + rng() % 6, 1 + rng() % 5};
    auto before = bank.to_json().dump();
    auto t = mgr::Retriever{bank, main, aux, prompts, cfg}.run_query("question");

    ASSERT_LE(t.rounds.size(), cfg.max_rounds);
    std::set<mgr::MemoryId> shown_fresh;
    std::set<mgr::MemoryId> ever_shown;
    for (const auto& r : t.rounds) {
      for (auto id : r.fresh_ids) ASSERT_TRUE(shown_fresh.insert(id).second) << "id " << id << " repeated";
      ever_shown.insert(r.shown_ids.begin(), r.shown_ids.end());
      for (auto id : r.critical_ids) ASSERT_TRUE(std::binary_search(r.shown_ids.begin(), r.shown_ids.end(), id));
      ASSERT_EQ(r.cost.calls, 1u);
    }
    if (t.stop_reason != mgr::StopReason::no_keywords) {
      ASSERT_FALSE(t.rounds.empty());
    }
    ASSERT_EQ(main.counters().calls, t.main.calls);
    ASSERT_EQ(main.counters().tokens(), t.main.tokens());
    ASSERT_EQ(aux.counters().calls, t.aux.calls);
    ASSERT_EQ(t.aux.calls, 1u);
    ASSERT_EQ(t.main.calls, t.rounds.size() + 1);
    ASSERT_EQ(bank.to_json().dump(), before);
  }
}

TEST(TraceJson, CostRoundTrips) {
  mgr::CostTally c{3, {10, 2}, {4, 1}, std::chrono::milliseconds(1500)};
  auto back = mgr::cost_from_json(mgr::cost_to_json(c, true));
  EXPECT_EQ(back.calls, 3u);
  EXPECT_EQ(back.tokens_in, c.tokens_in);
  EXPECT_EQ(back.tokens_out, c.tokens_out);
  EXPECT_EQ(back.latency, c.latency);
  EXPECT_FALSE(mgr::cost_to_json(c, false).contains("latency_s"));
}
