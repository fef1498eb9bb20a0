#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "routeforge/agents.hpp"
#include "routeforge/prompts.hpp"
#include "support/scripted_transport.hpp"

using namespace routeforge;

namespace {

QAInstance make_instance(const std::string& id, const std::string& gold,
                         const std::string& category = "what") {
  QAInstance inst;
  inst.id = id;
  inst.question = "What is it?";
  inst.context = "Some Context here.";
  inst.gold_answers = {gold};
  inst.category = category;
  return inst;
}

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("parse_answer resolution order") {
  CHECK(parse_answer(R"({"answer": "yes"})") == "yes");
  CHECK(parse_answer("thinking...\n{\"answer\": \"no\"}\ntrailing") == "no");
  CHECK(parse_answer(R"({"answer":"a"} then {"answer":"b"})") == "b");
  CHECK(parse_answer(R"(reasoning... \boxed{Henry J. Kaiser})") == "Henry J. Kaiser");
  CHECK(parse_answer("no parsable structure\nfinal guess: Ann") == "final guess: Ann");
  CHECK(parse_answer("") == "");
  CHECK(parse_answer("{\"other\": 1}\nplain tail") == "plain tail");
  CHECK(parse_answer(R"({"answer": 42})") == "42");

  // truncation to 12 words
  std::string longish = "w1 w2 w3 w4 w5 w6 w7 w8 w9 w10 w11 w12 w13 w14";
  CHECK(parse_answer(longish) == "w1 w2 w3 w4 w5 w6 w7 w8 w9 w10 w11 w12");

  // deterministic and total on junk
  CHECK(parse_answer("{{{{") == parse_answer("{{{{"));
  CHECK(parse_answer("\\boxed{unclosed") == "\\boxed{unclosed");
}

TEST_CASE("prompt versions hash deterministically") {
  auto a = make_prompt_version("text one", 0);
  auto b = make_prompt_version("text one", 0);
  auto c = make_prompt_version("text two", 1);
  CHECK(a.hash == b.hash);
  CHECK(a.hash != c.hash);
  CHECK(c.version == 1);
}

TEST_CASE("prompt sections parse for shipped roles") {
  auto mad = parse_prompt_sections(default_role_prompt("mad"));
  CHECK(mad.count("debater_a"));
  CHECK(mad.count("debater_b"));
  CHECK(mad.count("judge"));
  auto raw = parse_prompt_sections(default_role_prompt("raw"));
  REQUIRE(raw.count("main"));
  CHECK(raw.size() == 1);
  auto rr = parse_prompt_sections(default_role_prompt("react_reflect"));
  CHECK(rr.count("react"));
  CHECK(rr.count("reflect"));
  auto sum = parse_prompt_sections(default_role_prompt("summary"));
  CHECK(sum.count("think"));
  CHECK(sum.count("summarize"));
}

TEST_CASE("write_default_prompts round-trips through load_role_prompt") {
  auto dir = fresh_dir("rf_prompts");
  write_default_prompts(dir.string());
  for (const auto& role : default_role_names()) {
    CHECK(load_role_prompt(dir.string(), role) == default_role_prompt(role));
  }
  CHECK(std::filesystem::exists(dir / "manifest.json"));
  CHECK(std::filesystem::exists(dir / "system_wrapper.txt"));
}

TEST_CASE("cache hits short-circuit and invalidate on prompt change") {
  auto pool = make_pool({"alpha"}, {"raw"});
  AgentSpec& agent = pool[0];
  auto inst = make_instance("q1", "gold");
  SyntheticBackend backend(7);
  SyntheticProfile perfect;
  perfect.default_competence = 1.0;
  backend.set_profile(agent.id(), perfect);

  Cache cache;
  auto first = invoke(agent, inst, cache, backend);
  CHECK_FALSE(first.cached);
  CHECK(first.answer == "gold");
  CHECK(backend.logical_calls() == 1);

  auto second = invoke(agent, inst, cache, backend);
  CHECK(second.cached);
  CHECK(backend.logical_calls() == 1);  // zero new backend work

  agent.prompt = make_prompt_version(agent.prompt.text + "\nextra line", 1);
  auto third = invoke(agent, inst, cache, backend);
  CHECK_FALSE(third.cached);
  CHECK(backend.logical_calls() == 2);
}

TEST_CASE("cache persists to disk and reloads") {
  auto dir = fresh_dir("rf_cache");
  CacheKey key{"alpha::raw", "q1", "hash1"};
  CacheEntry entry{"raw text", "parsed", 0.5, false, 1234};
  {
    Cache cache(dir);
    cache.put(key, entry);
    CHECK(cache.size() == 1);
  }
  Cache reloaded(dir);
  auto hit = reloaded.lookup(key);
  REQUIRE(hit.has_value());
  CHECK(hit->raw_output == "raw text");
  CHECK(hit->parsed_answer == "parsed");
  CHECK(hit->f1 == 0.5);
  CHECK_FALSE(reloaded.lookup({"alpha::raw", "q1", "other"}).has_value());
}

TEST_CASE("synthetic agents are deterministic and respect competence") {
  auto pool = make_pool({"alpha"}, {"raw"});
  SyntheticBackend backend(42);

  SUBCASE("competence 1.0 always emits gold") {
    SyntheticProfile p;
    p.default_competence = 1.0;
    backend.set_profile("alpha::raw", p);
    for (int i = 0; i < 20; ++i) {
      auto inst = make_instance("q" + std::to_string(i), "gold" + std::to_string(i));
      Cache cache;
      CHECK(invoke(pool[0], inst, cache, backend).answer == "gold" + std::to_string(i));
    }
  }

  SUBCASE("competence 0.0 emits token-disjoint distractors") {
    SyntheticProfile p;
    p.default_competence = 0.0;
    backend.set_profile("alpha::raw", p);
    auto inst = make_instance("q1", "gold");
    Cache cache;
    auto r = invoke(pool[0], inst, cache, backend);
    CHECK(best_score(r.answer, inst.gold_answers).f1 == 0.0);
  }

  SUBCASE("identical across runs") {
    SyntheticProfile p;
    p.default_competence = 0.5;
    backend.set_profile("alpha::raw", p);
    SyntheticBackend backend2(42);
    backend2.set_profile("alpha::raw", p);
    for (int i = 0; i < 10; ++i) {
      auto inst = make_instance("q" + std::to_string(i), "gold");
      Cache c1, c2;
      CHECK(invoke(pool[0], inst, c1, backend).answer ==
            invoke(pool[0], inst, c2, backend2).answer);
    }
  }

  SUBCASE("competence 0.5 concentrates near 0.5 over 1000 draws") {
    SyntheticProfile p;
    p.default_competence = 0.5;
    backend.set_profile("alpha::raw", p);
    int correct = 0;
    const int n = 1000;
    Cache cache;
    for (int i = 0; i < n; ++i) {
      auto inst = make_instance("b" + std::to_string(i), "gold");
      if (invoke(pool[0], inst, cache, backend).answer == "gold") ++correct;
    }
    const double rate = static_cast<double>(correct) / n;
    CHECK(rate > 0.45);
    CHECK(rate < 0.55);
  }

  SUBCASE("degrade marker switches the profile") {
    SyntheticProfile p;
    p.default_competence = 1.0;
    backend.set_profile("alpha::raw", p);
    backend.set_degraded_competence(0.0);
    auto agent = pool[0];
    agent.prompt = make_prompt_version(agent.prompt.text + "\n" + backend.degrade_marker(), 1);
    auto inst = make_instance("q9", "gold");
    Cache cache;
    CHECK(invoke(agent, inst, cache, backend).answer != "gold");
  }
}

TEST_CASE("evaluate_pool covers all cells and uses the cache") {
  auto pool = make_pool({"alpha", "bravo"}, {"raw", "cot"});
  SyntheticBackend backend(3);
  for (const auto& spec : pool) {
    SyntheticProfile p;
    p.default_competence = spec.backbone == "alpha" ? 1.0 : 0.0;
    backend.set_profile(spec.id(), p);
  }
  std::vector<QAInstance> instances;
  for (int i = 0; i < 10; ++i) instances.push_back(make_instance("q" + std::to_string(i), "gold"));

  Cache cache;
  auto result = evaluate_pool(pool, instances, cache, backend);
  CHECK(result.agent_ids.size() == 4);
  CHECK(result.scores.size() == 4);
  for (const auto& [agent, row] : result.scores) CHECK(row.size() == 10);
  CHECK(result.mean_f1("alpha::raw") == doctest::Approx(1.0));
  CHECK(result.mean_f1("bravo::raw") == doctest::Approx(0.0));
  CHECK(backend.logical_calls() == 40);

  SUBCASE("warm re-run does zero backend work") {
    auto again = evaluate_pool(pool, instances, cache, backend);
    CHECK(backend.logical_calls() == 40);
    CHECK(again.scores == result.scores);
  }

  SUBCASE("one modified prompt re-queries exactly that agent") {
    auto modified = pool;
    modified[0].prompt = make_prompt_version(modified[0].prompt.text + "\nx", 1);
    evaluate_pool(modified, instances, cache, backend);
    CHECK(backend.logical_calls() == 50);  // 40 + |instances|
  }

  SUBCASE("concurrent fan-out yields the same matrix") {
    Cache cold;
    SyntheticBackend b2(3);
    for (const auto& spec : pool) {
      SyntheticProfile p;
      p.default_competence = spec.backbone == "alpha" ? 1.0 : 0.0;
      b2.set_profile(spec.id(), p);
    }
    PoolEvalOptions opts;
    opts.concurrency = 4;
    auto parallel = evaluate_pool(pool, instances, cold, b2, opts);
    CHECK(parallel.scores == result.scores);
    CHECK(parallel.answers == result.answers);
  }
}

TEST_CASE("invoke retries transport failures then surfaces identity") {
  using testing::ScriptedChatTransport;
  auto pool = make_pool({"alpha"}, {"raw"});
  auto inst = make_instance("q1", "gold");

  ScriptedChatTransport transport(
      [](const std::string&, const std::vector<ChatMessage>&) -> std::string {
        return R"({"answer": "gold"})";
      });
  ChatAnswerBackend backend(transport, {{"alpha", "model-a"}}, system_wrapper_text());
  RetryPolicy retry;
  retry.attempts = 3;
  retry.base_backoff_ms = 1;

  SUBCASE("two failures then success") {
    transport.fail_next(2);
    Cache cache;
    auto r = invoke(pool[0], inst, cache, backend, retry);
    CHECK(r.answer == "gold");
    CHECK(transport.calls() == 3);
  }

  SUBCASE("persistent failure names agent and instance") {
    transport.fail_next(10);
    Cache cache;
    CHECK_THROWS_WITH_AS(invoke(pool[0], inst, cache, backend, retry),
                         doctest::Contains("alpha::raw"), Error);
  }
}

TEST_CASE("multi-turn roles follow their scripts with sub-call caching") {
  using testing::ScriptedChatTransport;
  auto inst = make_instance("q1", "gold");

  SUBCASE("debate: A then B then judge") {
    ScriptedChatTransport transport(
        [](const std::string&, const std::vector<ChatMessage>& msgs) -> std::string {
          const std::string& sys = msgs[0].content;
          if (contains(sys, "Debater A")) return "claim: foo";
          if (contains(sys, "Debater B")) return "rebuttal: bar";
          return R"({"answer": "judged"})";
        });
    ChatAnswerBackend backend(transport, {}, system_wrapper_text());
    auto pool = make_pool({"alpha"}, {"mad"});
    Cache cache;
    auto r = invoke(pool[0], inst, cache, backend);
    CHECK(r.answer == "judged");
    CHECK(transport.calls() == 3);
    // B sees A's output; judge sees both
    CHECK(contains(transport.log()[1][1].content, "claim: foo"));
    CHECK(contains(transport.log()[2][1].content, "rebuttal: bar"));
    // sub-calls cached: a re-run costs nothing new except the top-level hit
    invoke(pool[0], inst, cache, backend);
    CHECK(transport.calls() == 3);
  }

  SUBCASE("react-reflect revises at most once") {
    int reacts = 0;
    ScriptedChatTransport transport(
        [&](const std::string&, const std::vector<ChatMessage>& msgs) -> std::string {
          const std::string& sys = msgs[0].content;
          if (contains(sys, "judge overseeing")) return "Status: revise\nFeedback: be precise";
          ++reacts;
          return reacts == 1 ? R"({"answer": "draft"})" : R"({"answer": "revised"})";
        });
    ChatAnswerBackend backend(transport, {}, system_wrapper_text());
    auto pool = make_pool({"alpha"}, {"react_reflect"});
    Cache cache;
    auto r = invoke(pool[0], inst, cache, backend);
    CHECK(r.answer == "revised");
    CHECK(transport.calls() == 3);  // react, reflect, react again
  }

  SUBCASE("summary runs two thinkers and a summarizer") {
    ScriptedChatTransport transport(
        [](const std::string&, const std::vector<ChatMessage>& msgs) -> std::string {
          if (contains(msgs[0].content, "supporting signals")) return R"({"answer": "merged"})";
          return "partial analysis";
        });
    ChatAnswerBackend backend(transport, {}, system_wrapper_text());
    auto pool = make_pool({"alpha"}, {"summary"});
    Cache cache;
    auto r = invoke(pool[0], inst, cache, backend);
    CHECK(r.answer == "merged");
    CHECK(transport.calls() == 3);
  }
}

TEST_CASE("seeded view provider is deterministic; chat views parse indices") {
  auto pool = make_pool({"alpha", "bravo"}, {"raw"});
  std::vector<EntityMention> ents = {{"Alpha One", 0, 9}, {"Beta Two", 12, 20}, {"Gamma", 25, 30}};
  auto inst = make_instance("q1", "gold");

  SeededViewProvider sv(11, 0.5);
  auto v1 = sv.views(pool, inst, ents);
  auto v2 = sv.views(pool, inst, ents);
  CHECK(v1 == v2);
  for (const auto& [agent, view] : v1) {
    for (auto idx : view) CHECK(idx < ents.size());
  }

  using testing::ScriptedChatTransport;
  ScriptedChatTransport transport(
      [](const std::string&, const std::vector<ChatMessage>&) -> std::string {
        return "I would attend to 0, 2";
      });
  ChatAnswerBackend backend(transport, {}, system_wrapper_text());
  Cache cache;
  ChatViewProvider cv(backend, cache);
  auto views = cv.views(pool, inst, ents);
  REQUIRE(views.count("alpha::raw"));
  CHECK(views["alpha::raw"] == std::set<std::size_t>{0, 2});
  // cached per agent
  cv.views(pool, inst, ents);
  CHECK(transport.calls() == 2);
}

TEST_CASE("agent embed texts include the prompt prefix") {
  auto pool = make_pool({"alpha"}, {"raw", "cot"});
  auto texts = agent_embed_texts(pool);
  CHECK(contains(texts["alpha::raw"], "alpha raw"));
  CHECK(contains(texts["alpha::cot"], "think step-by-step"));
  pool[0].prompt = make_prompt_version("completely different", 1);
  auto texts2 = agent_embed_texts(pool);
  CHECK(texts["alpha::cot"] != texts2["alpha::cot"]);
}
