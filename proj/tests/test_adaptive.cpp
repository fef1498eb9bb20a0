#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "routeforge/adaptive.hpp"

using namespace routeforge;

namespace {

RoutingDistribution make_dist(const std::vector<std::string>& ids,
                              const std::vector<double>& probs) {
  RoutingDistribution d;
  d.agent_ids = ids;
  d.probs = probs;
  d.scores.assign(ids.size(), 0.0);
  return d;
}

AgentAnswerFn fixed_answers(const std::map<std::string, std::string>& answers) {
  return [answers](const std::string& id) -> std::optional<std::string> {
    auto it = answers.find(id);
    if (it == answers.end()) return std::nullopt;
    return it->second;
  };
}

// Exhaustive oracle: collect all k_max answers, then scan k for the first
// threshold crossing. Lives only in test code, independent of adaptive_infer.
struct OracleResult {
  int k_star;
  std::string answer;
};

OracleResult exhaustive_oracle(const RoutingDistribution& dist,
                               const std::map<std::string, std::string>& answers,
                               const AdaptiveConfig& cfg) {
  const auto order = ranked_order(dist.agent_ids, dist.probs);
  std::vector<double> w;
  std::vector<std::string> a;
  const int k_max = cfg.k_max > 0 ? cfg.k_max : static_cast<int>(dist.agent_ids.size());
  for (std::size_t pos = 0; pos < order.size() && static_cast<int>(a.size()) < k_max; ++pos) {
    auto it = answers.find(dist.agent_ids[order[pos]]);
    if (it == answers.end()) continue;
    w.push_back(std::max(dist.probs[order[pos]], 1e-12));
    a.push_back(it->second);
  }
  int k_star = static_cast<int>(a.size());
  for (int k = cfg.k_min; k <= static_cast<int>(a.size()); ++k) {
    if (agreement(w, a, static_cast<std::size_t>(k)) >= cfg.tau_agree) {
      k_star = k;
      break;
    }
  }
  std::vector<double> wk(w.begin(), w.begin() + k_star);
  std::vector<std::string> ak(a.begin(), a.begin() + k_star);
  return {k_star, weighted_vote(wk, ak)};
}

}  // namespace

TEST_CASE("rank_agents orders by weight with id tie-break") {
  auto d = make_dist({"a", "b", "c"}, {0.5, 0.3, 0.2});
  CHECK(rank_agents(d) == std::vector<std::string>{"a", "b", "c"});

  auto uniform = make_dist({"c", "a", "b"}, {1.0 / 3, 1.0 / 3, 1.0 / 3});
  CHECK(rank_agents(uniform) == std::vector<std::string>{"a", "b", "c"});

  auto tied_top = make_dist({"b", "a", "c"}, {0.4, 0.4, 0.2});
  CHECK(rank_agents(tied_top) == std::vector<std::string>{"a", "b", "c"});
  CHECK(rank_agents(tied_top) == rank_agents(tied_top));
}

TEST_CASE("agreement reproduces hand-computed values") {
  CHECK(agreement({0.7}, {"x"}, 1) == doctest::Approx(1.0));
  CHECK(agreement({0.5, 0.3, 0.2}, {"a", "a", "b"}, 3) == doctest::Approx(0.8));
  CHECK(agreement({0.6, 0.4}, {"Yes", "yes"}, 2) == doctest::Approx(1.0));
  CHECK(agreement({0.5, 0.5}, {"a", "b"}, 1) == doctest::Approx(1.0));
  CHECK_THROWS_AS(agreement({0.5}, {"a"}, 0), Error);
  CHECK_THROWS_AS(agreement({0.5}, {"a"}, 2), Error);
}

TEST_CASE("agreement is scale invariant") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> w;
    std::vector<std::string> a;
    const std::size_t n = 2 + rng.next_below(6);
    for (std::size_t i = 0; i < n; ++i) {
      w.push_back(0.05 + rng.next_unit());
      a.push_back(std::string(1, static_cast<char>('a' + rng.next_below(3))));
    }
    const double scale = 0.1 + 5.0 * rng.next_unit();
    std::vector<double> w2 = w;
    for (double& x : w2) x *= scale;
    const std::size_t k = 1 + rng.next_below(n);
    CHECK(agreement(w, a, k) == doctest::Approx(agreement(w2, a, k)).epsilon(1e-9));
    CHECK(weighted_vote(w, a) == weighted_vote(w2, a));
  }
}

TEST_CASE("weighted_vote matches hand computation and tie rules") {
  CHECK(weighted_vote({1.0}, {"only"}) == "only");
  CHECK(weighted_vote({0.4, 0.35, 0.25}, {"a", "b", "b"}) == "b");
  // exact tie: class of the higher-ranked (earlier) agent wins
  CHECK(weighted_vote({0.5, 0.5}, {"first", "second"}) == "first");
  // raw string of the highest-weighted member of the winning class
  CHECK(weighted_vote({0.3, 0.45, 0.25}, {"Yes", "yes", "no"}) == "yes");
  CHECK_THROWS_AS(weighted_vote({}, {}), Error);
}

TEST_CASE("adaptive_infer stops per the threshold rule") {
  auto d = make_dist({"a1", "a2", "a3", "a4"}, {0.5, 0.3, 0.15, 0.05});

  SUBCASE("early agreement stops at k_min") {
    AdaptiveConfig cfg{0.9, 2, 4};
    auto r = adaptive_infer(
        d, fixed_answers({{"a1", "x"}, {"a2", "x"}, {"a3", "y"}, {"a4", "z"}}), cfg);
    CHECK(r.k_star == 2);
    CHECK(r.stopped_early);
    CHECK(r.answer == "x");
    CHECK(r.agreement_trace.size() == 2);
    CHECK(r.agreement_trace[1] == doctest::Approx(1.0));
  }

  SUBCASE("tau 1.0 with all-distinct answers runs to k_max") {
    AdaptiveConfig cfg{1.0, 2, 4};
    auto r = adaptive_infer(
        d, fixed_answers({{"a1", "p"}, {"a2", "q"}, {"a3", "r"}, {"a4", "s"}}), cfg);
    CHECK(r.k_star == 4);
    CHECK_FALSE(r.stopped_early);
    CHECK(r.answer == "p");  // highest-weighted class
  }

  SUBCASE("k_min = k_max = n reproduces the full-pool weighted vote") {
    AdaptiveConfig cfg{0.6, 4, 4};
    std::map<std::string, std::string> answers{
        {"a1", "x"}, {"a2", "y"}, {"a3", "y"}, {"a4", "y"}};
    auto r = adaptive_infer(d, fixed_answers(answers), cfg);
    CHECK(r.k_star == 4);
    CHECK(r.answer == weighted_vote({0.5, 0.3, 0.15, 0.05}, {"x", "y", "y", "y"}));
  }

  SUBCASE("failed agents are skipped with weight excluded") {
    AdaptiveConfig cfg{0.9, 2, 3};
    auto r = adaptive_infer(d, fixed_answers({{"a1", "x"}, {"a3", "x"}, {"a4", "y"}}), cfg);
    CHECK(r.k_star == 2);
    CHECK(r.consulted[0].agent_id == "a1");
    CHECK(r.consulted[1].agent_id == "a3");
  }

  SUBCASE("all agents failing is an error") {
    AdaptiveConfig cfg{0.9, 2, 4};
    CHECK_THROWS_AS(adaptive_infer(d, fixed_answers({}), cfg), Error);
  }

  SUBCASE("invalid configs rejected") {
    CHECK_THROWS_AS(adaptive_infer(d, fixed_answers({{"a1", "x"}}), AdaptiveConfig{0.0, 2, 4}),
                    Error);
    CHECK_THROWS_AS(adaptive_infer(d, fixed_answers({{"a1", "x"}}), AdaptiveConfig{0.5, 3, 2}),
                    Error);
    CHECK_THROWS_AS(adaptive_infer(d, fixed_answers({{"a1", "x"}}), AdaptiveConfig{0.5, 1, 9}),
                    Error);
  }
}

TEST_CASE("sequential stopping equals the exhaustive oracle over random configs") {
  Rng rng(314);
  int checked = 0;
  for (int trial = 0; trial < 1200; ++trial) {
    const int n = 3 + static_cast<int>(rng.next_below(10));
    std::vector<std::string> ids;
    std::vector<double> probs;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      ids.push_back("ag" + std::to_string(i));
      probs.push_back(0.01 + rng.next_unit());
      sum += probs.back();
    }
    for (double& p : probs) p /= sum;
    std::map<std::string, std::string> answers;
    for (int i = 0; i < n; ++i) {
      answers["ag" + std::to_string(i)] = std::string(1, static_cast<char>('a' + rng.next_below(4)));
    }
    AdaptiveConfig cfg;
    cfg.tau_agree = 0.4 + 0.6 * rng.next_unit();
    cfg.k_min = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n)));
    cfg.k_max = cfg.k_min + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n - cfg.k_min + 1)));

    auto d = make_dist(ids, probs);
    const auto oracle = exhaustive_oracle(d, answers, cfg);
    const auto sequential = adaptive_infer(d, fixed_answers(answers), cfg);
    CHECK(sequential.k_star == oracle.k_star);
    CHECK(sequential.answer == oracle.answer);
    ++checked;
  }
  CHECK(checked == 1200);
}

TEST_CASE("consulted count hits k_min under unanimity") {
  Rng rng(99);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 4 + static_cast<int>(rng.next_below(8));
    std::vector<std::string> ids;
    std::vector<double> probs(static_cast<std::size_t>(n), 1.0 / n);
    std::map<std::string, std::string> answers;
    for (int i = 0; i < n; ++i) {
      ids.push_back("ag" + std::to_string(i));
      answers["ag" + std::to_string(i)] = "same";
    }
    AdaptiveConfig cfg{0.8, 2 + static_cast<int>(rng.next_below(2)), n};
    auto r = adaptive_infer(make_dist(ids, probs), fixed_answers(answers), cfg);
    CHECK(r.k_star == cfg.k_min);
    CHECK(r.answer == "same");
  }
}

TEST_CASE("tune_adaptive picks by F1 then fewest calls") {
  std::vector<TuneInput> inputs;
  for (int i = 0; i < 30; ++i) {
    TuneInput input;
    input.dist = make_dist({"a1", "a2", "a3", "a4", "a5"}, {0.5, 0.2, 0.15, 0.1, 0.05});
    // top agent always right; others agree with it half the time
    input.agent_answers["a1"] = "gold" + std::to_string(i);
    input.agent_answers["a2"] = i % 2 ? "gold" + std::to_string(i) : "junk";
    input.agent_answers["a3"] = "gold" + std::to_string(i);
    input.agent_answers["a4"] = "junk";
    input.agent_answers["a5"] = "junk2";
    input.golds = {"gold" + std::to_string(i)};
    inputs.push_back(std::move(input));
  }
  const TuneCandidate best = tune_adaptive(inputs, {0.6, 0.7, 0.8, 0.9}, {2, 3}, {5});
  CHECK(best.mean_f1 == doctest::Approx(1.0));
  // with equal F1 everywhere the tie-break prefers fewer calls
  CHECK(best.config.k_min == 2);
  CHECK(best.mean_calls <= 3.0);
}
