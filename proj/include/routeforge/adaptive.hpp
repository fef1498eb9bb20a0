#pragma once

#include <functional>
#include <optional>

#include "routeforge/agents.hpp"
#include "routeforge/router.hpp"
#include "routeforge/voting.hpp"

namespace routeforge {

struct AdaptiveConfig {
  double tau_agree = 0.8;  // agreement threshold; the Eq-1 temperature is separate
  int k_min = 2;
  int k_max = 0;  // 0 = pool size

  void validate(std::size_t pool_size) const;
};

// Agent ids in consultation order: descending router weight, ties by id.
std::vector<std::string> rank_agents(const RoutingDistribution& dist);

struct ConsultRecord {
  std::string agent_id;
  double weight = 0.0;
  std::string answer;
};

struct AdaptiveResult {
  std::string answer;
  std::vector<ConsultRecord> consulted;
  int k_star = 0;
  bool stopped_early = false;
  std::vector<double> agreement_trace;  // A(1..k_star)
};

// Produces an answer for an agent id, or nullopt on failure (agent skipped,
// weight excluded; k counts successful answers).
using AgentAnswerFn = std::function<std::optional<std::string>(const std::string& agent_id)>;

// Sequential router-ranked consultation with the agreement stopping rule and
// weighted-majority aggregation over the consulted set only.
AdaptiveResult adaptive_infer(const RoutingDistribution& dist, const AgentAnswerFn& answer_fn,
                              const AdaptiveConfig& config);

// Convenience wrapper: answers come from the pool via the cache/backend.
AdaptiveResult adaptive_infer(const RoutingDistribution& dist, const std::vector<AgentSpec>& pool,
                              const QAInstance& instance, Cache& cache, AnswerBackend& backend,
                              const AdaptiveConfig& config, const RetryPolicy& retry = {});

struct TuneCandidate {
  AdaptiveConfig config;
  double mean_f1 = 0.0;
  double mean_calls = 0.0;
};

struct TuneInput {
  RoutingDistribution dist;
  std::map<std::string, std::string> agent_answers;
  std::vector<std::string> golds;
};

// Grid search over (tau, k_min, k_max) on precomputed validation answers;
// picks by F1, then fewest mean calls, then the smallest config.
TuneCandidate tune_adaptive(const std::vector<TuneInput>& inputs,
                            const std::vector<double>& taus = {0.6, 0.7, 0.8, 0.9},
                            const std::vector<int>& k_mins = {2, 3},
                            const std::vector<int>& k_maxs = {});

}  // namespace routeforge
