#include "routeforge/adaptive.hpp"

#include <algorithm>
#include <atomic>
#include <iostream>

namespace routeforge {

void AdaptiveConfig::validate(std::size_t pool_size) const {
  if (tau_agree <= 0.0 || tau_agree > 1.0) fail_config("adaptive: tau must be in (0,1]");
  if (k_min < 1) fail_config("adaptive: k_min must be >= 1");
  const int kmax = k_max > 0 ? k_max : static_cast<int>(pool_size);
  if (kmax > static_cast<int>(pool_size)) fail_config("adaptive: k_max exceeds pool size");
  if (k_min > kmax) fail_config("adaptive: k_min must not exceed k_max");
  if (k_min == 1) {
    // A(1) = 1 >= tau for any tau <= 1: such configs always stop at k=1
    static std::atomic<bool> warned{false};
    if (!warned.exchange(true)) {
      std::cerr << "[adaptive] warning: k_min=1 stops after the first agent for any tau <= 1\n";
    }
  }
}

std::vector<std::string> rank_agents(const RoutingDistribution& dist) {
  std::vector<std::string> out;
  for (std::size_t idx : ranked_order(dist.agent_ids, dist.probs)) {
    out.push_back(dist.agent_ids[idx]);
  }
  return out;
}

AdaptiveResult adaptive_infer(const RoutingDistribution& dist, const AgentAnswerFn& answer_fn,
                              const AdaptiveConfig& config) {
  config.validate(dist.agent_ids.size());
  const int k_max = config.k_max > 0 ? config.k_max : static_cast<int>(dist.agent_ids.size());

  const auto order = ranked_order(dist.agent_ids, dist.probs);
  AdaptiveResult result;
  std::vector<double> weights;
  std::vector<std::string> answers;

  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    if (static_cast<int>(answers.size()) >= k_max) break;
    const std::size_t idx = order[pos];
    const std::optional<std::string> ans = answer_fn(dist.agent_ids[idx]);
    if (!ans) continue;  // failed agent: skipped, weight excluded

    weights.push_back(std::max(dist.probs[idx], 1e-12));
    answers.push_back(*ans);
    result.consulted.push_back({dist.agent_ids[idx], dist.probs[idx], *ans});

    const int k = static_cast<int>(answers.size());
    result.agreement_trace.push_back(agreement(weights, answers, static_cast<std::size_t>(k)));
    if (k >= config.k_min && result.agreement_trace.back() >= config.tau_agree) {
      result.stopped_early = true;
      break;
    }
  }

  if (answers.empty()) fail_backend("adaptive_infer: every agent failed");
  result.k_star = static_cast<int>(answers.size());
  result.answer = weighted_vote(weights, answers);
  return result;
}

AdaptiveResult adaptive_infer(const RoutingDistribution& dist, const std::vector<AgentSpec>& pool,
                              const QAInstance& instance, Cache& cache, AnswerBackend& backend,
                              const AdaptiveConfig& config, const RetryPolicy& retry) {
  return adaptive_infer(
      dist,
      [&](const std::string& agent_id) -> std::optional<std::string> {
        const AgentSpec* spec = find_agent(pool, agent_id);
        if (!spec) return std::nullopt;
        try {
          return invoke(*spec, instance, cache, backend, retry).answer;
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::Backend) throw;  // only backend failures are skippable
          return std::nullopt;
        }
      },
      config);
}

TuneCandidate tune_adaptive(const std::vector<TuneInput>& inputs, const std::vector<double>& taus,
                            const std::vector<int>& k_mins, const std::vector<int>& k_maxs) {
  if (inputs.empty()) fail_data("tune_adaptive: empty validation inputs");
  const std::size_t n = inputs.front().dist.agent_ids.size();
  std::vector<int> kmax_grid = k_maxs;
  if (kmax_grid.empty()) {
    for (int k : {5, 10, static_cast<int>(n)}) {
      if (k <= static_cast<int>(n) && (kmax_grid.empty() || kmax_grid.back() != k)) {
        kmax_grid.push_back(k);
      }
    }
  }

  std::optional<TuneCandidate> best;
  for (double tau : taus) {
    for (int kmin : k_mins) {
      for (int kmax : kmax_grid) {
        if (kmin > kmax) continue;
        AdaptiveConfig cfg{tau, kmin, kmax};
        double f1_sum = 0.0, call_sum = 0.0;
        for (const auto& input : inputs) {
          const AdaptiveResult r = adaptive_infer(
              input.dist,
              [&](const std::string& agent_id) -> std::optional<std::string> {
                auto it = input.agent_answers.find(agent_id);
                if (it == input.agent_answers.end()) return std::nullopt;
                return it->second;
              },
              cfg);
          f1_sum += best_score(r.answer, input.golds).f1;
          call_sum += r.k_star;
        }
        TuneCandidate cand;
        cand.config = cfg;
        cand.mean_f1 = f1_sum / static_cast<double>(inputs.size());
        cand.mean_calls = call_sum / static_cast<double>(inputs.size());
        const auto key = [](const TuneCandidate& c) {
          return std::make_tuple(-c.mean_f1, c.mean_calls, c.config.tau_agree, c.config.k_min,
                                 c.config.k_max);
        };
        if (!best || key(cand) < key(*best)) best = cand;
      }
    }
  }
  return *best;
}

}  // namespace routeforge
