#include "routeforge/voting.hpp"

#include <algorithm>
#include <map>

#include "routeforge/common.hpp"
#include "routeforge/dataset.hpp"

namespace routeforge {

std::vector<std::size_t> ranked_order(const std::vector<std::string>& ids,
                                      const std::vector<double>& probs) {
  if (ids.size() != probs.size()) fail_data("ranked_order: ids/probs length mismatch");
  std::vector<std::size_t> order(ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (probs[a] != probs[b]) return probs[a] > probs[b];
    return ids[a] < ids[b];
  });
  return order;
}

double agreement(const std::vector<double>& weights, const std::vector<std::string>& answers,
                 std::size_t k) {
  if (k == 0) fail_data("agreement: k must be positive");
  if (weights.size() != answers.size() || k > weights.size()) {
    fail_data("agreement: k exceeds available answers");
  }
  std::map<std::string, double> class_weight;
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    if (weights[i] <= 0.0) fail_data("agreement: weights must be positive");
    class_weight[normalize_answer(answers[i])] += weights[i];
    total += weights[i];
  }
  double best = 0.0;
  for (const auto& [cls, w] : class_weight) best = std::max(best, w);
  return best / total;
}

std::string weighted_vote(const std::vector<double>& weights,
                          const std::vector<std::string>& answers) {
  if (weights.empty() || weights.size() != answers.size()) {
    fail_data("weighted_vote: empty or misaligned inputs");
  }
  struct ClassInfo {
    double weight = 0.0;
    std::size_t first_index = 0;      // earliest member (rank tie-break)
    std::size_t best_member = 0;      // highest-weighted member
    double best_member_weight = -1.0;
  };
  std::map<std::string, ClassInfo> classes;
  for (std::size_t i = 0; i < answers.size(); ++i) {
    const std::string key = normalize_answer(answers[i]);
    auto [it, inserted] = classes.try_emplace(key);
    ClassInfo& info = it->second;
    if (inserted) info.first_index = i;
    info.weight += weights[i];
    if (weights[i] > info.best_member_weight) {
      info.best_member_weight = weights[i];
      info.best_member = i;
    }
  }
  const ClassInfo* winner = nullptr;
  for (const auto& [key, info] : classes) {
    if (!winner || info.weight > winner->weight ||
        (info.weight == winner->weight && info.first_index < winner->first_index)) {
      winner = &info;
    }
  }
  return answers[winner->best_member];
}

}  // namespace routeforge
