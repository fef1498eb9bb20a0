#pragma once

#include <string>
#include <vector>

namespace routeforge {

// Indices of agents ordered by descending weight, ties by ascending id.
std::vector<std::size_t> ranked_order(const std::vector<std::string>& ids,
                                      const std::vector<double>& probs);

// Weighted share of the most supported answer among the first k entries.
// Answers are grouped by normalize_answer equivalence. Lists are expected in
// consultation (rank) order; weights must be positive.
double agreement(const std::vector<double>& weights, const std::vector<std::string>& answers,
                 std::size_t k);

// Argmax over normalized-answer classes of summed weights. Exact ties go to
// the class containing the earliest (highest-ranked) answer. Returns the raw
// answer string of the highest-weighted member of the winning class.
std::string weighted_vote(const std::vector<double>& weights,
                          const std::vector<std::string>& answers);

}  // namespace routeforge
