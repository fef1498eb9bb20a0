#pragma once

#include <optional>
#include <string>
#include <vector>

#include "routeforge/common.hpp"

namespace routeforge {

// One question with its evidence context and reference answers.
struct QAInstance {
  std::string id;
  std::string question;
  std::string context;
  std::vector<std::string> gold_answers;  // non-empty
  std::optional<std::string> category;
};

struct Score {
  double f1 = 0.0;
  bool em = false;

  bool operator==(const Score&) const = default;
};

// JSON-lines file, one object per line: {id, question, context, answers, category?}.
// limit = 0 means no cap.
std::vector<QAInstance> load_dataset(const std::string& path, std::size_t limit = 0);

// SQuAD normalization: lowercase, strip punctuation, drop articles, collapse
// whitespace. Idempotent.
std::string normalize_answer(std::string_view text);

// Token-level F1 over normalized whitespace tokens (multiset overlap).
double token_f1(std::string_view prediction, std::string_view gold);

bool exact_match(std::string_view prediction, std::string_view gold);

// Max F1 / any-EM over references.
Score best_score(std::string_view prediction, const std::vector<std::string>& golds);

// Question-type label from a wh-word heuristic when the dataset carries none.
// Labels: what, who, when, where, which, how, yesno, other.
std::string derive_category(std::string_view question);

// Explicit label when present, heuristic otherwise.
std::string effective_category(const QAInstance& instance);

}  // namespace routeforge
