#include "routeforge/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

namespace routeforge {

namespace {

bool is_punct_ascii(char c) {
  static const std::string punct = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
  return punct.find(c) != std::string::npos;
}

bool is_article(const std::string& tok) {
  return tok == "a" || tok == "an" || tok == "the";
}

std::string json_field_string(const nlohmann::json& obj, const char* key, std::size_t line_no) {
  if (!obj.contains(key)) fail_data("line " + std::to_string(line_no) + ": missing field '" + key + "'");
  const auto& v = obj.at(key);
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  fail_data("line " + std::to_string(line_no) + ": field '" + key + "' must be a string");
}

}  // namespace

std::vector<QAInstance> load_dataset(const std::string& path, std::size_t limit) {
  std::ifstream in(path);
  if (!in) fail_data("cannot open dataset file: " + path);

  std::vector<QAInstance> out;
  std::set<std::string> seen_ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim_copy(line).empty()) continue;
    if (limit && out.size() >= limit) break;

    nlohmann::json obj = nlohmann::json::parse(line, nullptr, false);
    if (obj.is_discarded() || !obj.is_object()) {
      fail_data("line " + std::to_string(line_no) + ": malformed JSON object");
    }

    QAInstance inst;
    inst.id = json_field_string(obj, "id", line_no);
    inst.question = json_field_string(obj, "question", line_no);
    inst.context = json_field_string(obj, "context", line_no);
    if (inst.question.empty()) fail_data("line " + std::to_string(line_no) + ": empty question");
    if (!seen_ids.insert(inst.id).second) {
      fail_data("line " + std::to_string(line_no) + ": duplicate id '" + inst.id + "'");
    }

    if (!obj.contains("answers") || !obj.at("answers").is_array()) {
      fail_data("line " + std::to_string(line_no) + ": field 'answers' must be an array");
    }
    for (const auto& a : obj.at("answers")) {
      if (!a.is_string()) fail_data("line " + std::to_string(line_no) + ": answers must be strings");
      inst.gold_answers.push_back(a.get<std::string>());
    }
    if (inst.gold_answers.empty()) {
      fail_data("line " + std::to_string(line_no) + ": empty answers for id '" + inst.id + "'");
    }

    if (obj.contains("category") && obj.at("category").is_string()) {
      inst.category = obj.at("category").get<std::string>();
    }
    out.push_back(std::move(inst));
  }
  return out;
}

std::string normalize_answer(std::string_view text) {
  std::string lowered;
  lowered.reserve(text.size());
  for (char c : text) {
    char lc = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (!is_punct_ascii(lc)) lowered.push_back(lc);
  }
  std::vector<std::string> kept;
  for (auto& tok : split_ws(lowered)) {
    if (!is_article(tok)) kept.push_back(std::move(tok));
  }
  return join(kept, " ");
}

double token_f1(std::string_view prediction, std::string_view gold) {
  const auto p_toks = split_ws(normalize_answer(prediction));
  const auto g_toks = split_ws(normalize_answer(gold));
  if (p_toks.empty() && g_toks.empty()) return 1.0;
  if (p_toks.empty() || g_toks.empty()) return 0.0;

  std::map<std::string, int> gold_counts;
  for (const auto& t : g_toks) ++gold_counts[t];
  int common = 0;
  for (const auto& t : p_toks) {
    auto it = gold_counts.find(t);
    if (it != gold_counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(p_toks.size());
  const double recall = static_cast<double>(common) / static_cast<double>(g_toks.size());
  return 2.0 * precision * recall / (precision + recall);
}

bool exact_match(std::string_view prediction, std::string_view gold) {
  return normalize_answer(prediction) == normalize_answer(gold);
}

Score best_score(std::string_view prediction, const std::vector<std::string>& golds) {
  if (golds.empty()) fail_data("best_score: empty gold answer list");
  Score best;
  for (const auto& g : golds) {
    best.f1 = std::max(best.f1, token_f1(prediction, g));
    best.em = best.em || exact_match(prediction, g);
  }
  return best;
}

std::string derive_category(std::string_view question) {
  const auto toks = split_ws(normalize_answer(question));
  if (toks.empty()) return "other";

  static const std::set<std::string> yesno_lead = {
      "is", "are", "was", "were", "do", "does", "did", "can",  "could", "will",
      "would", "has", "have", "had", "should", "may", "might", "must"};
  if (yesno_lead.count(toks.front())) return "yesno";

  for (const auto& t : toks) {
    if (t == "what") return "what";
    if (t == "who" || t == "whom" || t == "whose") return "who";
    if (t == "when") return "when";
    if (t == "where") return "where";
    if (t == "which") return "which";
    if (t == "how") return "how";
  }
  return "other";
}

std::string effective_category(const QAInstance& instance) {
  if (instance.category && !instance.category->empty()) return *instance.category;
  return derive_category(instance.question);
}

}  // namespace routeforge
