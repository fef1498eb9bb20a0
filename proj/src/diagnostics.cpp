#include "routeforge/diagnostics.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "routeforge/refinement.hpp"

namespace routeforge {

DiagnosticsBundle collect(const PoolEvalResult& eval,
                          const std::map<std::string, RoutingDistribution>& router_outputs,
                          const std::vector<QAInstance>& instances,
                          const std::map<std::string, std::string>& prompt_hashes,
                          const DiagConfig& config) {
  std::map<std::string, const QAInstance*> by_id;
  for (const auto& inst : instances) by_id[inst.id] = &inst;
  for (const auto& [iid, dist] : router_outputs) {
    if (!by_id.count(iid)) fail_data("diagnostics: router output for unknown instance " + iid);
  }

  DiagnosticsBundle bundle;
  bundle.cache_manifest = prompt_hashes;

  for (const auto& agent_id : eval.agent_ids) {
    auto sit = eval.scores.find(agent_id);
    if (sit == eval.scores.end()) fail_data("diagnostics: score matrix missing agent " + agent_id);
    const auto& row = sit->second;

    AgentSummary summary;
    std::map<std::string, std::pair<double, int>> cat_acc;
    std::vector<FailureRecord> failures;
    for (const auto& [iid, score] : row) {
      auto iit = by_id.find(iid);
      if (iit == by_id.end()) fail_data("diagnostics: scored unknown instance " + iid);
      const QAInstance& inst = *iit->second;
      summary.mean_f1 += score.f1;
      ++summary.samples;
      auto& acc = cat_acc[effective_category(inst)];
      acc.first += score.f1;
      ++acc.second;

      if (score.f1 < config.failure_threshold) {
        FailureRecord rec;
        rec.instance_id = iid;
        rec.agent_id = agent_id;
        rec.question = inst.question;
        auto ait = eval.answers.find(agent_id);
        if (ait != eval.answers.end()) {
          auto pit = ait->second.find(iid);
          if (pit != ait->second.end()) rec.predicted = pit->second;
        }
        rec.gold = inst.gold_answers.front();
        rec.f1 = score.f1;
        auto rit = router_outputs.find(iid);
        if (rit != router_outputs.end()) rec.router_weight = rit->second.prob_of(agent_id);
        failures.push_back(std::move(rec));
      }
    }
    if (summary.samples > 0) summary.mean_f1 /= summary.samples;
    for (const auto& [cat, acc] : cat_acc) {
      summary.per_category_f1[cat] = acc.first / static_cast<double>(acc.second);
    }
    bundle.agent_summaries[agent_id] = std::move(summary);

    std::sort(failures.begin(), failures.end(), [](const FailureRecord& a, const FailureRecord& b) {
      if (a.f1 != b.f1) return a.f1 < b.f1;
      return a.instance_id < b.instance_id;
    });
    if (static_cast<int>(failures.size()) > config.archive_cap_per_agent) {
      failures.resize(static_cast<std::size_t>(config.archive_cap_per_agent));
    }
    for (auto& rec : failures) bundle.failure_archive.push_back(std::move(rec));
  }

  // router weight statistics, overall and per question category
  for (const auto& agent_id : eval.agent_ids) {
    WeightStats stats;
    double sum = 0.0;
    int count = 0;
    std::map<std::string, std::pair<double, int>> cat_acc;
    for (const auto& [iid, dist] : router_outputs) {
      const double w = dist.prob_of(agent_id);
      sum += w;
      ++count;
      auto& acc = cat_acc[effective_category(*by_id.at(iid))];
      acc.first += w;
      ++acc.second;
    }
    if (count > 0) stats.mean = sum / count;
    for (const auto& [cat, acc] : cat_acc) {
      stats.per_category[cat] = acc.first / static_cast<double>(acc.second);
    }
    bundle.weight_stats[agent_id] = std::move(stats);
  }
  return bundle;
}

std::string summarize(const DiagnosticsBundle& bundle, double alpha) {
  struct Row {
    std::string agent;
    double mean_f1, weight, prio;
    int archived;
  };
  std::map<std::string, int> archive_counts;
  for (const auto& rec : bundle.failure_archive) ++archive_counts[rec.agent_id];

  std::vector<Row> rows;
  for (const auto& [agent, summary] : bundle.agent_summaries) {
    const double w = bundle.weight_stats.count(agent) ? bundle.weight_stats.at(agent).mean : 0.0;
    rows.push_back({agent, summary.mean_f1, w, priority(summary.mean_f1, w, alpha),
                    archive_counts.count(agent) ? archive_counts.at(agent) : 0});
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.prio != b.prio) return a.prio > b.prio;
    return a.agent < b.agent;
  });

  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << std::left << std::setw(32) << "agent" << std::right << std::setw(10) << "mean_f1"
      << std::setw(10) << "weight" << std::setw(10) << "priority" << std::setw(10) << "archived"
      << "\n";
  for (const auto& r : rows) {
    out << std::left << std::setw(32) << r.agent << std::right << std::setw(10) << r.mean_f1
        << std::setw(10) << r.weight << std::setw(10) << r.prio << std::setw(10) << r.archived
        << "\n";
  }
  if (bundle.failure_archive.empty()) out << "no failures\n";
  return out.str();
}

std::string bundle_to_json(const DiagnosticsBundle& bundle) {
  nlohmann::ordered_json doc;
  doc["agent_summaries"] = nlohmann::ordered_json::object();
  for (const auto& [agent, s] : bundle.agent_summaries) {
    doc["agent_summaries"][agent] = {{"mean_f1", s.mean_f1},
                                     {"per_category_f1", s.per_category_f1},
                                     {"samples", s.samples}};
  }
  doc["failure_archive"] = nlohmann::ordered_json::array();
  for (const auto& r : bundle.failure_archive) {
    doc["failure_archive"].push_back({{"instance_id", r.instance_id},
                                      {"agent_id", r.agent_id},
                                      {"question", r.question},
                                      {"predicted", r.predicted},
                                      {"gold", r.gold},
                                      {"f1", r.f1},
                                      {"router_weight", r.router_weight}});
  }
  doc["weight_stats"] = nlohmann::ordered_json::object();
  for (const auto& [agent, w] : bundle.weight_stats) {
    doc["weight_stats"][agent] = {{"mean", w.mean}, {"per_category", w.per_category}};
  }
  doc["cache_manifest"] = bundle.cache_manifest;
  return doc.dump(2);
}

DiagnosticsBundle bundle_from_json(const std::string& text) {
  auto doc = nlohmann::json::parse(text, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) fail_data("diagnostics: malformed bundle JSON");
  DiagnosticsBundle bundle;
  const auto summaries = doc.value("agent_summaries", nlohmann::json::object());
  for (const auto& [agent, s] : summaries.items()) {
    AgentSummary summary;
    summary.mean_f1 = s.value("mean_f1", 0.0);
    summary.samples = s.value("samples", 0);
    const auto per_cat = s.value("per_category_f1", nlohmann::json::object());
    for (const auto& [cat, v] : per_cat.items()) {
      summary.per_category_f1[cat] = v.get<double>();
    }
    bundle.agent_summaries[agent] = std::move(summary);
  }
  for (const auto& r : doc.value("failure_archive", nlohmann::json::array())) {
    bundle.failure_archive.push_back({r.value("instance_id", ""), r.value("agent_id", ""),
                                      r.value("question", ""), r.value("predicted", ""),
                                      r.value("gold", ""), r.value("f1", 0.0),
                                      r.value("router_weight", 0.0)});
  }
  const auto weight_stats = doc.value("weight_stats", nlohmann::json::object());
  for (const auto& [agent, w] : weight_stats.items()) {
    WeightStats stats;
    stats.mean = w.value("mean", 0.0);
    const auto per_cat = w.value("per_category", nlohmann::json::object());
    for (const auto& [cat, v] : per_cat.items()) {
      stats.per_category[cat] = v.get<double>();
    }
    bundle.weight_stats[agent] = std::move(stats);
  }
  const auto manifest = doc.value("cache_manifest", nlohmann::json::object());
  for (const auto& [agent, hash] : manifest.items()) {
    bundle.cache_manifest[agent] = hash.get<std::string>();
  }
  return bundle;
}

void save_bundle(const DiagnosticsBundle& bundle, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail_data("cannot write diagnostics bundle: " + path);
  out << bundle_to_json(bundle) << "\n";
}

DiagnosticsBundle load_bundle(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_data("cannot open diagnostics bundle: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return bundle_from_json(ss.str());
}

}  // namespace routeforge
