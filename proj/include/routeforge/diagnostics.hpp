#pragma once

#include <map>
#include <string>
#include <vector>

#include "routeforge/agents.hpp"
#include "routeforge/router.hpp"

namespace routeforge {

struct AgentSummary {
  double mean_f1 = 0.0;
  std::map<std::string, double> per_category_f1;
  int samples = 0;
};

struct FailureRecord {
  std::string instance_id;
  std::string agent_id;
  std::string question;  // verbatim; full context stays retrievable by instance_id
  std::string predicted;
  std::string gold;
  double f1 = 0.0;
  double router_weight = 0.0;
};

struct WeightStats {
  double mean = 0.0;
  std::map<std::string, double> per_category;
};

struct DiagnosticsBundle {
  std::map<std::string, AgentSummary> agent_summaries;
  std::vector<FailureRecord> failure_archive;           // grouped by agent, worst first
  std::map<std::string, WeightStats> weight_stats;
  std::map<std::string, std::string> cache_manifest;    // agent id -> prompt hash in force
};

struct DiagConfig {
  double failure_threshold = 0.3;
  int archive_cap_per_agent = 20;
};

DiagnosticsBundle collect(const PoolEvalResult& eval,
                          const std::map<std::string, RoutingDistribution>& router_outputs,
                          const std::vector<QAInstance>& instances,
                          const std::map<std::string, std::string>& prompt_hashes,
                          const DiagConfig& config = {});

// Deterministic tabular report, rows sorted by refinement priority.
std::string summarize(const DiagnosticsBundle& bundle, double alpha);

std::string bundle_to_json(const DiagnosticsBundle& bundle);
DiagnosticsBundle bundle_from_json(const std::string& text);

void save_bundle(const DiagnosticsBundle& bundle, const std::string& path);
DiagnosticsBundle load_bundle(const std::string& path);

}  // namespace routeforge
