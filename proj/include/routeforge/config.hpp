#pragma once

#include <map>
#include <string>
#include <vector>

#include "routeforge/adaptive.hpp"
#include "routeforge/refinement.hpp"
#include "routeforge/router.hpp"

namespace routeforge {

struct PathsConfig {
  std::string train;
  std::string val;
  std::string test;
  std::string run_dir = "run";
  std::string prompts_dir;  // empty = shipped defaults
};

struct PoolConfig {
  std::string backend = "synthetic";  // synthetic | http
  std::vector<std::string> backbones{"llama3_8b", "qwen2p5_7b", "mixtral_8x7b", "gpt_oss_20b"};
  std::vector<std::string> roles{"raw", "cot", "sc", "mad", "react_reflect", "summary"};
  std::string endpoint;  // http backend base URL
  std::string endpoint_path = "/v1/chat/completions";
  std::string api_key_env = "ROUTEFORGE_API_KEY";
  std::map<std::string, std::string> model_by_backbone;  // keys "model.<backbone>"
  std::string rewriter_model = "gpt-4o-mini";
  double temperature = 0.2;
  int max_tokens = 3000;
};

struct SyntheticConfig {
  std::uint64_t seed = 2024;
  double best_competence = 0.95;
  double other_competence = 0.35;
  double degraded_competence = 0.2;
  std::string degrade_marker = "[[degraded]]";
  int distractor_classes = 3;
  double view_rate = 0.3;
  std::string profiles_file;  // optional JSON {agent: {default: p, by_category: {...}}}
};

struct GraphConfig {
  int embed_dim = 256;
  int max_entities = 64;
  int cooccur_window = 200;
};

struct RuntimeConfig {
  int concurrency = 1;
  int retries = 3;
  int backoff_ms = 100;
  double missing_threshold = 0.01;
  std::size_t limit = 0;  // dataset ingestion cap, 0 = unlimited
};

struct RunConfig {
  PathsConfig paths;
  PoolConfig pool;
  SyntheticConfig synthetic;
  GraphConfig graph;
  TrainConfig train;
  RefineConfig refine;
  AdaptiveConfig adaptive{0.8, 2, 0};
  RuntimeConfig runtime;

  void validate() const;
};

// Flat key-value file with [sections] mirroring the module names. Every key
// has a default, so a minimal config names only paths and the pool backend.
RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config(const std::string& text, const std::string& origin = "<inline>");

}  // namespace routeforge
