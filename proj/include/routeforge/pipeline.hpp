#pragma once

#include <memory>
#include <optional>

#include "routeforge/config.hpp"
#include "routeforge/diagnostics.hpp"

namespace routeforge {

// Run directory layout: graphs/, cache/, checkpoints/, diagnostics/,
// journal/, predictions/, prompts/.
struct RunDir {
  std::filesystem::path root;

  std::filesystem::path graphs(const std::string& split) const { return root / "graphs" / split; }
  std::filesystem::path graph_manifest(const std::string& split) const {
    return graphs(split) / "manifest.json";
  }
  std::filesystem::path cache() const { return root / "cache"; }
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path stage1_checkpoint() const { return checkpoints() / "stage1.ckpt"; }
  std::filesystem::path diagnostics_dir() const { return root / "diagnostics"; }
  std::filesystem::path journal_dir() const { return root / "journal"; }
  std::filesystem::path predictions_dir() const { return root / "predictions"; }
  std::filesystem::path prompts_dir() const { return root / "prompts"; }
  std::filesystem::path scores(const std::string& split) const {
    return root / ("scores_" + split + ".json");
  }
  std::filesystem::path train_log() const { return root / "train_log.jsonl"; }
  std::filesystem::path refine_state() const { return root / "refine_state.json"; }
  std::filesystem::path adaptive_file() const { return root / "adaptive.json"; }
};

struct PipelineEnv {
  RunConfig config;
  RunDir dirs;
  std::vector<AgentSpec> pool;  // current prompt versions, id-sorted
  std::map<std::string, std::string> backbone_map;
  std::unique_ptr<Cache> cache;
  std::unique_ptr<ChatTransport> transport;  // http pools only
  std::unique_ptr<AnswerBackend> backend;
  std::unique_ptr<RewriteProvider> rewriter;
  std::unique_ptr<TextEmbedder> embedder;
  std::unique_ptr<EntityExtractor> extractor;
  std::unique_ptr<AgentViewProvider> view_provider;

  PoolEvalOptions eval_options() const;
  RetryPolicy retry_policy() const;
};

// Builds pool, backend, cache, and providers from the config; restores any
// persisted prompt state from the run directory.
PipelineEnv make_env(const RunConfig& config);

std::vector<QAInstance> load_split(const PipelineEnv& env, const std::string& split);

// ---- prepare ------------------------------------------------------------------

struct PrepareResult {
  int written = 0;
  int skipped = 0;
  std::vector<std::string> errors;  // "<instance_id>: <message>"
};

// One embedded graph file per instance plus a manifest; re-runs skip
// up-to-date graphs.
PrepareResult pipeline_prepare(PipelineEnv& env, const std::string& split);

std::vector<TypedGraph> load_split_graphs(const PipelineEnv& env, const std::string& split,
                                          const std::vector<QAInstance>& instances);

// Structural+embedded graph for an ad-hoc instance (service path).
TypedGraph build_instance_graph(PipelineEnv& env, const QAInstance& instance);

// ---- score-agents ----------------------------------------------------------------

PoolEvalResult pipeline_score(PipelineEnv& env, const std::string& split);
PoolEvalResult load_scores(const PipelineEnv& env, const std::string& split);

// ---- train -------------------------------------------------------------------------

struct TrainOutput {
  std::string checkpoint_path;
  double val_f1 = 0.0;
  int best_epoch = 0;
};

TrainOutput pipeline_train(PipelineEnv& env, std::optional<TrainConfig> override_config = {});

// ---- refine ------------------------------------------------------------------------

RefinementState load_refine_state(const PipelineEnv& env);
void save_refine_state(const PipelineEnv& env, const RefinementState& state);
void save_prompt_state(const PipelineEnv& env);

RefinementState pipeline_refine(PipelineEnv& env, int rounds,
                                std::optional<TrainConfig> finetune_override = {});

// ---- adaptive tuning / inference ------------------------------------------------------

TuneCandidate pipeline_tune(PipelineEnv& env);

struct InferSummary {
  std::string predictions_path;
  double mean_f1 = 0.0;
  double mean_em = 0.0;
  double mean_calls = 0.0;
  int count = 0;
};

InferSummary pipeline_infer(PipelineEnv& env, const std::string& split,
                            std::optional<AdaptiveConfig> override_config = {});

// ---- eval ---------------------------------------------------------------------------

struct EvalSummary {
  double f1_mean = 0.0;
  double f1_std = 0.0;
  double em_mean = 0.0;
  double em_std = 0.0;
  std::vector<double> per_file_f1;
  std::vector<double> per_file_em;
};

EvalSummary pipeline_eval(const std::vector<std::string>& prediction_files);

// All stages chained: prepare, score, train, refine, tune, infer, eval.
InferSummary pipeline_run(PipelineEnv& env);

// Current router checkpoint (post-refinement when available).
std::string current_checkpoint_path(const PipelineEnv& env);

std::string sanitize_filename(const std::string& raw);

}  // namespace routeforge
