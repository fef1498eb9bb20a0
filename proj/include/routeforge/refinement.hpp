#pragma once

#include <filesystem>
#include <functional>
#include <set>

#include "routeforge/diagnostics.hpp"

namespace routeforge {

struct RefineConfig {
  int rounds = 3;
  int n_max = 3;  // targets per round
  int n_candidates = 3;
  std::vector<double> rewrite_temperatures{0.30, 0.45, 0.60};
  double alpha = 0.3;
  double delta = 0.02;  // gate tolerance on mean F1
  int k_freeze = 3;
  double failure_threshold = 0.3;
  int archive_cap = 20;
  int val_sample = 30;
  int finetune_epochs = 15;
  double router_regression = 0.03;  // revert threshold on validation F1
  int max_prompt_words = 500;
  std::uint64_t seed = 29;
};

double priority(double mean_f1, double mean_weight, double alpha);

enum class GateReason {
  WithinToleranceAccept,
  RegressionBeyondDelta,
  NoSampleChanged,
  NetDegradation,
};

std::string gate_reason_name(GateReason reason);

struct GateVerdict {
  bool accepted = false;
  double old_mean = 0.0;
  double new_mean = 0.0;
  int n_up = 0;
  int n_down = 0;
  GateReason reason = GateReason::NoSampleChanged;
};

// Accept iff the candidate does not regress past delta on mean F1, changes at
// least one sample, and does not introduce net degradation.
GateVerdict gate(const std::vector<double>& old_scores, const std::vector<double>& new_scores,
                 double delta);

struct RefinementState {
  int round = 0;
  std::map<std::string, int> reject_counters;  // consecutive failed attempts
  std::set<std::string> frozen;
  DiagnosticsBundle diagnostics;
  std::string checkpoint_path;
  double checkpoint_val_f1 = 0.0;
  bool terminable = false;
  bool reverted_last = false;
};

// Role-eligibility filter at thresholds 3, 2, 1, then priority ranking.
std::vector<std::string> select_targets(const DiagnosticsBundle& bundle,
                                        const RefinementState& state, const RefineConfig& config,
                                        const std::vector<std::string>& pool_ids);

class RewriteProvider {
 public:
  virtual ~RewriteProvider() = default;
  virtual std::string rewrite(const AgentSpec& agent, const std::string& evidence,
                              double temperature) = 0;
};

// Deterministic rewriter for tests and offline runs.
class ScriptedRewriter : public RewriteProvider {
 public:
  using Fn = std::function<std::string(const AgentSpec&, double temperature)>;
  explicit ScriptedRewriter(Fn fn) : fn_(std::move(fn)) {}
  std::string rewrite(const AgentSpec& agent, const std::string& /*evidence*/,
                      double temperature) override {
    return fn_(agent, temperature);
  }

 private:
  Fn fn_;
};

class ChatRewriter : public RewriteProvider {
 public:
  ChatRewriter(ChatTransport& transport, std::string model, std::string template_text)
      : transport_(transport), model_(std::move(model)), template_(std::move(template_text)) {}
  std::string rewrite(const AgentSpec& agent, const std::string& evidence,
                      double temperature) override;

 private:
  ChatTransport& transport_;
  std::string model_;
  std::string template_;
};

// Failure evidence block handed to the rewriter: per-category F1 plus
// archived failure cases for the agent.
std::string build_rewrite_evidence(const DiagnosticsBundle& bundle, const std::string& agent_id,
                                   std::size_t max_failures = 8);

// Candidate rewrites at the configured temperatures, validated (non-empty,
// under the word cap) and deduplicated against the current prompt.
std::vector<PromptVersion> generate_candidates(RewriteProvider& rewriter, const AgentSpec& agent,
                                               const DiagnosticsBundle& bundle,
                                               const RefineConfig& config,
                                               const RetryPolicy& retry = {});

// Union of the agent's archived failure instances and a seeded sample of
// validation instances, deduplicated, deterministic for a fixed seed.
std::vector<QAInstance> build_validation_subset(
    const DiagnosticsBundle& bundle, const std::string& agent_id,
    const std::vector<QAInstance>& val_instances,
    const std::map<std::string, QAInstance>& instance_lookup, const RefineConfig& config);

struct JournalRecord {
  int round = 0;
  std::string agent;
  std::string candidate_hash;
  std::string verdict;
  double old_mean = 0.0;
  double new_mean = 0.0;
  int n_up = 0;
  int n_down = 0;
};

std::string journal_record_json(const JournalRecord& rec);

struct RoundContext {
  std::vector<AgentSpec>* pool = nullptr;
  AnswerBackend* backend = nullptr;
  Cache* cache = nullptr;
  RewriteProvider* rewriter = nullptr;
  const std::vector<QAInstance>* train_instances = nullptr;
  const std::vector<QAInstance>* val_instances = nullptr;
  const std::vector<TypedGraph>* train_graphs = nullptr;  // structural, aligned
  const std::vector<TypedGraph>* val_graphs = nullptr;
  const TextEmbedder* embedder = nullptr;
  TrainConfig train_config;
  std::map<std::string, std::string> backbone_of;
  std::filesystem::path run_dir;  // journal + checkpoints; empty = in-memory only
  PoolEvalOptions eval_options;
  RetryPolicy rewrite_retry;
};

struct RoundOutcome {
  std::vector<JournalRecord> journal;
  std::vector<std::string> selected;
  std::vector<std::string> accepted_agents;
  std::vector<std::string> newly_frozen;
  bool reverted = false;
  double new_val_f1 = 0.0;
};

// One co-evolution round: select, rewrite, gate, re-query modified agents,
// fine-tune the router from the current checkpoint, regression-check.
RoundOutcome run_round(RefinementState& state, RoundContext& ctx, const RefineConfig& config);

}  // namespace routeforge
