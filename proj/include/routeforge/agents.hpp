#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "routeforge/dataset.hpp"
#include "routeforge/graph.hpp"

namespace routeforge {

struct PromptVersion {
  std::string text;
  int version = 0;
  std::string hash;  // content digest of text
};

PromptVersion make_prompt_version(const std::string& text, int version);

struct GenParams {
  double temperature = 0.2;
  int max_tokens = 3000;
};

struct AgentSpec {
  std::string backbone;
  std::string role;
  PromptVersion prompt;
  GenParams gen;

  std::string id() const { return backbone + "::" + role; }
};

// pool = backbones x roles, prompts at version 0, sorted by agent id.
std::vector<AgentSpec> make_pool(const std::vector<std::string>& backbones,
                                 const std::vector<std::string>& roles,
                                 const std::string& prompts_dir = "");

const AgentSpec* find_agent(const std::vector<AgentSpec>& pool, const std::string& agent_id);

// ---- prompt-aware answer cache ----------------------------------------------

struct CacheKey {
  std::string agent_id;
  std::string instance_id;
  std::string prompt_hash;
};

struct CacheEntry {
  std::string raw_output;
  std::string parsed_answer;
  double f1 = 0.0;
  bool em = false;
  std::int64_t timestamp = 0;
};

// File-backed append-only store: one JSON file per entry named by the digest
// of the composite key, with an in-memory index loaded at start. Copying the
// directory seeds a new round's cache. A default-constructed cache is
// memory-only.
class Cache {
 public:
  Cache() = default;
  explicit Cache(const std::filesystem::path& dir);

  std::optional<CacheEntry> lookup(const CacheKey& key) const;
  void put(const CacheKey& key, const CacheEntry& entry);
  std::size_t size() const;

  static std::string digest(const CacheKey& key);

 private:
  std::filesystem::path dir_;
  mutable std::mutex mu_;
  std::map<std::string, CacheEntry> index_;
};

// ---- chat transport ----------------------------------------------------------

struct ChatMessage {
  std::string role;  // "system" | "user" | "assistant"
  std::string content;
};

class ChatTransport {
 public:
  virtual ~ChatTransport() = default;
  virtual std::string complete(const std::string& model, const std::vector<ChatMessage>& messages,
                               double temperature, int max_tokens) = 0;
};

// Chat-completion JSON over HTTP; reply text taken from the first choice.
class HttpChatTransport : public ChatTransport {
 public:
  HttpChatTransport(std::string base_url, std::string path, std::string api_key,
                    int timeout_seconds = 120);
  std::string complete(const std::string& model, const std::vector<ChatMessage>& messages,
                       double temperature, int max_tokens) override;

 private:
  std::string base_url_, path_, api_key_;
  int timeout_seconds_;
};

// ---- answer backends ----------------------------------------------------------

class AnswerBackend {
 public:
  virtual ~AnswerBackend() = default;
  // Raw model output for this agent on this instance; multi-turn roles run
  // their full script inside. `cache` holds sub-call entries when non-null.
  virtual std::string answer(const AgentSpec& agent, const QAInstance& instance, Cache* cache) = 0;

  std::uint64_t transport_calls() const { return transport_calls_.load(); }
  std::uint64_t logical_calls() const { return logical_calls_.load(); }
  void note_logical_call() { logical_calls_.fetch_add(1); }

 protected:
  void note_transport_call() { transport_calls_.fetch_add(1); }

 private:
  std::atomic<std::uint64_t> transport_calls_{0};
  std::atomic<std::uint64_t> logical_calls_{0};
};

struct SyntheticProfile {
  std::map<std::string, double> competence;  // by question category
  double default_competence = 0.35;

  double get(const std::string& category) const;
};

// Hermetic test double: emits the gold answer with the profile's competence
// for the instance category, otherwise a deterministic distractor. A prompt
// containing the degrade marker switches the agent to the degraded profile.
class SyntheticBackend : public AnswerBackend {
 public:
  explicit SyntheticBackend(std::uint64_t seed) : seed_(seed) {}

  void set_profile(const std::string& agent_id, SyntheticProfile profile);
  void set_degraded_competence(double c) { degraded_competence_ = c; }
  void set_degrade_marker(std::string marker) { degrade_marker_ = std::move(marker); }
  void set_distractor_classes(int n) { distractor_classes_ = n; }
  const std::string& degrade_marker() const { return degrade_marker_; }

  std::string answer(const AgentSpec& agent, const QAInstance& instance, Cache* cache) override;

 private:
  std::uint64_t seed_;
  std::map<std::string, SyntheticProfile> profiles_;
  std::string degrade_marker_ = "[[degraded]]";
  double degraded_competence_ = 0.2;
  int distractor_classes_ = 3;
};

// Live backend: composes the system wrapper with the role prompt and runs the
// fixed multi-turn scripts (debate, react-reflect, think/summarize) keyed off
// the prompt's sections. Sub-calls cache under "<agent>#<tag>".
class ChatAnswerBackend : public AnswerBackend {
 public:
  ChatAnswerBackend(ChatTransport& transport, std::map<std::string, std::string> model_by_backbone,
                    std::string system_wrapper);

  std::string answer(const AgentSpec& agent, const QAInstance& instance, Cache* cache) override;

  // One "list the entities you attend to" call, cached under #views.
  std::set<std::size_t> entity_view(const AgentSpec& agent, const QAInstance& instance,
                                    const std::vector<EntityMention>& entities, Cache* cache);

 private:
  std::string sub_call(const AgentSpec& agent, const QAInstance& instance, Cache* cache,
                       const std::string& tag, const std::string& sub_prompt,
                       const std::string& user_content);

  ChatTransport& transport_;
  std::map<std::string, std::string> model_by_backbone_;
  std::string system_wrapper_;
};

// ---- invocation ----------------------------------------------------------------

// Resolution order: last JSON object with an "answer" key, last \boxed{...}
// span, last non-empty line. Result truncated to 12 words. Total.
std::string parse_answer(const std::string& raw);

struct RetryPolicy {
  int attempts = 3;
  int base_backoff_ms = 100;
};

struct InvokeResult {
  std::string answer;
  std::string raw;
  bool cached = false;
};

InvokeResult invoke(const AgentSpec& agent, const QAInstance& instance, Cache& cache,
                    AnswerBackend& backend, const RetryPolicy& retry = {});

// ---- pool evaluation -------------------------------------------------------------

struct PoolEvalOptions {
  int concurrency = 1;
  double missing_threshold = 0.01;
  RetryPolicy retry;
};

struct PoolEvalResult {
  std::vector<std::string> agent_ids;
  std::vector<std::string> instance_ids;
  std::map<std::string, std::map<std::string, Score>> scores;        // agent -> instance
  std::map<std::string, std::map<std::string, std::string>> answers; // agent -> instance
  std::vector<std::pair<std::string, std::string>> missing;          // (agent, instance)

  double mean_f1(const std::string& agent_id) const;
};

PoolEvalResult evaluate_pool(const std::vector<AgentSpec>& pool,
                             const std::vector<QAInstance>& instances, Cache& cache,
                             AnswerBackend& backend, const PoolEvalOptions& options = {});

// ---- agent-entity view providers ---------------------------------------------------

class AgentViewProvider {
 public:
  virtual ~AgentViewProvider() = default;
  virtual std::map<std::string, std::set<std::size_t>> views(
      const std::vector<AgentSpec>& pool, const QAInstance& instance,
      const std::vector<EntityMention>& entities) = 0;
};

// Offline rule: agent attends to an entity iff a seeded hash of
// (agent, surface) falls under `rate`.
class SeededViewProvider : public AgentViewProvider {
 public:
  SeededViewProvider(std::uint64_t seed, double rate = 0.3) : seed_(seed), rate_(rate) {}
  std::map<std::string, std::set<std::size_t>> views(
      const std::vector<AgentSpec>& pool, const QAInstance& instance,
      const std::vector<EntityMention>& entities) override;

 private:
  std::uint64_t seed_;
  double rate_;
};

class ChatViewProvider : public AgentViewProvider {
 public:
  ChatViewProvider(ChatAnswerBackend& backend, Cache& cache) : backend_(backend), cache_(cache) {}
  std::map<std::string, std::set<std::size_t>> views(
      const std::vector<AgentSpec>& pool, const QAInstance& instance,
      const std::vector<EntityMention>& entities) override;

 private:
  ChatAnswerBackend& backend_;
  Cache& cache_;
};

// Text an agent node embeds: "backbone role" plus the first 256 characters of
// the current prompt, so prompt edits shift agent features.
std::map<std::string, std::string> agent_embed_texts(const std::vector<AgentSpec>& pool);

}  // namespace routeforge
