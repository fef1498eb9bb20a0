#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "routeforge/dataset.hpp"

namespace routeforge {

enum class NodeType { Query, Agent, Entity };
enum class Relation { QueryEntity, EntityEntity, AgentEntity, QueryAgent };

inline constexpr int kRelationCount = 4;

std::string node_type_name(NodeType t);
NodeType node_type_from_name(const std::string& s);
std::string relation_name(Relation r);
Relation relation_from_name(const std::string& s);

struct GraphNode {
  std::string id;
  NodeType type = NodeType::Entity;
  std::string label;          // query: question text; agent: "backbone role"; entity: surface
  std::vector<double> feat;   // empty until embedded
};

struct GraphEdge {
  std::int32_t src = 0;
  Relation rel = Relation::QueryAgent;
  std::int32_t dst = 0;
};

// Heterogeneous graph over one QA instance. Node order is fixed: the query
// node first, then agent nodes sorted by agent id, then entity nodes by first
// span offset. Undirected relations are materialized in both directions.
struct TypedGraph {
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;

  int query_index() const;
  std::vector<int> agent_indices() const;
  std::vector<int> entity_indices() const;
  std::vector<std::string> agent_ids() const;
  std::size_t feature_dim() const;

  // Throws Error(Data) on any structural violation.
  void validate() const;
};

struct EntityMention {
  std::string surface;       // whitespace-collapsed context substring
  std::size_t start = 0;     // character offsets into the raw context
  std::size_t end = 0;
};

class EntityExtractor {
 public:
  virtual ~EntityExtractor() = default;
  virtual std::vector<EntityMention> extract(const std::string& context) const = 0;
};

// Built-in rule: maximal runs of capitalized tokens, deduplicated by
// normalized surface, capped at max_entities, ordered by first offset.
class CapitalizedRunExtractor : public EntityExtractor {
 public:
  explicit CapitalizedRunExtractor(std::size_t max_entities = 64) : max_entities_(max_entities) {}
  std::vector<EntityMention> extract(const std::string& context) const override;

 private:
  std::size_t max_entities_;
};

class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual std::size_t dim() const = 0;
  virtual std::vector<double> embed(const std::string& text) const = 0;
};

// Sign feature hashing of lowercased tokens, L2-normalized. Deterministic and
// dependency-free; an external embedding service can be dropped in behind the
// same interface.
class HashingEmbedder : public TextEmbedder {
 public:
  explicit HashingEmbedder(std::size_t dim = 256) : dim_(dim) {}
  std::size_t dim() const override { return dim_; }
  std::vector<double> embed(const std::string& text) const override;

 private:
  std::size_t dim_;
};

struct GraphBuildOptions {
  std::size_t cooccur_window = 200;  // chars between span starts for entity-entity edges
};

// agent_views: agent id -> indices into `entities` that the agent attends to.
TypedGraph build_graph(const QAInstance& instance, const std::vector<EntityMention>& entities,
                       const std::map<std::string, std::set<std::size_t>>& agent_views,
                       const std::vector<std::string>& pool_agent_ids,
                       const GraphBuildOptions& options = {});

// Fills node features: the query node embeds the question, entity nodes their
// surfaces, agent nodes the text from agent_texts (falls back to the node
// label). All vectors come out L2-normalized. Re-embedding is idempotent.
void embed_graph(TypedGraph& graph, const TextEmbedder& embedder,
                 const std::map<std::string, std::string>& agent_texts = {});

inline constexpr const char* kGraphFormatVersion = "graph-v1";

std::string serialize_graph(const TypedGraph& graph);
TypedGraph deserialize_graph(const std::string& bytes);

void save_graph(const TypedGraph& graph, const std::string& path);
TypedGraph load_graph(const std::string& path);

}  // namespace routeforge
