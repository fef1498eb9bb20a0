#include "routeforge/graph.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <tuple>

#include <json.hpp>

namespace routeforge {

namespace {

// Graph-side normalization: lowercase, strip punctuation, collapse whitespace.
// Unlike answer normalization this keeps articles (entity surfaces may carry
// them meaningfully).
std::string surface_normalize(std::string_view s) {
  static const std::string punct = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
  std::string lowered;
  lowered.reserve(s.size());
  for (char c : s) {
    char lc = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (punct.find(lc) == std::string::npos) lowered.push_back(lc);
  }
  return collapse_ws(lowered);
}

bool token_occurs(const std::string& normalized_text, const std::string& normalized_needle) {
  if (normalized_needle.empty()) return false;
  const std::string hay = " " + normalized_text + " ";
  const std::string needle = " " + normalized_needle + " ";
  return hay.find(needle) != std::string::npos;
}

struct RawToken {
  std::size_t start = 0;  // trimmed bounds
  std::size_t end = 0;
  bool capitalized = false;
  bool trailing_punct = false;  // raw token ends with non-alnum; breaks runs
};

}  // namespace

std::string node_type_name(NodeType t) {
  switch (t) {
    case NodeType::Query: return "query";
    case NodeType::Agent: return "agent";
    case NodeType::Entity: return "entity";
  }
  return "entity";
}

NodeType node_type_from_name(const std::string& s) {
  if (s == "query") return NodeType::Query;
  if (s == "agent") return NodeType::Agent;
  if (s == "entity") return NodeType::Entity;
  fail_data("unknown node type: " + s);
}

std::string relation_name(Relation r) {
  switch (r) {
    case Relation::QueryEntity: return "query-entity";
    case Relation::EntityEntity: return "entity-entity";
    case Relation::AgentEntity: return "agent-entity";
    case Relation::QueryAgent: return "query-agent";
  }
  return "query-agent";
}

Relation relation_from_name(const std::string& s) {
  if (s == "query-entity") return Relation::QueryEntity;
  if (s == "entity-entity") return Relation::EntityEntity;
  if (s == "agent-entity") return Relation::AgentEntity;
  if (s == "query-agent") return Relation::QueryAgent;
  fail_data("unknown relation: " + s);
}

int TypedGraph::query_index() const {
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].type == NodeType::Query) return static_cast<int>(i);
  }
  fail_data("graph has no query node");
}

std::vector<int> TypedGraph::agent_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].type == NodeType::Agent) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::vector<int> TypedGraph::entity_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].type == NodeType::Entity) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::vector<std::string> TypedGraph::agent_ids() const {
  std::vector<std::string> out;
  for (const auto& n : nodes) {
    if (n.type == NodeType::Agent) {
      // agent node ids carry the "a::" prefix
      out.push_back(n.id.size() > 3 && n.id.rfind("a::", 0) == 0 ? n.id.substr(3) : n.id);
    }
  }
  return out;
}

std::size_t TypedGraph::feature_dim() const {
  for (const auto& n : nodes) {
    if (!n.feat.empty()) return n.feat.size();
  }
  return 0;
}

void TypedGraph::validate() const {
  int query_count = 0;
  std::set<std::string> ids;
  for (const auto& n : nodes) {
    if (n.type == NodeType::Query) ++query_count;
    if (!ids.insert(n.id).second) fail_data("graph: duplicate node id " + n.id);
  }
  if (query_count != 1) {
    fail_data("graph: expected exactly one query node, found " + std::to_string(query_count));
  }

  const std::size_t dim = feature_dim();
  for (const auto& n : nodes) {
    if (!n.feat.empty() && n.feat.size() != dim) {
      fail_data("graph: inconsistent feature dimension at node " + n.id);
    }
    if (dim > 0 && n.feat.empty()) {
      fail_data("graph: node " + n.id + " missing features while others have them");
    }
  }

  const int n_nodes = static_cast<int>(nodes.size());
  std::set<std::tuple<int, int, int>> qa_pairs;
  for (const auto& e : edges) {
    if (e.src < 0 || e.src >= n_nodes || e.dst < 0 || e.dst >= n_nodes) {
      fail_data("graph: edge references missing node");
    }
    if (e.src == e.dst) fail_data("graph: self-loop at node " + nodes[e.src].id);
    const NodeType st = nodes[e.src].type;
    const NodeType dt = nodes[e.dst].type;
    auto pair_ok = [&](NodeType a, NodeType b) {
      return (st == a && dt == b) || (st == b && dt == a);
    };
    bool ok = false;
    switch (e.rel) {
      case Relation::QueryEntity: ok = pair_ok(NodeType::Query, NodeType::Entity); break;
      case Relation::EntityEntity: ok = st == NodeType::Entity && dt == NodeType::Entity; break;
      case Relation::AgentEntity: ok = pair_ok(NodeType::Agent, NodeType::Entity); break;
      case Relation::QueryAgent: ok = pair_ok(NodeType::Query, NodeType::Agent); break;
    }
    if (!ok) {
      fail_data("graph: relation " + relation_name(e.rel) + " does not match endpoint types (" +
                nodes[e.src].id + " -> " + nodes[e.dst].id + ")");
    }
    if (e.rel == Relation::QueryAgent) {
      qa_pairs.insert({e.src, 0, e.dst});
    }
  }

  // the trainable query-agent connections must exist in both directions
  const int q = query_index();
  for (int a : agent_indices()) {
    if (!qa_pairs.count({q, 0, a}) || !qa_pairs.count({a, 0, q})) {
      fail_data("graph: missing query-agent edge for " + nodes[a].id);
    }
  }
}

std::vector<EntityMention> CapitalizedRunExtractor::extract(const std::string& context) const {
  std::vector<RawToken> tokens;
  std::size_t i = 0;
  const std::size_t n = context.size();
  while (i < n) {
    while (i < n && std::isspace(static_cast<unsigned char>(context[i]))) ++i;
    std::size_t start = i;
    while (i < n && !std::isspace(static_cast<unsigned char>(context[i]))) ++i;
    if (i == start) continue;
    std::size_t e = i;
    // trim surrounding punctuation
    std::size_t ts = start, te = e;
    while (ts < te && !std::isalnum(static_cast<unsigned char>(context[ts]))) ++ts;
    while (te > ts && !std::isalnum(static_cast<unsigned char>(context[te - 1]))) --te;
    if (ts == te) continue;
    RawToken tok;
    tok.start = ts;
    tok.end = te;
    tok.capitalized = std::isupper(static_cast<unsigned char>(context[ts])) != 0;
    tok.trailing_punct = te < e;
    tokens.push_back(tok);
  }

  std::vector<EntityMention> runs;
  std::size_t k = 0;
  while (k < tokens.size()) {
    if (!tokens[k].capitalized) {
      ++k;
      continue;
    }
    std::size_t run_start = tokens[k].start;
    std::size_t run_end = tokens[k].end;
    // a trailing-punctuation token (e.g. sentence end) terminates the run
    while (!tokens[k].trailing_punct && k + 1 < tokens.size() && tokens[k + 1].capitalized) {
      ++k;
      run_end = tokens[k].end;
    }
    EntityMention m;
    m.start = run_start;
    m.end = run_end;
    m.surface = collapse_ws(context.substr(run_start, run_end - run_start));
    runs.push_back(std::move(m));
    ++k;
  }

  std::vector<EntityMention> out;
  std::set<std::string> seen;
  for (auto& m : runs) {
    if (out.size() >= max_entities_) break;
    std::string key = surface_normalize(m.surface);
    if (key.empty()) continue;
    if (seen.insert(key).second) out.push_back(std::move(m));
  }
  return out;
}

std::vector<double> HashingEmbedder::embed(const std::string& text) const {
  std::vector<double> v(dim_, 0.0);
  for (const auto& tok : split_ws(lower_copy(text))) {
    const std::uint64_t h = fnv1a64(tok);
    const std::size_t bucket = static_cast<std::size_t>(h % dim_);
    const double sign = ((h >> 17) & 1ULL) ? 1.0 : -1.0;
    v[bucket] += sign;
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  if (norm == 0.0) {
    v[0] = 1.0;
    return v;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

TypedGraph build_graph(const QAInstance& instance, const std::vector<EntityMention>& entities,
                       const std::map<std::string, std::set<std::size_t>>& agent_views,
                       const std::vector<std::string>& pool_agent_ids,
                       const GraphBuildOptions& options) {
  std::vector<std::string> agents(pool_agent_ids);
  std::sort(agents.begin(), agents.end());

  std::set<std::string> pool_set(agents.begin(), agents.end());
  for (const auto& [agent_id, view] : agent_views) {
    if (!pool_set.count(agent_id)) {
      fail_data("build_graph: agent view for unknown agent " + agent_id);
    }
    for (std::size_t idx : view) {
      if (idx >= entities.size()) {
        fail_data("build_graph: entity index " + std::to_string(idx) + " out of range for agent " +
                  agent_id);
      }
    }
  }

  std::vector<EntityMention> ents(entities);
  std::stable_sort(ents.begin(), ents.end(),
                   [](const EntityMention& a, const EntityMention& b) { return a.start < b.start; });
  // map original indices (used by agent_views) to sorted positions
  std::vector<std::size_t> sorted_pos(entities.size());
  {
    std::vector<std::size_t> order(entities.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return entities[a].start < entities[b].start;
    });
    for (std::size_t pos = 0; pos < order.size(); ++pos) sorted_pos[order[pos]] = pos;
  }

  TypedGraph g;
  GraphNode qn;
  qn.id = "q::" + instance.id;
  qn.type = NodeType::Query;
  qn.label = instance.question;
  g.nodes.push_back(std::move(qn));

  for (const auto& a : agents) {
    GraphNode an;
    an.id = "a::" + a;
    an.type = NodeType::Agent;
    std::string label = a;
    auto sep = label.find("::");
    if (sep != std::string::npos) label = label.substr(0, sep) + " " + label.substr(sep + 2);
    an.label = label;
    g.nodes.push_back(std::move(an));
  }

  std::set<std::string> ent_ids;
  for (const auto& m : ents) {
    GraphNode en;
    std::string base = "e::" + surface_normalize(m.surface);
    std::string id = base;
    int suffix = 1;
    while (!ent_ids.insert(id).second) id = base + "#" + std::to_string(suffix++);
    en.id = id;
    en.type = NodeType::Entity;
    en.label = m.surface;
    g.nodes.push_back(std::move(en));
  }

  const int q = 0;
  const int n_agents = static_cast<int>(agents.size());
  auto agent_node = [&](const std::string& id) {
    auto it = std::lower_bound(agents.begin(), agents.end(), id);
    return 1 + static_cast<int>(it - agents.begin());
  };
  auto entity_node = [&](std::size_t sorted_idx) { return 1 + n_agents + static_cast<int>(sorted_idx); };

  std::set<std::tuple<int, int, int>> seen;
  auto add_undirected = [&](int u, Relation rel, int v) {
    if (u == v) return;
    if (seen.insert({u, static_cast<int>(rel), v}).second) {
      g.edges.push_back({u, rel, v});
    }
    if (seen.insert({v, static_cast<int>(rel), u}).second) {
      g.edges.push_back({v, rel, u});
    }
  };

  for (int a = 0; a < n_agents; ++a) add_undirected(q, Relation::QueryAgent, 1 + a);

  const std::string norm_question = surface_normalize(instance.question);
  for (std::size_t i = 0; i < ents.size(); ++i) {
    if (token_occurs(norm_question, surface_normalize(ents[i].surface))) {
      add_undirected(q, Relation::QueryEntity, entity_node(i));
    }
  }

  for (std::size_t i = 0; i < ents.size(); ++i) {
    for (std::size_t j = i + 1; j < ents.size(); ++j) {
      const std::size_t gap =
          ents[j].start >= ents[i].start ? ents[j].start - ents[i].start : ents[i].start - ents[j].start;
      if (gap <= options.cooccur_window) {
        add_undirected(entity_node(i), Relation::EntityEntity, entity_node(j));
      }
    }
  }

  for (const auto& [agent_id, view] : agent_views) {
    for (std::size_t idx : view) {
      add_undirected(agent_node(agent_id), Relation::AgentEntity, entity_node(sorted_pos[idx]));
    }
  }

  std::sort(g.edges.begin(), g.edges.end(), [](const GraphEdge& a, const GraphEdge& b) {
    return std::tie(a.src, a.rel, a.dst) < std::tie(b.src, b.rel, b.dst);
  });
  g.validate();
  return g;
}

void embed_graph(TypedGraph& graph, const TextEmbedder& embedder,
                 const std::map<std::string, std::string>& agent_texts) {
  for (auto& node : graph.nodes) {
    std::string text = node.label;
    if (node.type == NodeType::Agent) {
      const std::string agent_id = node.id.rfind("a::", 0) == 0 ? node.id.substr(3) : node.id;
      auto it = agent_texts.find(agent_id);
      if (it != agent_texts.end()) text = it->second;
    }
    std::vector<double> v;
    try {
      v = embedder.embed(text);
    } catch (const std::exception& e) {
      fail_backend("embedding failed for node " + node.id + ": " + e.what());
    }
    if (v.size() != embedder.dim()) {
      fail_backend("embedder returned wrong dimension for node " + node.id);
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    if (norm == 0.0) {
      v[0] = 1.0;
    } else {
      norm = std::sqrt(norm);
      for (double& x : v) x /= norm;
    }
    node.feat = std::move(v);
  }
  graph.validate();
}

std::string serialize_graph(const TypedGraph& graph) {
  nlohmann::ordered_json doc;
  doc["version"] = kGraphFormatVersion;
  doc["nodes"] = nlohmann::ordered_json::array();
  for (const auto& n : graph.nodes) {
    nlohmann::ordered_json jn;
    jn["id"] = n.id;
    jn["type"] = node_type_name(n.type);
    jn["label"] = n.label;
    jn["feat"] = n.feat;
    doc["nodes"].push_back(std::move(jn));
  }
  doc["edges"] = nlohmann::ordered_json::array();
  for (const auto& e : graph.edges) {
    nlohmann::ordered_json je;
    je["src"] = graph.nodes[e.src].id;
    je["rel"] = relation_name(e.rel);
    je["dst"] = graph.nodes[e.dst].id;
    doc["edges"].push_back(std::move(je));
  }
  return doc.dump();
}

TypedGraph deserialize_graph(const std::string& bytes) {
  nlohmann::json doc = nlohmann::json::parse(bytes, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) fail_data("graph: not a JSON object");
  if (!doc.contains("version") || !doc["version"].is_string()) fail_data("graph: missing version tag");
  if (doc["version"].get<std::string>() != kGraphFormatVersion) {
    fail_data("graph: unknown version tag '" + doc["version"].get<std::string>() + "'");
  }

  TypedGraph g;
  std::map<std::string, int> index_of;
  for (const auto& jn : doc.value("nodes", nlohmann::json::array())) {
    GraphNode n;
    n.id = jn.at("id").get<std::string>();
    n.type = node_type_from_name(jn.at("type").get<std::string>());
    n.label = jn.value("label", std::string());
    if (jn.contains("feat")) n.feat = jn.at("feat").get<std::vector<double>>();
    index_of[n.id] = static_cast<int>(g.nodes.size());
    g.nodes.push_back(std::move(n));
  }
  for (const auto& je : doc.value("edges", nlohmann::json::array())) {
    const std::string src = je.at("src").get<std::string>();
    const std::string dst = je.at("dst").get<std::string>();
    auto si = index_of.find(src);
    auto di = index_of.find(dst);
    if (si == index_of.end() || di == index_of.end()) {
      fail_data("graph: edge references missing node " + (si == index_of.end() ? src : dst));
    }
    g.edges.push_back({static_cast<std::int32_t>(si->second),
                       relation_from_name(je.at("rel").get<std::string>()),
                       static_cast<std::int32_t>(di->second)});
  }
  g.validate();
  return g;
}

void save_graph(const TypedGraph& graph, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_data("cannot write graph file: " + path);
  out << serialize_graph(graph);
}

TypedGraph load_graph(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_data("cannot open graph file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_graph(ss.str());
}

}  // namespace routeforge
