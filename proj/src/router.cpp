#include "routeforge/router.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "routeforge/voting.hpp"

namespace routeforge {

namespace {

constexpr double kNormEps = 1e-5;

const char* kTypeNames[3] = {"query", "agent", "entity"};
const char* kRelNames[kRelationCount] = {"query-entity", "entity-entity", "agent-entity",
                                         "query-agent"};

int type_index(NodeType t) {
  switch (t) {
    case NodeType::Query: return 0;
    case NodeType::Agent: return 1;
    case NodeType::Entity: return 2;
  }
  return 2;
}

struct TensorShape {
  std::string name;
  std::size_t rows, cols;
};

std::vector<TensorShape> expected_shapes(int feat_dim, int hidden, int layers,
                                         const std::vector<std::string>& categories) {
  const auto h = static_cast<std::size_t>(hidden);
  const auto d = static_cast<std::size_t>(feat_dim);
  std::vector<TensorShape> shapes;
  for (const char* t : kTypeNames) shapes.push_back({std::string("proj.") + t, h, d});
  for (int l = 1; l <= layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    for (const char* r : kRelNames) {
      shapes.push_back({prefix + "msg." + r, h, h});
      shapes.push_back({prefix + "gate." + r, 1, 1});
    }
    for (const char* t : kTypeNames) {
      shapes.push_back({prefix + "update." + t, h, 2 * h});
      shapes.push_back({prefix + "update_bias." + t, h, 1});
      shapes.push_back({prefix + "norm_gamma." + t, h, 1});
      shapes.push_back({prefix + "norm_beta." + t, h, 1});
    }
  }
  shapes.push_back({"score.w1", h, 2 * h});
  shapes.push_back({"score.b1", h, 1});
  shapes.push_back({"score.w2", 1, h});
  shapes.push_back({"score.b2", 1, 1});
  if (!categories.empty()) {
    shapes.push_back({"aux.w", categories.size(), h});
    shapes.push_back({"aux.b", categories.size(), 1});
  }
  return shapes;
}

// Everything backward needs from a forward pass.
struct ForwardTrace {
  std::vector<int> node_type;                              // per node
  std::vector<std::vector<std::vector<int>>> in_nbrs;      // [rel][node] -> sources
  std::vector<std::vector<double>> h0;
  struct Layer {
    std::vector<std::vector<std::vector<double>>> mbar;    // [rel][node]; empty when unused
    std::vector<std::vector<double>> merged;
    std::vector<std::vector<double>> z;                    // pre-relu
    std::vector<std::vector<double>> r;                    // post-relu, pre-norm
    std::vector<std::vector<double>> xhat;                 // empty when affine-only
    std::vector<std::vector<double>> inv_std;              // per type index, empty if not standardized
    std::vector<std::vector<double>> mask;                 // dropout scale factors
    std::vector<std::vector<double>> h_out;
  };
  std::vector<Layer> layer;
  std::vector<int> agent_nodes;
  int query_node = 0;
  std::vector<std::string> agent_ids;
  // scorer intermediates, per agent
  std::vector<std::vector<double>> score_hidden_pre;       // a1 = w1 x + b1
  std::vector<double> scores;
  std::vector<double> probs;
  std::vector<double> log_probs;
  std::vector<double> aux_logits;
};

const Tensor& tensor_of(const RouterParams& p, const std::string& name) {
  auto it = p.tensors.find(name);
  if (it == p.tensors.end()) fail_data("router: missing parameter tensor " + name);
  return it->second;
}

std::vector<double> softmax_stable(const std::vector<double>& scores, std::vector<double>* log_probs) {
  double mx = scores[0];
  for (double s : scores) mx = std::max(mx, s);
  double sum = 0.0;
  std::vector<double> ex(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    ex[i] = std::exp(scores[i] - mx);
    sum += ex[i];
  }
  const double lse = mx + std::log(sum);
  std::vector<double> p(scores.size());
  if (log_probs) log_probs->resize(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    p[i] = ex[i] / sum;
    if (log_probs) (*log_probs)[i] = scores[i] - lse;
  }
  return p;
}

ForwardTrace run_forward(const RouterParams& params, const TypedGraph& graph, RouterMode mode,
                         std::uint64_t dropout_seed, double dropout_rate) {
  graph.validate();
  const std::size_t dim = graph.feature_dim();
  if (dim != static_cast<std::size_t>(params.feat_dim)) {
    fail_data("router: graph feature dimension " + std::to_string(dim) +
              " does not match params feat_dim " + std::to_string(params.feat_dim));
  }
  const std::size_t n_nodes = graph.nodes.size();
  const std::size_t h = static_cast<std::size_t>(params.hidden);

  ForwardTrace t;
  t.node_type.resize(n_nodes);
  for (std::size_t v = 0; v < n_nodes; ++v) t.node_type[v] = type_index(graph.nodes[v].type);
  t.query_node = graph.query_index();
  for (int a : graph.agent_indices()) t.agent_nodes.push_back(a);
  t.agent_ids = graph.agent_ids();

  t.in_nbrs.assign(kRelationCount, std::vector<std::vector<int>>(n_nodes));
  for (const auto& e : graph.edges) {
    t.in_nbrs[static_cast<int>(e.rel)][e.dst].push_back(e.src);
  }

  // type-specific input projection into the shared latent space
  t.h0.resize(n_nodes);
  for (std::size_t v = 0; v < n_nodes; ++v) {
    const Tensor& proj = tensor_of(params, std::string("proj.") + kTypeNames[t.node_type[v]]);
    matvec(proj, graph.nodes[v].feat, t.h0[v]);
  }

  const std::vector<std::vector<double>>* h_prev = &t.h0;
  t.layer.resize(params.layers);
  for (int l = 1; l <= params.layers; ++l) {
    auto& L = t.layer[l - 1];
    const std::string prefix = "layer" + std::to_string(l) + ".";

    // relation messages, mean-aggregated; W_r h_u computed once per source
    L.mbar.assign(kRelationCount, std::vector<std::vector<double>>(n_nodes));
    std::vector<std::vector<std::vector<double>>> msg_cache(
        kRelationCount, std::vector<std::vector<double>>(n_nodes));
    for (int r = 0; r < kRelationCount; ++r) {
      const Tensor& w = tensor_of(params, prefix + "msg." + kRelNames[r]);
      for (std::size_t v = 0; v < n_nodes; ++v) {
        const auto& srcs = t.in_nbrs[r][v];
        if (srcs.empty()) continue;
        std::vector<double> acc(h, 0.0);
        for (int u : srcs) {
          auto& cached = msg_cache[r][static_cast<std::size_t>(u)];
          if (cached.empty()) matvec(w, (*h_prev)[static_cast<std::size_t>(u)], cached);
          for (std::size_t j = 0; j < h; ++j) acc[j] += cached[j];
        }
        const double inv = 1.0 / static_cast<double>(srcs.size());
        for (std::size_t j = 0; j < h; ++j) acc[j] *= inv;
        L.mbar[r][v] = std::move(acc);
      }
    }

    // merge relations with gate scalars, then the type-specific update
    L.merged.assign(n_nodes, std::vector<double>(h, 0.0));
    L.z.resize(n_nodes);
    L.r.resize(n_nodes);
    for (std::size_t v = 0; v < n_nodes; ++v) {
      for (int r = 0; r < kRelationCount; ++r) {
        if (L.mbar[r][v].empty()) continue;
        const double gate = tensor_of(params, prefix + "gate." + kRelNames[r]).data[0];
        for (std::size_t j = 0; j < h; ++j) L.merged[v][j] += gate * L.mbar[r][v][j];
      }
      const Tensor& u = tensor_of(params, prefix + "update." + kTypeNames[t.node_type[v]]);
      const Tensor& b = tensor_of(params, prefix + "update_bias." + kTypeNames[t.node_type[v]]);
      std::vector<double> cat(2 * h);
      std::memcpy(cat.data(), (*h_prev)[v].data(), h * sizeof(double));
      std::memcpy(cat.data() + h, L.merged[v].data(), h * sizeof(double));
      matvec(u, cat, L.z[v]);
      for (std::size_t j = 0; j < h; ++j) L.z[v][j] += b.data[j];
      L.r[v].resize(h);
      for (std::size_t j = 0; j < h; ++j) L.r[v][j] = L.z[v][j] > 0.0 ? L.z[v][j] : 0.0;
    }

    // per-type normalization: standardize over nodes of the type, then affine;
    // a type with a single node gets the affine only
    L.xhat.assign(n_nodes, {});
    L.inv_std.assign(3, {});
    L.h_out.resize(n_nodes);
    std::vector<std::vector<std::size_t>> by_type(3);
    for (std::size_t v = 0; v < n_nodes; ++v) by_type[static_cast<std::size_t>(t.node_type[v])].push_back(v);
    for (int ty = 0; ty < 3; ++ty) {
      const auto& members = by_type[static_cast<std::size_t>(ty)];
      if (members.empty()) continue;
      const Tensor& gamma = tensor_of(params, prefix + "norm_gamma." + kTypeNames[ty]);
      const Tensor& beta = tensor_of(params, prefix + "norm_beta." + kTypeNames[ty]);
      if (members.size() == 1) {
        const std::size_t v = members[0];
        L.h_out[v].resize(h);
        for (std::size_t j = 0; j < h; ++j) {
          L.h_out[v][j] = gamma.data[j] * L.r[v][j] + beta.data[j];
        }
        continue;
      }
      const double inv_n = 1.0 / static_cast<double>(members.size());
      std::vector<double> mu(h, 0.0), var(h, 0.0);
      for (std::size_t v : members) {
        for (std::size_t j = 0; j < h; ++j) mu[j] += L.r[v][j];
      }
      for (std::size_t j = 0; j < h; ++j) mu[j] *= inv_n;
      for (std::size_t v : members) {
        for (std::size_t j = 0; j < h; ++j) {
          const double d = L.r[v][j] - mu[j];
          var[j] += d * d;
        }
      }
      auto& inv_std = L.inv_std[static_cast<std::size_t>(ty)];
      inv_std.resize(h);
      for (std::size_t j = 0; j < h; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] * inv_n + kNormEps);
      for (std::size_t v : members) {
        L.xhat[v].resize(h);
        L.h_out[v].resize(h);
        for (std::size_t j = 0; j < h; ++j) {
          const double xh = (L.r[v][j] - mu[j]) * inv_std[j];
          L.xhat[v][j] = xh;
          L.h_out[v][j] = gamma.data[j] * xh + beta.data[j];
        }
      }
    }

    // inverted dropout, train mode only
    L.mask.assign(n_nodes, {});
    if (mode == RouterMode::Train && dropout_rate > 0.0) {
      Rng drop_rng(mix64(dropout_seed + 0x9e37 * static_cast<std::uint64_t>(l)));
      const double keep = 1.0 - dropout_rate;
      for (std::size_t v = 0; v < n_nodes; ++v) {
        L.mask[v].resize(h);
        for (std::size_t j = 0; j < h; ++j) {
          const double factor = drop_rng.next_unit() < keep ? 1.0 / keep : 0.0;
          L.mask[v][j] = factor;
          L.h_out[v][j] *= factor;
        }
      }
    }

    h_prev = &L.h_out;
  }

  // score every (query, agent) pair with the two-layer perceptron head
  const auto& h_final = *h_prev;
  const Tensor& w1 = tensor_of(params, "score.w1");
  const Tensor& b1 = tensor_of(params, "score.b1");
  const Tensor& w2 = tensor_of(params, "score.w2");
  const Tensor& b2 = tensor_of(params, "score.b2");
  const auto& hq = h_final[static_cast<std::size_t>(t.query_node)];
  t.score_hidden_pre.resize(t.agent_nodes.size());
  t.scores.resize(t.agent_nodes.size());
  for (std::size_t i = 0; i < t.agent_nodes.size(); ++i) {
    std::vector<double> cat(2 * h);
    std::memcpy(cat.data(), hq.data(), h * sizeof(double));
    std::memcpy(cat.data() + h, h_final[static_cast<std::size_t>(t.agent_nodes[i])].data(),
                h * sizeof(double));
    std::vector<double>& a1 = t.score_hidden_pre[i];
    matvec(w1, cat, a1);
    for (std::size_t j = 0; j < h; ++j) a1[j] += b1.data[j];
    double s = b2.data[0];
    for (std::size_t j = 0; j < h; ++j) s += w2.data[j] * (a1[j] > 0.0 ? a1[j] : 0.0);
    t.scores[i] = s;
  }
  t.probs = softmax_stable(t.scores, &t.log_probs);

  if (!params.categories.empty()) {
    const Tensor& aw = tensor_of(params, "aux.w");
    const Tensor& ab = tensor_of(params, "aux.b");
    matvec(aw, hq, t.aux_logits);
    for (std::size_t c = 0; c < t.aux_logits.size(); ++c) t.aux_logits[c] += ab.data[c];
  }
  return t;
}

RoutingDistribution trace_to_distribution(const ForwardTrace& t, const RouterParams& params) {
  RoutingDistribution d;
  d.agent_ids = t.agent_ids;
  d.scores = t.scores;
  d.probs = t.probs;
  d.aux_logits = t.aux_logits;
  if (!t.aux_logits.empty()) d.aux_categories = params.categories;
  return d;
}

struct LossGradients {
  LossBreakdown breakdown;
  std::vector<double> d_scores;       // same order as dist agents
  std::vector<double> d_aux_logits;   // empty when aux inactive
};

// Loss terms and their gradients w.r.t. scores/aux logits, in log domain so
// that degenerate distributions stay finite.
LossGradients loss_with_gradients(const std::vector<std::string>& agent_ids,
                                  const std::vector<double>& probs,
                                  const std::vector<double>& log_probs,
                                  const std::vector<double>& aux_logits, const SoftTarget& target,
                                  const TrainConfig& config,
                                  const std::map<std::string, std::string>& backbone_of,
                                  const std::optional<std::string>& aux_target,
                                  const std::vector<std::string>& categories) {
  const std::size_t n = agent_ids.size();
  if (target.probs.size() != n) fail_data("loss: target and prediction agent sets differ");
  std::vector<double> t(n);
  double tsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto it = target.probs.find(agent_ids[i]);
    if (it == target.probs.end()) fail_data("loss: target missing agent " + agent_ids[i]);
    if (it->second < 0.0) fail_data("loss: negative target probability");
    t[i] = it->second;
    tsum += t[i];
  }
  if (std::abs(tsum - 1.0) > 1e-6) fail_data("loss: target probabilities do not sum to 1");

  // label smoothing mixes the target with uniform; keeps the KL finite
  const double eps = config.label_smoothing;
  for (std::size_t i = 0; i < n; ++i) t[i] = (1.0 - eps) * t[i] + eps / static_cast<double>(n);

  LossGradients out;
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (t[i] > 0.0) kl += t[i] * (std::log(t[i]) - log_probs[i]);
  }

  double h_agent = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (probs[i] > 0.0) h_agent -= probs[i] * log_probs[i];
  }

  // backbone marginal entropy
  std::map<std::string, double> marginal;
  std::vector<const std::string*> bb(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto it = backbone_of.find(agent_ids[i]);
    if (it == backbone_of.end()) fail_data("loss: missing backbone for agent " + agent_ids[i]);
    bb[i] = &it->second;
    marginal[it->second] += probs[i];
  }
  double h_bb = 0.0;
  std::map<std::string, double> log_marginal;
  for (const auto& [name, p] : marginal) {
    log_marginal[name] = p > 0.0 ? std::log(p) : 0.0;  // unused when p == 0
    if (p > 0.0) h_bb -= p * std::log(p);
  }

  out.breakdown.kl = kl;
  out.breakdown.agent_entropy = h_agent;
  out.breakdown.backbone_entropy = h_bb;

  // d total / d score_j, via the softmax jacobian
  double sum_p_logm = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum_p_logm += probs[i] * log_marginal[*bb[i]];
  out.d_scores.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    double g = probs[j] - t[j];
    g += config.lambda_bb * probs[j] * (log_marginal[*bb[j]] - sum_p_logm);
    g += config.lambda_ent * probs[j] * (log_probs[j] + h_agent);
    out.d_scores[j] = g;
  }

  double aux_ce = 0.0;
  if (aux_target && !categories.empty()) {
    auto it = std::find(categories.begin(), categories.end(), *aux_target);
    if (it != categories.end()) {
      const std::size_t c_star = static_cast<std::size_t>(it - categories.begin());
      const std::size_t nc = categories.size();
      std::vector<double> aux_logp;
      std::vector<double> aux_p = softmax_stable(aux_logits, &aux_logp);
      const double s = config.aux_smoothing;
      out.d_aux_logits.resize(nc);
      for (std::size_t c = 0; c < nc; ++c) {
        const double tc = (c == c_star ? 1.0 - s : 0.0) + s / static_cast<double>(nc);
        aux_ce -= tc * aux_logp[c];
        out.d_aux_logits[c] = aux_p[c] - tc;
      }
    }
  }
  out.breakdown.aux_ce = aux_ce;
  out.breakdown.total =
      kl - config.lambda_bb * h_bb - config.lambda_ent * h_agent + aux_ce;
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (layers < 1) fail_config("train config: layers must be >= 1");
  if (hidden < 1) fail_config("train config: hidden must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) fail_config("train config: dropout must be in [0,1)");
  if (lr <= 0.0) fail_config("train config: learning rate must be positive");
  if (temperature <= 0.0) fail_config("train config: temperature must be positive");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    fail_config("train config: label smoothing must be in [0,1)");
  }
  if (aux_smoothing < 0.0 || aux_smoothing >= 1.0) {
    fail_config("train config: aux smoothing must be in [0,1)");
  }
  if (lambda_bb < 0.0 || lambda_ent < 0.0) fail_config("train config: lambdas must be nonnegative");
  if (max_epochs < 1) fail_config("train config: max_epochs must be >= 1");
  if (patience < 0) fail_config("train config: patience must be >= 0");
  if (grad_accumulation < 1) fail_config("train config: grad_accumulation must be >= 1");
}

RouterParams RouterParams::init(int feat_dim, int hidden, int layers,
                                std::vector<std::string> categories, std::uint64_t seed) {
  RouterParams p;
  p.feat_dim = feat_dim;
  p.hidden = hidden;
  p.layers = layers;
  p.categories = std::move(categories);
  Rng rng(mix64(seed ^ 0x524f555445ULL));
  for (const auto& shape : expected_shapes(feat_dim, hidden, layers, p.categories)) {
    Tensor t;
    if (shape.name.find(".gate.") != std::string::npos ||
        shape.name.find(".norm_gamma.") != std::string::npos) {
      t = constant_tensor(shape.rows, shape.cols, 1.0);
    } else if (shape.name.find(".norm_beta.") != std::string::npos ||
               shape.name.find("_bias") != std::string::npos || shape.name == "score.b1" ||
               shape.name == "score.b2" || shape.name == "aux.b") {
      t = constant_tensor(shape.rows, shape.cols, 0.0);
    } else {
      t = uniform_init(shape.rows, shape.cols, shape.cols, rng);
    }
    p.tensors.emplace(shape.name, std::move(t));
  }
  return p;
}

std::size_t RouterParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.size();
  return n;
}

void RouterParams::check_finite() const {
  for (const auto& [name, t] : tensors) {
    if (!all_finite(t)) fail_numeric("router: non-finite values in tensor " + name);
  }
}

double RoutingDistribution::prob_of(const std::string& agent_id) const {
  for (std::size_t i = 0; i < agent_ids.size(); ++i) {
    if (agent_ids[i] == agent_id) return probs[i];
  }
  fail_data("routing distribution: unknown agent " + agent_id);
}

std::map<std::string, double> RoutingDistribution::prob_map() const {
  std::map<std::string, double> m;
  for (std::size_t i = 0; i < agent_ids.size(); ++i) m[agent_ids[i]] = probs[i];
  return m;
}

SoftTarget soft_targets(const std::map<std::string, double>& f1_by_agent, double temperature) {
  if (temperature <= 0.0) fail_data("soft_targets: temperature must be positive");
  if (f1_by_agent.empty()) fail_data("soft_targets: empty agent set");
  double mx = -1.0;
  for (const auto& [id, f1] : f1_by_agent) {
    if (f1 < 0.0 || f1 > 1.0) fail_data("soft_targets: F1 out of [0,1] for agent " + id);
    mx = std::max(mx, f1);
  }
  SoftTarget t;
  double sum = 0.0;
  for (const auto& [id, f1] : f1_by_agent) {
    const double e = std::exp((f1 - mx) / temperature);
    t.probs[id] = e;
    sum += e;
  }
  for (auto& [id, p] : t.probs) p /= sum;
  return t;
}

std::string backbone_of_agent(const std::string& agent_id) {
  auto sep = agent_id.find("::");
  if (sep == std::string::npos) fail_data("agent id without backbone separator: " + agent_id);
  return agent_id.substr(0, sep);
}

RoutingDistribution forward(const RouterParams& params, const TypedGraph& graph, RouterMode mode,
                            std::uint64_t dropout_seed, double dropout_rate) {
  const double rate = mode == RouterMode::Train ? dropout_rate : 0.0;
  return trace_to_distribution(run_forward(params, graph, mode, dropout_seed, rate), params);
}

LossBreakdown loss(const RoutingDistribution& pred, const SoftTarget& target,
                   const TrainConfig& config,
                   const std::map<std::string, std::string>& backbone_of,
                   const std::optional<std::string>& aux_target) {
  std::vector<double> log_probs(pred.probs.size());
  for (std::size_t i = 0; i < pred.probs.size(); ++i) {
    log_probs[i] = pred.probs[i] > 0.0 ? std::log(pred.probs[i]) : -745.0;
  }
  return loss_with_gradients(pred.agent_ids, pred.probs, log_probs, pred.aux_logits, target,
                             config, backbone_of, aux_target, pred.aux_categories)
      .breakdown;
}

StepResult backward(const RouterParams& params, const TypedGraph& graph, const SoftTarget& target,
                    const TrainConfig& config,
                    const std::map<std::string, std::string>& backbone_of,
                    const std::optional<std::string>& aux_target, RouterMode mode,
                    std::uint64_t dropout_seed) {
  const ForwardTrace t =
      run_forward(params, graph, mode, dropout_seed, mode == RouterMode::Train ? config.dropout : 0.0);
  const LossGradients lg =
      loss_with_gradients(t.agent_ids, t.probs, t.log_probs, t.aux_logits, target, config,
                          backbone_of, aux_target, params.categories);

  const std::size_t h = static_cast<std::size_t>(params.hidden);
  const std::size_t n_nodes = t.node_type.size();

  StepResult res;
  res.dist = trace_to_distribution(t, params);
  res.loss = lg.breakdown;
  for (const auto& [name, tensor] : params.tensors) {
    res.grads.emplace(name, Tensor(tensor.rows, tensor.cols));
  }

  // gradients w.r.t. final node embeddings
  std::vector<std::vector<double>> dh(n_nodes, std::vector<double>(h, 0.0));
  const auto& h_final = params.layers > 0 ? t.layer.back().h_out : t.h0;
  const auto& hq = h_final[static_cast<std::size_t>(t.query_node)];

  // scorer head
  {
    const Tensor& w1 = tensor_of(params, "score.w1");
    const Tensor& w2 = tensor_of(params, "score.w2");
    Tensor& dw1 = res.grads.at("score.w1");
    Tensor& db1 = res.grads.at("score.b1");
    Tensor& dw2 = res.grads.at("score.w2");
    Tensor& db2 = res.grads.at("score.b2");
    for (std::size_t i = 0; i < t.agent_nodes.size(); ++i) {
      const double ds = lg.d_scores[i];
      if (ds == 0.0) continue;
      const auto& a1 = t.score_hidden_pre[i];
      const std::size_t agent_node = static_cast<std::size_t>(t.agent_nodes[i]);
      std::vector<double> da1(h);
      for (std::size_t j = 0; j < h; ++j) {
        const double r1 = a1[j] > 0.0 ? a1[j] : 0.0;
        dw2.data[j] += ds * r1;
        da1[j] = a1[j] > 0.0 ? ds * w2.data[j] : 0.0;
      }
      db2.data[0] += ds;
      std::vector<double> cat(2 * h);
      std::memcpy(cat.data(), hq.data(), h * sizeof(double));
      std::memcpy(cat.data() + h, h_final[agent_node].data(), h * sizeof(double));
      outer_add(dw1, da1, cat);
      for (std::size_t j = 0; j < h; ++j) db1.data[j] += da1[j];
      std::vector<double> dcat(2 * h, 0.0);
      matvec_transpose_add(w1, da1, dcat);
      for (std::size_t j = 0; j < h; ++j) {
        dh[static_cast<std::size_t>(t.query_node)][j] += dcat[j];
        dh[agent_node][j] += dcat[h + j];
      }
    }
  }

  // auxiliary head
  if (!lg.d_aux_logits.empty()) {
    const Tensor& aw = tensor_of(params, "aux.w");
    Tensor& daw = res.grads.at("aux.w");
    Tensor& dab = res.grads.at("aux.b");
    outer_add(daw, lg.d_aux_logits, hq);
    for (std::size_t c = 0; c < lg.d_aux_logits.size(); ++c) dab.data[c] += lg.d_aux_logits[c];
    matvec_transpose_add(aw, lg.d_aux_logits, dh[static_cast<std::size_t>(t.query_node)]);
  }

  // layers, in reverse
  for (int l = params.layers; l >= 1; --l) {
    const auto& L = t.layer[static_cast<std::size_t>(l - 1)];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    const auto& h_in = (l == 1) ? t.h0 : t.layer[static_cast<std::size_t>(l - 2)].h_out;

    // dropout
    for (std::size_t v = 0; v < n_nodes; ++v) {
      if (!L.mask[v].empty()) {
        for (std::size_t j = 0; j < h; ++j) dh[v][j] *= L.mask[v][j];
      }
    }

    // normalization backward, grouped by type
    std::vector<std::vector<std::size_t>> by_type(3);
    for (std::size_t v = 0; v < n_nodes; ++v) by_type[static_cast<std::size_t>(t.node_type[v])].push_back(v);
    std::vector<std::vector<double>> dr(n_nodes, std::vector<double>(h, 0.0));
    for (int ty = 0; ty < 3; ++ty) {
      const auto& members = by_type[static_cast<std::size_t>(ty)];
      if (members.empty()) continue;
      const Tensor& gamma = tensor_of(params, prefix + std::string("norm_gamma.") + kTypeNames[ty]);
      Tensor& dgamma = res.grads.at(prefix + std::string("norm_gamma.") + kTypeNames[ty]);
      Tensor& dbeta = res.grads.at(prefix + std::string("norm_beta.") + kTypeNames[ty]);
      if (members.size() == 1) {
        const std::size_t v = members[0];
        for (std::size_t j = 0; j < h; ++j) {
          dgamma.data[j] += dh[v][j] * L.r[v][j];
          dbeta.data[j] += dh[v][j];
          dr[v][j] = dh[v][j] * gamma.data[j];
        }
        continue;
      }
      const auto& inv_std = L.inv_std[static_cast<std::size_t>(ty)];
      const double inv_n = 1.0 / static_cast<double>(members.size());
      std::vector<double> mean_dxhat(h, 0.0), mean_dxhat_xhat(h, 0.0);
      for (std::size_t v : members) {
        for (std::size_t j = 0; j < h; ++j) {
          const double dxh = dh[v][j] * gamma.data[j];
          mean_dxhat[j] += dxh;
          mean_dxhat_xhat[j] += dxh * L.xhat[v][j];
          dgamma.data[j] += dh[v][j] * L.xhat[v][j];
          dbeta.data[j] += dh[v][j];
        }
      }
      for (std::size_t j = 0; j < h; ++j) {
        mean_dxhat[j] *= inv_n;
        mean_dxhat_xhat[j] *= inv_n;
      }
      for (std::size_t v : members) {
        for (std::size_t j = 0; j < h; ++j) {
          const double dxh = dh[v][j] * gamma.data[j];
          dr[v][j] = inv_std[j] * (dxh - mean_dxhat[j] - L.xhat[v][j] * mean_dxhat_xhat[j]);
        }
      }
    }

    // relu + update map
    std::vector<std::vector<double>> dh_in(n_nodes, std::vector<double>(h, 0.0));
    std::vector<std::vector<double>> dmerged(n_nodes);
    for (std::size_t v = 0; v < n_nodes; ++v) {
      std::vector<double> dz(h);
      for (std::size_t j = 0; j < h; ++j) dz[j] = L.z[v][j] > 0.0 ? dr[v][j] : 0.0;
      const std::string uname = prefix + std::string("update.") + kTypeNames[t.node_type[v]];
      const Tensor& u = tensor_of(params, uname);
      Tensor& du = res.grads.at(uname);
      Tensor& dub = res.grads.at(prefix + std::string("update_bias.") + kTypeNames[t.node_type[v]]);
      std::vector<double> cat(2 * h);
      std::memcpy(cat.data(), h_in[v].data(), h * sizeof(double));
      std::memcpy(cat.data() + h, L.merged[v].data(), h * sizeof(double));
      outer_add(du, dz, cat);
      for (std::size_t j = 0; j < h; ++j) dub.data[j] += dz[j];
      std::vector<double> dcat(2 * h, 0.0);
      matvec_transpose_add(u, dz, dcat);
      for (std::size_t j = 0; j < h; ++j) dh_in[v][j] += dcat[j];
      dmerged[v].assign(dcat.begin() + static_cast<std::ptrdiff_t>(h), dcat.end());
    }

    // gates, mean aggregation, message matrices
    for (int r = 0; r < kRelationCount; ++r) {
      const std::string wname = prefix + std::string("msg.") + kRelNames[r];
      const std::string gname = prefix + std::string("gate.") + kRelNames[r];
      const Tensor& w = tensor_of(params, wname);
      const double gate = tensor_of(params, gname).data[0];
      Tensor& dw = res.grads.at(wname);
      double& dgate = res.grads.at(gname).data[0];
      // accumulated d(msg_u) per source; msg_u = W_r h_u is shared across edges
      std::vector<std::vector<double>> acc(n_nodes);
      for (std::size_t v = 0; v < n_nodes; ++v) {
        const auto& srcs = t.in_nbrs[r][v];
        if (srcs.empty()) continue;
        const auto& mbar = L.mbar[r][v];
        for (std::size_t j = 0; j < h; ++j) dgate += dmerged[v][j] * mbar[j];
        const double coeff = gate / static_cast<double>(srcs.size());
        for (int u_node : srcs) {
          auto& a = acc[static_cast<std::size_t>(u_node)];
          if (a.empty()) a.assign(h, 0.0);
          for (std::size_t j = 0; j < h; ++j) a[j] += coeff * dmerged[v][j];
        }
      }
      for (std::size_t u_node = 0; u_node < n_nodes; ++u_node) {
        if (acc[u_node].empty()) continue;
        outer_add(dw, acc[u_node], h_in[u_node]);
        matvec_transpose_add(w, acc[u_node], dh_in[u_node]);
      }
    }

    dh = std::move(dh_in);
  }

  // input projections
  for (std::size_t v = 0; v < n_nodes; ++v) {
    const std::string pname = std::string("proj.") + kTypeNames[t.node_type[v]];
    outer_add(res.grads.at(pname), dh[v], graph.nodes[v].feat);
  }

  for (const auto& [name, g] : res.grads) {
    if (!all_finite(g)) fail_numeric("backward: non-finite gradient in tensor " + name);
  }
  return res;
}

double validation_vote_f1(const RouterParams& params, const std::vector<ValExample>& val) {
  if (val.empty()) fail_data("validation_vote_f1: empty validation set");
  double total = 0.0;
  for (const auto& ex : val) {
    const RoutingDistribution dist = forward(params, ex.graph, RouterMode::Eval);
    const auto order = ranked_order(dist.agent_ids, dist.probs);
    std::vector<double> weights;
    std::vector<std::string> answers;
    for (std::size_t idx : order) {
      auto it = ex.agent_answers.find(dist.agent_ids[idx]);
      if (it == ex.agent_answers.end()) continue;
      weights.push_back(std::max(dist.probs[idx], 1e-12));
      answers.push_back(it->second);
    }
    if (answers.empty()) continue;
    total += best_score(weighted_vote(weights, answers), ex.golds).f1;
  }
  return total / static_cast<double>(val.size());
}

TrainedRouter train(std::optional<RouterParams> init, const std::vector<TrainExample>& examples,
                    const std::vector<ValExample>& val, const TrainConfig& config,
                    const std::map<std::string, std::string>& backbone_of) {
  config.validate();
  if (examples.empty()) fail_data("train: empty training set");
  if (val.empty()) fail_data("train: empty validation set");

  const std::size_t feat_dim = examples.front().graph.feature_dim();
  if (feat_dim == 0) fail_data("train: graphs carry no features; run embedding first");

  RouterParams params;
  if (init) {
    params = std::move(*init);
    if (params.hidden != config.hidden || params.layers != config.layers) {
      fail_data("train: checkpoint shape (hidden/layers) does not match config");
    }
    if (params.feat_dim != static_cast<int>(feat_dim)) {
      fail_data("train: checkpoint feature dimension does not match graphs");
    }
  } else {
    std::set<std::string> cat_set;
    for (const auto& ex : examples) {
      if (ex.category) cat_set.insert(*ex.category);
    }
    params = RouterParams::init(static_cast<int>(feat_dim), config.hidden, config.layers,
                                std::vector<std::string>(cat_set.begin(), cat_set.end()),
                                config.seed);
  }

  Rng rng(mix64(config.seed ^ 0x545241494eULL));
  AdamOptimizer adam(config.lr);

  TrainedRouter result;
  result.config = config;
  RouterParams best = params;
  double best_f1 = -1.0;
  int best_epoch = 0;

  TensorMap accumulated;
  for (const auto& [name, t] : params.tensors) accumulated.emplace(name, Tensor(t.rows, t.cols));

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto order = shuffled_indices(examples.size(), rng);
    double loss_sum = 0.0;
    int pending = 0;
    auto flush = [&]() {
      if (pending == 0) return;
      if (pending > 1) {
        const double inv = 1.0 / static_cast<double>(pending);
        for (auto& [name, g] : accumulated) {
          for (double& v : g.data) v *= inv;
        }
      }
      adam.step(params.tensors, accumulated);
      for (auto& [name, g] : accumulated) g.zero();
      pending = 0;
    };
    for (std::size_t idx : order) {
      const auto& ex = examples[idx];
      const std::uint64_t step_seed = rng.next();
      StepResult step = backward(params, ex.graph, ex.target, config, backbone_of, ex.category,
                                 RouterMode::Train, step_seed);
      for (auto& [name, g] : accumulated) {
        const Tensor& sg = step.grads.at(name);
        for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += sg.data[i];
      }
      ++pending;
      if (pending >= config.grad_accumulation) flush();
      loss_sum += step.loss.total;
    }
    flush();
    params.check_finite();

    const double val_f1 = validation_vote_f1(params, val);
    result.log.push_back({epoch, loss_sum / static_cast<double>(examples.size()), val_f1, config.lr});
    if (val_f1 > best_f1) {
      best_f1 = val_f1;
      best_epoch = epoch;
      best = params;
    }
    if (epoch - best_epoch >= config.patience) break;
  }

  result.params = std::move(best);
  result.best_epoch = best_epoch;
  result.best_val_f1 = best_f1;
  return result;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::ordered_json meta;
  meta["version"] = 1;
  meta["config"] = {{"layers", ckpt.config.layers},
                    {"hidden", ckpt.config.hidden},
                    {"dropout", ckpt.config.dropout},
                    {"lr", ckpt.config.lr},
                    {"temperature", ckpt.config.temperature},
                    {"label_smoothing", ckpt.config.label_smoothing},
                    {"lambda_bb", ckpt.config.lambda_bb},
                    {"lambda_ent", ckpt.config.lambda_ent},
                    {"aux_smoothing", ckpt.config.aux_smoothing},
                    {"max_epochs", ckpt.config.max_epochs},
                    {"patience", ckpt.config.patience},
                    {"grad_accumulation", ckpt.config.grad_accumulation},
                    {"seed", ckpt.config.seed}};
  meta["epoch"] = ckpt.epoch;
  meta["val_f1"] = ckpt.val_f1;
  meta["feat_dim"] = ckpt.params.feat_dim;
  meta["hidden"] = ckpt.params.hidden;
  meta["layers"] = ckpt.params.layers;
  meta["categories"] = ckpt.params.categories;
  auto manifest = nlohmann::ordered_json::array();
  for (const auto& [name, t] : ckpt.params.tensors) {
    manifest.push_back({{"name", name}, {"rows", t.rows}, {"cols", t.cols}});
  }
  meta["tensors"] = manifest;
  const std::string meta_str = meta.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail_data("cannot write checkpoint: " + path);
    out.write("RFCKPT1\n", 8);
    const std::uint64_t len = meta_str.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    for (const auto& [name, t] : ckpt.params.tensors) {
      out.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    if (!out) fail_data("short write while saving checkpoint: " + path);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_data("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "RFCKPT1\n", 8) != 0) {
    fail_data("checkpoint: bad magic / unsupported version in " + path);
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len == 0 || len > (1ULL << 30)) fail_data("checkpoint: corrupted metadata length");
  std::string meta_str(len, '\0');
  in.read(meta_str.data(), static_cast<std::streamsize>(len));
  if (!in) fail_data("checkpoint: truncated metadata");
  nlohmann::json meta = nlohmann::json::parse(meta_str, nullptr, false);
  if (meta.is_discarded()) fail_data("checkpoint: corrupted metadata JSON");
  if (meta.value("version", 0) != 1) fail_data("checkpoint: unsupported version");

  Checkpoint ckpt;
  const auto& cfg = meta.at("config");
  ckpt.config.layers = cfg.at("layers").get<int>();
  ckpt.config.hidden = cfg.at("hidden").get<int>();
  ckpt.config.dropout = cfg.at("dropout").get<double>();
  ckpt.config.lr = cfg.at("lr").get<double>();
  ckpt.config.temperature = cfg.at("temperature").get<double>();
  ckpt.config.label_smoothing = cfg.at("label_smoothing").get<double>();
  ckpt.config.lambda_bb = cfg.at("lambda_bb").get<double>();
  ckpt.config.lambda_ent = cfg.at("lambda_ent").get<double>();
  ckpt.config.aux_smoothing = cfg.at("aux_smoothing").get<double>();
  ckpt.config.max_epochs = cfg.at("max_epochs").get<int>();
  ckpt.config.patience = cfg.at("patience").get<int>();
  ckpt.config.grad_accumulation = cfg.value("grad_accumulation", 1);
  ckpt.config.seed = cfg.at("seed").get<std::uint64_t>();
  ckpt.epoch = meta.at("epoch").get<int>();
  ckpt.val_f1 = meta.at("val_f1").get<double>();
  ckpt.params.feat_dim = meta.at("feat_dim").get<int>();
  ckpt.params.hidden = meta.at("hidden").get<int>();
  ckpt.params.layers = meta.at("layers").get<int>();
  ckpt.params.categories = meta.at("categories").get<std::vector<std::string>>();

  // expected shapes are derived from the declared dimensions; a manifest that
  // disagrees names the offending tensor
  const auto shapes = expected_shapes(ckpt.params.feat_dim, ckpt.params.hidden, ckpt.params.layers,
                                      ckpt.params.categories);
  std::map<std::string, std::pair<std::size_t, std::size_t>> expect;
  for (const auto& s : shapes) expect[s.name] = {s.rows, s.cols};

  for (const auto& entry : meta.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::size_t rows = entry.at("rows").get<std::size_t>();
    const std::size_t cols = entry.at("cols").get<std::size_t>();
    auto it = expect.find(name);
    if (it == expect.end()) fail_data("checkpoint: unexpected tensor " + name);
    if (it->second.first != rows || it->second.second != cols) {
      fail_data("checkpoint: shape mismatch for tensor " + name);
    }
    Tensor t(rows, cols);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!in) fail_data("checkpoint: truncated tensor data at " + name);
    ckpt.params.tensors.emplace(name, std::move(t));
  }
  if (ckpt.params.tensors.size() != expect.size()) {
    fail_data("checkpoint: missing tensors (expected " + std::to_string(expect.size()) + ", got " +
              std::to_string(ckpt.params.tensors.size()) + ")");
  }
  ckpt.params.check_finite();
  return ckpt;
}

}  // namespace routeforge
