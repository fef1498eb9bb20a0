#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "routeforge/graph.hpp"
#include "routeforge/tensor.hpp"

namespace routeforge {

struct TrainConfig {
  int layers = 2;
  int hidden = 256;
  double dropout = 0.2;
  double lr = 1e-4;
  double temperature = 0.25;       // soft-target temperature
  double label_smoothing = 1e-3;   // epsilon mixed into the KL target
  double lambda_bb = 0.02;         // backbone-entropy bonus
  double lambda_ent = 1e-3;        // agent-entropy bonus
  double aux_smoothing = 0.05;     // label smoothing of the question-type head
  int max_epochs = 20;
  int patience = 5;
  int grad_accumulation = 1;  // graphs per optimizer step
  std::uint64_t seed = 17;

  void validate() const;
};

// All learnable tensors plus the structural metadata needed to interpret them.
struct RouterParams {
  int feat_dim = 0;
  int hidden = 0;
  int layers = 0;
  std::vector<std::string> categories;  // auxiliary-head label vocabulary
  TensorMap tensors;

  static RouterParams init(int feat_dim, int hidden, int layers,
                           std::vector<std::string> categories, std::uint64_t seed);
  std::size_t parameter_count() const;
  void check_finite() const;
};

struct RoutingDistribution {
  std::vector<std::string> agent_ids;  // sorted; aligned with scores/probs
  std::vector<double> scores;
  std::vector<double> probs;            // softmax(scores)
  std::vector<double> aux_logits;
  std::vector<std::string> aux_categories;  // aligned with aux_logits

  double prob_of(const std::string& agent_id) const;
  std::map<std::string, double> prob_map() const;
};

struct SoftTarget {
  std::map<std::string, double> probs;
};

// probs proportional to exp(F1/temperature), max-stabilized.
SoftTarget soft_targets(const std::map<std::string, double>& f1_by_agent, double temperature);

enum class RouterMode { Train, Eval };

// dropout_rate is only honored in train mode.
RoutingDistribution forward(const RouterParams& params, const TypedGraph& graph,
                            RouterMode mode = RouterMode::Eval, std::uint64_t dropout_seed = 0,
                            double dropout_rate = 0.2);

struct LossBreakdown {
  double kl = 0.0;
  double backbone_entropy = 0.0;  // H of the backbone marginal
  double agent_entropy = 0.0;     // H of the agent distribution
  double aux_ce = 0.0;
  double total = 0.0;
};

// Backbone of an agent id of the form "<backbone>::<role>".
std::string backbone_of_agent(const std::string& agent_id);

LossBreakdown loss(const RoutingDistribution& pred, const SoftTarget& target,
                   const TrainConfig& config,
                   const std::map<std::string, std::string>& backbone_of,
                   const std::optional<std::string>& aux_target);

struct StepResult {
  RoutingDistribution dist;
  LossBreakdown loss;
  TensorMap grads;
};

// Reverse-mode gradients of forward + loss for every parameter tensor.
StepResult backward(const RouterParams& params, const TypedGraph& graph, const SoftTarget& target,
                    const TrainConfig& config,
                    const std::map<std::string, std::string>& backbone_of,
                    const std::optional<std::string>& aux_target,
                    RouterMode mode = RouterMode::Eval, std::uint64_t dropout_seed = 0);

struct TrainExample {
  TypedGraph graph;
  SoftTarget target;
  std::optional<std::string> category;
  std::string instance_id;
};

struct ValExample {
  TypedGraph graph;
  std::vector<std::string> golds;
  std::map<std::string, std::string> agent_answers;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_f1 = 0.0;
  double lr = 0.0;
};

struct TrainedRouter {
  RouterParams params;
  TrainConfig config;
  int best_epoch = 0;
  double best_val_f1 = 0.0;
  std::vector<EpochLog> log;
};

// Adam training with seeded shuffling and validation-vote early stopping.
// When `init` is given, fine-tunes from it instead of reinitializing.
TrainedRouter train(std::optional<RouterParams> init, const std::vector<TrainExample>& examples,
                    const std::vector<ValExample>& val, const TrainConfig& config,
                    const std::map<std::string, std::string>& backbone_of);

// Weighted-majority-vote F1 of a routing distribution over per-agent answers.
double validation_vote_f1(const RouterParams& params, const std::vector<ValExample>& val);

struct Checkpoint {
  RouterParams params;
  TrainConfig config;
  int epoch = 0;
  double val_f1 = 0.0;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace routeforge
