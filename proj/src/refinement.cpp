#include "routeforge/refinement.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace routeforge {

namespace {

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string role_of_agent(const std::string& agent_id) {
  auto sep = agent_id.find("::");
  if (sep == std::string::npos) fail_data("agent id without role separator: " + agent_id);
  return agent_id.substr(sep + 2);
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n == 0) return 0.0;
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Per-sample F1 of an agent (with its current prompt) over a subset.
std::vector<double> score_agent_on(const AgentSpec& agent, const std::vector<QAInstance>& subset,
                                   Cache& cache, AnswerBackend& backend,
                                   const RetryPolicy& retry) {
  std::vector<double> out;
  out.reserve(subset.size());
  for (const auto& inst : subset) {
    const InvokeResult r = invoke(agent, inst, cache, backend, retry);
    out.push_back(best_score(r.answer, inst.gold_answers).f1);
  }
  return out;
}

void append_journal(const std::filesystem::path& run_dir, const JournalRecord& rec) {
  if (run_dir.empty()) return;
  std::filesystem::create_directories(run_dir / "journal");
  std::ofstream out(run_dir / "journal" / "rounds.jsonl", std::ios::app);
  out << journal_record_json(rec) << "\n";
}

}  // namespace

double priority(double mean_f1, double mean_weight, double alpha) {
  if (mean_f1 < 0.0 || mean_f1 > 1.0) fail_data("priority: mean_f1 out of [0,1]");
  if (mean_weight < 0.0 || mean_weight > 1.0) fail_data("priority: mean_weight out of [0,1]");
  if (alpha <= 0.0) fail_data("priority: alpha must be positive");
  return (1.0 - mean_f1) * (alpha + mean_weight);
}

std::string gate_reason_name(GateReason reason) {
  switch (reason) {
    case GateReason::WithinToleranceAccept: return "within-tolerance-accept";
    case GateReason::RegressionBeyondDelta: return "regression-beyond-delta";
    case GateReason::NoSampleChanged: return "no-sample-changed";
    case GateReason::NetDegradation: return "net-degradation";
  }
  return "unknown";
}

GateVerdict gate(const std::vector<double>& old_scores, const std::vector<double>& new_scores,
                 double delta) {
  if (old_scores.size() != new_scores.size()) fail_data("gate: score vectors differ in length");
  if (old_scores.empty()) fail_data("gate: empty score vectors");
  if (delta < 0.0) fail_data("gate: delta must be nonnegative");

  GateVerdict v;
  v.old_mean = mean_of(old_scores);
  v.new_mean = mean_of(new_scores);
  for (std::size_t i = 0; i < old_scores.size(); ++i) {
    if (new_scores[i] > old_scores[i]) ++v.n_up;
    if (new_scores[i] < old_scores[i]) ++v.n_down;
  }
  const bool no_regression = v.new_mean >= v.old_mean - delta;
  const bool changed = v.n_up > 0;
  const bool no_net_degradation = !(v.new_mean < v.old_mean && v.n_down > v.n_up);

  if (!no_regression) {
    v.reason = GateReason::RegressionBeyondDelta;
  } else if (!changed) {
    v.reason = GateReason::NoSampleChanged;
  } else if (!no_net_degradation) {
    v.reason = GateReason::NetDegradation;
  } else {
    v.accepted = true;
    v.reason = GateReason::WithinToleranceAccept;
  }
  return v;
}

std::vector<std::string> select_targets(const DiagnosticsBundle& bundle,
                                        const RefinementState& state, const RefineConfig& config,
                                        const std::vector<std::string>& pool_ids) {
  for (const auto& id : pool_ids) {
    if (!bundle.agent_summaries.count(id)) {
      fail_data("select_targets: diagnostics do not cover agent " + id);
    }
  }

  std::set<std::string> backbones, roles;
  for (const auto& id : pool_ids) {
    backbones.insert(backbone_of_agent(id));
    roles.insert(role_of_agent(id));
  }

  // role underperforms on a backbone when strictly below that backbone's
  // median role F1
  std::map<std::string, int> below_counts;
  for (const auto& bb : backbones) {
    std::vector<double> values;
    for (const auto& role : roles) {
      const std::string id = bb + "::" + role;
      if (bundle.agent_summaries.count(id)) values.push_back(bundle.agent_summaries.at(id).mean_f1);
    }
    const double med = median_of(values);
    for (const auto& role : roles) {
      const std::string id = bb + "::" + role;
      if (bundle.agent_summaries.count(id) && bundle.agent_summaries.at(id).mean_f1 < med) {
        ++below_counts[role];
      }
    }
  }

  std::set<std::string> eligible_roles;
  for (int t = 3; t >= 1; --t) {
    for (const auto& role : roles) {
      if (below_counts.count(role) && below_counts.at(role) >= t) eligible_roles.insert(role);
    }
    if (!eligible_roles.empty()) break;
  }
  // ties everywhere (no role strictly below any median): every role is a
  // candidate and the priority ranking decides
  if (eligible_roles.empty()) eligible_roles = roles;

  struct Ranked {
    double prio;
    std::string id;
  };
  std::vector<Ranked> ranked;
  for (const auto& id : pool_ids) {
    if (state.frozen.count(id)) continue;
    if (!eligible_roles.count(role_of_agent(id))) continue;
    const double f1 = bundle.agent_summaries.at(id).mean_f1;
    const double w = bundle.weight_stats.count(id) ? bundle.weight_stats.at(id).mean : 0.0;
    ranked.push_back({priority(f1, w, config.alpha), id});
  }
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.prio != b.prio) return a.prio > b.prio;
    return a.id < b.id;
  });
  std::vector<std::string> out;
  for (const auto& r : ranked) {
    if (static_cast<int>(out.size()) >= config.n_max) break;
    out.push_back(r.id);
  }
  return out;
}

std::string ChatRewriter::rewrite(const AgentSpec& agent, const std::string& evidence,
                                  double temperature) {
  const std::string user = "Current prompt for role '" + agent.role + "':\n" + agent.prompt.text +
                           "\n\n" + evidence + "\nReturn only the improved prompt text.";
  return transport_.complete(model_, {{"system", template_}, {"user", user}}, temperature, 2000);
}

std::string build_rewrite_evidence(const DiagnosticsBundle& bundle, const std::string& agent_id,
                                   std::size_t max_failures) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(3);
  out << "Error patterns (mean F1 by question category):\n";
  if (bundle.agent_summaries.count(agent_id)) {
    for (const auto& [cat, f1] : bundle.agent_summaries.at(agent_id).per_category_f1) {
      out << "- " << cat << ": " << f1 << "\n";
    }
  }
  out << "\nFailure cases:\n";
  std::size_t shown = 0;
  for (const auto& rec : bundle.failure_archive) {
    if (rec.agent_id != agent_id) continue;
    if (shown >= max_failures) break;
    out << "- Q: " << rec.question << "\n  gold: " << rec.gold << "\n  predicted: "
        << (rec.predicted.empty() ? "<empty>" : rec.predicted) << " (F1 " << rec.f1 << ")\n";
    ++shown;
  }
  if (shown == 0) out << "- none archived\n";
  return out.str();
}

std::vector<PromptVersion> generate_candidates(RewriteProvider& rewriter, const AgentSpec& agent,
                                               const DiagnosticsBundle& bundle,
                                               const RefineConfig& config,
                                               const RetryPolicy& retry) {
  const std::string evidence = build_rewrite_evidence(bundle, agent.id());
  std::vector<PromptVersion> out;
  // candidates are compared in trimmed form; dedup against both spellings of
  // the current prompt
  std::set<std::string> seen{agent.prompt.hash, hex64(fnv1a64(trim_copy(agent.prompt.text)))};
  const int n = std::min<int>(config.n_candidates,
                              static_cast<int>(config.rewrite_temperatures.size()));
  for (int c = 0; c < n; ++c) {
    const double temp = config.rewrite_temperatures[static_cast<std::size_t>(c)];
    std::string text;
    int attempt = 0;
    for (;;) {
      try {
        text = rewriter.rewrite(agent, evidence, temp);
        break;
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::Backend || ++attempt >= retry.attempts) {
          fail_backend("rewriter failed for " + agent.id() + ": " + e.what());
        }
      }
    }
    text = trim_copy(text);
    if (text.empty()) continue;
    if (static_cast<int>(split_ws(text).size()) >= config.max_prompt_words) continue;
    const PromptVersion candidate = make_prompt_version(text, agent.prompt.version + 1);
    if (!seen.insert(candidate.hash).second) continue;
    out.push_back(candidate);
  }
  return out;
}

std::vector<QAInstance> build_validation_subset(
    const DiagnosticsBundle& bundle, const std::string& agent_id,
    const std::vector<QAInstance>& val_instances,
    const std::map<std::string, QAInstance>& instance_lookup, const RefineConfig& config) {
  std::vector<QAInstance> out;
  std::set<std::string> seen;
  for (const auto& rec : bundle.failure_archive) {
    if (rec.agent_id != agent_id) continue;
    auto it = instance_lookup.find(rec.instance_id);
    if (it == instance_lookup.end()) continue;
    if (seen.insert(rec.instance_id).second) out.push_back(it->second);
  }
  Rng rng(mix64(hash_parts({agent_id, "valsub"}) ^ config.seed));
  const std::size_t want = std::min<std::size_t>(
      static_cast<std::size_t>(std::max(0, config.val_sample)), val_instances.size());
  for (std::size_t idx : sample_indices(want, val_instances.size(), rng)) {
    const QAInstance& inst = val_instances[idx];
    if (seen.insert(inst.id).second) out.push_back(inst);
  }
  return out;
}

std::string journal_record_json(const JournalRecord& rec) {
  nlohmann::ordered_json doc;
  doc["round"] = rec.round;
  doc["agent"] = rec.agent;
  doc["candidate_hash"] = rec.candidate_hash;
  doc["verdict"] = rec.verdict;
  doc["old_mean"] = rec.old_mean;
  doc["new_mean"] = rec.new_mean;
  doc["n_up"] = rec.n_up;
  doc["n_down"] = rec.n_down;
  return doc.dump();
}

RoundOutcome run_round(RefinementState& state, RoundContext& ctx, const RefineConfig& config) {
  if (!ctx.pool || !ctx.backend || !ctx.cache || !ctx.rewriter || !ctx.train_instances ||
      !ctx.val_instances || !ctx.train_graphs || !ctx.val_graphs || !ctx.embedder) {
    fail_config("run_round: incomplete round context");
  }
  if (state.checkpoint_path.empty()) fail_data("run_round: no router checkpoint in state");
  if (ctx.train_graphs->size() != ctx.train_instances->size() ||
      ctx.val_graphs->size() != ctx.val_instances->size()) {
    fail_data("run_round: graphs and instances misaligned");
  }

  const int round = state.round + 1;
  RoundOutcome outcome;
  state.reverted_last = false;

  std::map<std::string, QAInstance> lookup;
  for (const auto& inst : *ctx.train_instances) lookup[inst.id] = inst;
  for (const auto& inst : *ctx.val_instances) lookup[inst.id] = inst;

  std::vector<std::string> pool_ids;
  for (const auto& spec : *ctx.pool) pool_ids.push_back(spec.id());

  outcome.selected = select_targets(state.diagnostics, state, config, pool_ids);

  for (const auto& agent_id : outcome.selected) {
    AgentSpec* agent = nullptr;
    for (auto& spec : *ctx.pool) {
      if (spec.id() == agent_id) agent = &spec;
    }
    if (!agent) fail_data("run_round: selected agent missing from pool: " + agent_id);

    auto record_failure = [&](const std::string& verdict_tag) {
      JournalRecord rec;
      rec.round = round;
      rec.agent = agent_id;
      rec.verdict = verdict_tag;
      outcome.journal.push_back(rec);
      append_journal(ctx.run_dir, rec);
      int& counter = state.reject_counters[agent_id];
      ++counter;
      if (counter >= config.k_freeze) {
        state.frozen.insert(agent_id);
        outcome.newly_frozen.push_back(agent_id);
        JournalRecord frozen;
        frozen.round = round;
        frozen.agent = agent_id;
        frozen.verdict = "frozen";
        outcome.journal.push_back(frozen);
        append_journal(ctx.run_dir, frozen);
      }
    };

    std::vector<PromptVersion> candidates =
        generate_candidates(*ctx.rewriter, *agent, state.diagnostics, config, ctx.rewrite_retry);
    if (candidates.empty()) {
      record_failure("no-valid-candidates");
      continue;
    }

    const std::vector<QAInstance> subset = build_validation_subset(
        state.diagnostics, agent_id, *ctx.val_instances, lookup, config);
    if (subset.empty()) {
      record_failure("empty-validation-subset");
      continue;
    }

    const std::vector<double> old_scores =
        score_agent_on(*agent, subset, *ctx.cache, *ctx.backend, ctx.eval_options.retry);

    // pick the best candidate by mean F1 on the targeted subset; the gate is
    // then applied to that single candidate
    std::size_t best_idx = 0;
    double best_mean = -1.0;
    std::vector<std::vector<double>> candidate_scores(candidates.size());
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      AgentSpec trial = *agent;
      trial.prompt = candidates[c];
      candidate_scores[c] =
          score_agent_on(trial, subset, *ctx.cache, *ctx.backend, ctx.eval_options.retry);
      const double m = mean_of(candidate_scores[c]);
      if (m > best_mean) {
        best_mean = m;
        best_idx = c;
      }
    }

    const GateVerdict verdict = gate(old_scores, candidate_scores[best_idx], config.delta);
    JournalRecord rec;
    rec.round = round;
    rec.agent = agent_id;
    rec.candidate_hash = candidates[best_idx].hash;
    rec.verdict = gate_reason_name(verdict.reason);
    rec.old_mean = verdict.old_mean;
    rec.new_mean = verdict.new_mean;
    rec.n_up = verdict.n_up;
    rec.n_down = verdict.n_down;
    outcome.journal.push_back(rec);
    append_journal(ctx.run_dir, rec);

    if (verdict.accepted) {
      agent->prompt = candidates[best_idx];
      state.reject_counters[agent_id] = 0;
      outcome.accepted_agents.push_back(agent_id);
    } else {
      int& counter = state.reject_counters[agent_id];
      ++counter;
      if (counter >= config.k_freeze) {
        state.frozen.insert(agent_id);
        outcome.newly_frozen.push_back(agent_id);
        JournalRecord frozen;
        frozen.round = round;
        frozen.agent = agent_id;
        frozen.verdict = "frozen";
        outcome.journal.push_back(frozen);
        append_journal(ctx.run_dir, frozen);
      }
    }
  }

  if (!outcome.accepted_agents.empty()) {
    // modified agents re-queried through the cache; unchanged agents reuse
    // their entries (prompt hash unchanged)
    const PoolEvalResult train_eval =
        evaluate_pool(*ctx.pool, *ctx.train_instances, *ctx.cache, *ctx.backend, ctx.eval_options);
    const PoolEvalResult val_eval =
        evaluate_pool(*ctx.pool, *ctx.val_instances, *ctx.cache, *ctx.backend, ctx.eval_options);

    const auto embed_texts = agent_embed_texts(*ctx.pool);
    std::vector<TrainExample> examples;
    for (std::size_t i = 0; i < ctx.train_instances->size(); ++i) {
      const QAInstance& inst = (*ctx.train_instances)[i];
      std::map<std::string, double> f1s;
      for (const auto& [agent, row] : train_eval.scores) {
        auto it = row.find(inst.id);
        f1s[agent] = it != row.end() ? it->second.f1 : 0.0;
      }
      TrainExample ex;
      ex.graph = (*ctx.train_graphs)[i];
      embed_graph(ex.graph, *ctx.embedder, embed_texts);
      ex.target = soft_targets(f1s, ctx.train_config.temperature);
      ex.category = effective_category(inst);
      ex.instance_id = inst.id;
      examples.push_back(std::move(ex));
    }
    std::vector<ValExample> val_examples;
    for (std::size_t i = 0; i < ctx.val_instances->size(); ++i) {
      const QAInstance& inst = (*ctx.val_instances)[i];
      ValExample ex;
      ex.graph = (*ctx.val_graphs)[i];
      embed_graph(ex.graph, *ctx.embedder, embed_texts);
      ex.golds = inst.gold_answers;
      for (const auto& [agent, row] : val_eval.answers) {
        auto it = row.find(inst.id);
        if (it != row.end()) ex.agent_answers[agent] = it->second;
      }
      val_examples.push_back(std::move(ex));
    }

    // fine-tune from the current checkpoint rather than retraining
    Checkpoint prev = load_checkpoint(state.checkpoint_path);
    TrainConfig ft = ctx.train_config;
    ft.max_epochs = config.finetune_epochs;
    const TrainedRouter tuned =
        train(prev.params, examples, val_examples, ft, ctx.backbone_of);
    outcome.new_val_f1 = tuned.best_val_f1;

    JournalRecord ft_rec;
    ft_rec.round = round;
    ft_rec.agent = "*router*";
    ft_rec.old_mean = state.checkpoint_val_f1;
    ft_rec.new_mean = tuned.best_val_f1;

    if (tuned.best_val_f1 < state.checkpoint_val_f1 - config.router_regression) {
      outcome.reverted = true;
      state.reverted_last = true;
      ft_rec.verdict = "router-reverted";
    } else {
      ft_rec.verdict = "router-updated";
      std::string path = state.checkpoint_path;
      if (!ctx.run_dir.empty()) {
        std::filesystem::create_directories(ctx.run_dir / "checkpoints");
        path = (ctx.run_dir / "checkpoints" / ("round" + std::to_string(round) + ".ckpt")).string();
      }
      Checkpoint next;
      next.params = tuned.params;
      next.config = ft;
      next.epoch = tuned.best_epoch;
      next.val_f1 = tuned.best_val_f1;
      save_checkpoint(next, path);
      state.checkpoint_path = path;
      state.checkpoint_val_f1 = tuned.best_val_f1;
    }
    outcome.journal.push_back(ft_rec);
    append_journal(ctx.run_dir, ft_rec);

    // refresh diagnostics for the next round with the current router
    const Checkpoint current = load_checkpoint(state.checkpoint_path);
    std::map<std::string, RoutingDistribution> outputs;
    for (const auto& ex : examples) {
      outputs[ex.instance_id] = forward(current.params, ex.graph, RouterMode::Eval);
    }
    std::map<std::string, std::string> hashes;
    for (const auto& spec : *ctx.pool) hashes[spec.id()] = spec.prompt.hash;
    DiagConfig dc;
    dc.failure_threshold = config.failure_threshold;
    dc.archive_cap_per_agent = config.archive_cap;
    state.diagnostics = collect(train_eval, outputs, *ctx.train_instances, hashes, dc);
  } else {
    // rejected rounds still advance freeze counters; the loop only becomes
    // terminable once nothing selectable remains
    state.terminable =
        select_targets(state.diagnostics, state, config, pool_ids).empty();
  }

  state.round = round;
  return outcome;
}

}  // namespace routeforge
