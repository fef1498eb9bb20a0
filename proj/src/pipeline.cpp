#include "routeforge/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "routeforge/prompts.hpp"

namespace routeforge {

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_data("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail_data("cannot write " + path.string());
    out << content;
  }
  std::filesystem::rename(tmp, path);
}

std::vector<std::string> pool_ids(const std::vector<AgentSpec>& pool) {
  std::vector<std::string> ids;
  for (const auto& spec : pool) ids.push_back(spec.id());
  return ids;
}

// Planted synthetic profiles: the i-th category's best agent walks through
// backbones while alternating roles, so no single role owns all the planted
// experts.
void configure_planted_profiles(SyntheticBackend& backend, const std::vector<AgentSpec>& pool,
                                const std::vector<std::string>& categories,
                                const SyntheticConfig& synth, std::size_t n_roles) {
  std::map<std::string, SyntheticProfile> profiles;
  for (const auto& spec : pool) {
    SyntheticProfile p;
    p.default_competence = synth.other_competence;
    profiles[spec.id()] = p;
  }
  const auto ids = pool_ids(pool);
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const std::size_t idx =
        n_roles > 0 ? (c * n_roles + (c % n_roles)) % ids.size() : c % ids.size();
    profiles[ids[idx]].competence[categories[c]] = synth.best_competence;
  }
  for (auto& [id, p] : profiles) backend.set_profile(id, p);
}

void configure_profiles_from_file(SyntheticBackend& backend, const std::string& path) {
  auto doc = nlohmann::json::parse(read_file(path), nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) fail_config("synthetic profiles: malformed " + path);
  for (const auto& [agent, body] : doc.items()) {
    SyntheticProfile p;
    p.default_competence = body.value("default", 0.35);
    const auto by_cat = body.value("by_category", nlohmann::json::object());
    for (const auto& [cat, v] : by_cat.items()) {
      p.competence[cat] = v.get<double>();
    }
    backend.set_profile(agent, p);
  }
}

std::string offline_rewrite(const AgentSpec& agent, double temperature) {
  std::ostringstream out;
  out << agent.prompt.text << "\nRefinement note (variant " << std::fixed << std::setprecision(2)
      << temperature
      << "): trace each entity named in the question through the context before answering, and "
         "answer with the exact span only.";
  return out.str();
}

std::string graph_fingerprint(const RunConfig& cfg, const QAInstance& inst) {
  // pool composition is part of the fingerprint: a changed pool must not be
  // satisfied by stale graphs
  const std::string pool_sig =
      join(cfg.pool.backbones, ",") + "|" + join(cfg.pool.roles, ",");
  return hex64(hash_parts({inst.question, inst.context, inst.category.value_or(""),
                           std::to_string(cfg.graph.embed_dim),
                           std::to_string(cfg.graph.max_entities),
                           std::to_string(cfg.graph.cooccur_window), cfg.pool.backend, pool_sig,
                           std::to_string(cfg.synthetic.seed),
                           std::to_string(cfg.synthetic.view_rate)}));
}

nlohmann::json load_json_file(const std::filesystem::path& path) {
  auto doc = nlohmann::json::parse(read_file(path), nullptr, false);
  if (doc.is_discarded()) fail_data("malformed JSON in " + path.string());
  return doc;
}

}  // namespace

std::string sanitize_filename(const std::string& raw) {
  std::string out;
  for (char c : raw) {
    const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_';
    out.push_back(ok ? c : '_');
  }
  return out + "-" + hex64(fnv1a64(raw)).substr(0, 8);
}

PoolEvalOptions PipelineEnv::eval_options() const {
  PoolEvalOptions o;
  o.concurrency = config.runtime.concurrency;
  o.missing_threshold = config.runtime.missing_threshold;
  o.retry = retry_policy();
  return o;
}

RetryPolicy PipelineEnv::retry_policy() const {
  return {config.runtime.retries, config.runtime.backoff_ms};
}

PipelineEnv make_env(const RunConfig& config) {
  config.validate();
  PipelineEnv env;
  env.config = config;
  env.dirs.root = config.paths.run_dir;
  std::filesystem::create_directories(env.dirs.root);

  env.pool = make_pool(config.pool.backbones, config.pool.roles, config.paths.prompts_dir);
  for (auto& spec : env.pool) {
    spec.gen.temperature = config.pool.temperature;
    spec.gen.max_tokens = config.pool.max_tokens;
  }
  for (const auto& spec : env.pool) env.backbone_map[spec.id()] = spec.backbone;

  env.cache = std::make_unique<Cache>(env.dirs.cache());
  env.embedder = std::make_unique<HashingEmbedder>(static_cast<std::size_t>(config.graph.embed_dim));
  env.extractor =
      std::make_unique<CapitalizedRunExtractor>(static_cast<std::size_t>(config.graph.max_entities));

  if (config.pool.backend == "synthetic") {
    auto backend = std::make_unique<SyntheticBackend>(config.synthetic.seed);
    backend->set_degrade_marker(config.synthetic.degrade_marker);
    backend->set_degraded_competence(config.synthetic.degraded_competence);
    backend->set_distractor_classes(config.synthetic.distractor_classes);
    if (!config.synthetic.profiles_file.empty()) {
      configure_profiles_from_file(*backend, config.synthetic.profiles_file);
    } else if (!config.paths.train.empty() && std::filesystem::exists(config.paths.train)) {
      std::set<std::string> cats;
      for (const auto& inst : load_dataset(config.paths.train, config.runtime.limit)) {
        cats.insert(effective_category(inst));
      }
      configure_planted_profiles(*backend, env.pool,
                                 std::vector<std::string>(cats.begin(), cats.end()),
                                 config.synthetic, config.pool.roles.size());
    }
    env.backend = std::move(backend);
    env.view_provider =
        std::make_unique<SeededViewProvider>(config.synthetic.seed, config.synthetic.view_rate);
    env.rewriter = std::make_unique<ScriptedRewriter>(offline_rewrite);
  } else {
    const char* key = std::getenv(config.pool.api_key_env.c_str());
    env.transport = std::make_unique<HttpChatTransport>(config.pool.endpoint,
                                                        config.pool.endpoint_path, key ? key : "");
    auto backend = std::make_unique<ChatAnswerBackend>(
        *env.transport, config.pool.model_by_backbone, system_wrapper_text());
    env.view_provider = std::make_unique<ChatViewProvider>(*backend, *env.cache);
    env.rewriter = std::make_unique<ChatRewriter>(*env.transport, config.pool.rewriter_model,
                                                  rewrite_template_text());
    env.backend = std::move(backend);
  }

  // restore persisted prompt versions from a previous refinement
  const auto state_file = env.dirs.prompts_dir() / "state.json";
  if (std::filesystem::exists(state_file)) {
    auto doc = load_json_file(state_file);
    for (auto& spec : env.pool) {
      if (!doc.contains(spec.id())) continue;
      const auto& entry = doc.at(spec.id());
      const std::string text = read_file(env.dirs.prompts_dir() / entry.at("file").get<std::string>());
      spec.prompt = make_prompt_version(text, entry.at("version").get<int>());
      if (spec.prompt.hash != entry.at("hash").get<std::string>()) {
        fail_data("prompt state: hash mismatch for " + spec.id());
      }
    }
  }
  return env;
}

std::vector<QAInstance> load_split(const PipelineEnv& env, const std::string& split) {
  std::string path;
  if (split == "train") path = env.config.paths.train;
  else if (split == "val") path = env.config.paths.val;
  else if (split == "test") path = env.config.paths.test;
  else fail_config("unknown split: " + split);
  if (path.empty()) fail_config("config: paths." + split + " is not set");
  return load_dataset(path, env.config.runtime.limit);
}

PrepareResult pipeline_prepare(PipelineEnv& env, const std::string& split) {
  const auto instances = load_split(env, split);
  const auto dir = env.dirs.graphs(split);
  std::filesystem::create_directories(dir);

  nlohmann::json manifest = nlohmann::json::object();
  if (std::filesystem::exists(env.dirs.graph_manifest(split))) {
    manifest = load_json_file(env.dirs.graph_manifest(split));
  }

  PrepareResult result;
  const auto ids = pool_ids(env.pool);
  const auto embed_texts = agent_embed_texts(env.pool);
  nlohmann::ordered_json new_manifest = nlohmann::ordered_json::object();
  for (const auto& inst : instances) {
    const std::string fp = graph_fingerprint(env.config, inst);
    const std::string fname = sanitize_filename(inst.id) + ".json";
    new_manifest[inst.id] = {{"file", fname}, {"fingerprint", fp}};
    const auto file = dir / fname;
    if (std::filesystem::exists(file) && manifest.contains(inst.id) &&
        manifest[inst.id].value("fingerprint", "") == fp) {
      ++result.skipped;
      continue;
    }
    try {
      const auto entities = env.extractor->extract(inst.context);
      const auto views = env.view_provider->views(env.pool, inst, entities);
      GraphBuildOptions opts;
      opts.cooccur_window = static_cast<std::size_t>(env.config.graph.cooccur_window);
      TypedGraph g = build_graph(inst, entities, views, ids, opts);
      embed_graph(g, *env.embedder, embed_texts);
      save_graph(g, file.string());
      ++result.written;
    } catch (const Error& e) {
      result.errors.push_back(inst.id + ": " + e.what());
    }
  }
  write_file(env.dirs.graph_manifest(split), new_manifest.dump(2) + "\n");
  return result;
}

std::vector<TypedGraph> load_split_graphs(const PipelineEnv& env, const std::string& split,
                                          const std::vector<QAInstance>& instances) {
  std::vector<TypedGraph> out;
  const auto expect_ids = pool_ids(env.pool);
  // the manifest maps instance ids to file names, which lets externally
  // produced graph files (pre-extracted pipelines) use any naming scheme
  nlohmann::json manifest = nlohmann::json::object();
  if (std::filesystem::exists(env.dirs.graph_manifest(split))) {
    manifest = load_json_file(env.dirs.graph_manifest(split));
  }
  for (const auto& inst : instances) {
    std::string fname = sanitize_filename(inst.id) + ".json";
    if (manifest.contains(inst.id) && manifest[inst.id].contains("file")) {
      fname = manifest[inst.id]["file"].get<std::string>();
    }
    const auto file = env.dirs.graphs(split) / fname;
    if (!std::filesystem::exists(file)) {
      fail_data("graph for instance '" + inst.id + "' missing; run `prepare` for split " + split);
    }
    TypedGraph g = load_graph(file.string());
    if (g.agent_ids() != expect_ids) {
      fail_data("graph for instance '" + inst.id +
                "' was prepared with a different pool; re-run `prepare`");
    }
    out.push_back(std::move(g));
  }
  return out;
}

TypedGraph build_instance_graph(PipelineEnv& env, const QAInstance& instance) {
  const auto entities = env.extractor->extract(instance.context);
  const auto views = env.view_provider->views(env.pool, instance, entities);
  GraphBuildOptions opts;
  opts.cooccur_window = static_cast<std::size_t>(env.config.graph.cooccur_window);
  TypedGraph g = build_graph(instance, entities, views, pool_ids(env.pool), opts);
  embed_graph(g, *env.embedder, agent_embed_texts(env.pool));
  return g;
}

PoolEvalResult pipeline_score(PipelineEnv& env, const std::string& split) {
  const auto instances = load_split(env, split);
  PoolEvalResult result = evaluate_pool(env.pool, instances, *env.cache, *env.backend,
                                        env.eval_options());
  nlohmann::ordered_json doc;
  doc["split"] = split;
  doc["agents"] = result.agent_ids;
  doc["instances"] = result.instance_ids;
  auto cells = nlohmann::ordered_json::object();
  for (const auto& [agent, row] : result.scores) {
    auto agent_cells = nlohmann::ordered_json::object();
    for (const auto& [inst, score] : row) {
      agent_cells[inst] = {{"f1", score.f1},
                          {"em", score.em},
                          {"answer", result.answers.at(agent).at(inst)}};
    }
    cells[agent] = std::move(agent_cells);
  }
  doc["cells"] = std::move(cells);
  write_file(env.dirs.scores(split), doc.dump() + "\n");
  return result;
}

PoolEvalResult load_scores(const PipelineEnv& env, const std::string& split) {
  const auto path = env.dirs.scores(split);
  if (!std::filesystem::exists(path)) {
    fail_data("score matrix for split '" + split + "' missing; run `score-agents` first");
  }
  auto doc = load_json_file(path);
  PoolEvalResult result;
  result.agent_ids = doc.at("agents").get<std::vector<std::string>>();
  result.instance_ids = doc.at("instances").get<std::vector<std::string>>();
  for (const auto& [agent, row] : doc.at("cells").items()) {
    for (const auto& [inst, cell] : row.items()) {
      result.scores[agent][inst] = {cell.at("f1").get<double>(), cell.at("em").get<bool>()};
      result.answers[agent][inst] = cell.at("answer").get<std::string>();
    }
  }
  return result;
}

namespace {

std::vector<TrainExample> build_train_examples(const PipelineEnv& env,
                                               const std::vector<QAInstance>& instances,
                                               const std::vector<TypedGraph>& graphs,
                                               const PoolEvalResult& scores) {
  const auto embed_texts = agent_embed_texts(env.pool);
  std::vector<TrainExample> out;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const QAInstance& inst = instances[i];
    std::map<std::string, double> f1s;
    for (const auto& agent : scores.agent_ids) {
      auto rit = scores.scores.find(agent);
      double f1 = 0.0;
      if (rit != scores.scores.end()) {
        auto cit = rit->second.find(inst.id);
        if (cit != rit->second.end()) f1 = cit->second.f1;
      }
      f1s[agent] = f1;
    }
    TrainExample ex;
    ex.graph = graphs[i];
    embed_graph(ex.graph, *env.embedder, embed_texts);
    ex.target = soft_targets(f1s, env.config.train.temperature);
    ex.category = effective_category(inst);
    ex.instance_id = inst.id;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<ValExample> build_val_examples(const PipelineEnv& env,
                                           const std::vector<QAInstance>& instances,
                                           const std::vector<TypedGraph>& graphs,
                                           const PoolEvalResult& scores) {
  const auto embed_texts = agent_embed_texts(env.pool);
  std::vector<ValExample> out;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    ValExample ex;
    ex.graph = graphs[i];
    embed_graph(ex.graph, *env.embedder, embed_texts);
    ex.golds = instances[i].gold_answers;
    for (const auto& [agent, row] : scores.answers) {
      auto it = row.find(instances[i].id);
      if (it != row.end()) ex.agent_answers[agent] = it->second;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

DiagnosticsBundle collect_diagnostics(const PipelineEnv& env, const RouterParams& params,
                                      const std::vector<QAInstance>& instances,
                                      const std::vector<TrainExample>& examples,
                                      const PoolEvalResult& scores) {
  std::map<std::string, RoutingDistribution> outputs;
  for (const auto& ex : examples) {
    outputs[ex.instance_id] = forward(params, ex.graph, RouterMode::Eval);
  }
  std::map<std::string, std::string> hashes;
  for (const auto& spec : env.pool) hashes[spec.id()] = spec.prompt.hash;
  DiagConfig dc;
  dc.failure_threshold = env.config.refine.failure_threshold;
  dc.archive_cap_per_agent = env.config.refine.archive_cap;
  return collect(scores, outputs, instances, hashes, dc);
}

}  // namespace

TrainOutput pipeline_train(PipelineEnv& env, std::optional<TrainConfig> override_config) {
  const TrainConfig cfg = override_config.value_or(env.config.train);
  const auto train_instances = load_split(env, "train");
  const auto val_instances = load_split(env, "val");
  const auto train_graphs = load_split_graphs(env, "train", train_instances);
  const auto val_graphs = load_split_graphs(env, "val", val_instances);
  const auto train_scores = load_scores(env, "train");
  const auto val_scores = load_scores(env, "val");

  const auto examples = build_train_examples(env, train_instances, train_graphs, train_scores);
  const auto vals = build_val_examples(env, val_instances, val_graphs, val_scores);

  const TrainedRouter trained = train(std::nullopt, examples, vals, cfg, env.backbone_map);

  std::filesystem::create_directories(env.dirs.checkpoints());
  Checkpoint ckpt;
  ckpt.params = trained.params;
  ckpt.config = cfg;
  ckpt.epoch = trained.best_epoch;
  ckpt.val_f1 = trained.best_val_f1;
  save_checkpoint(ckpt, env.dirs.stage1_checkpoint().string());

  std::ostringstream log;
  for (const auto& e : trained.log) {
    nlohmann::ordered_json line;
    line["epoch"] = e.epoch;
    line["train_loss"] = e.train_loss;
    line["val_f1"] = e.val_f1;
    line["lr"] = e.lr;
    log << line.dump() << "\n";
  }
  write_file(env.dirs.train_log(), log.str());

  std::filesystem::create_directories(env.dirs.diagnostics_dir());
  const DiagnosticsBundle bundle =
      collect_diagnostics(env, trained.params, train_instances, examples, train_scores);
  save_bundle(bundle, (env.dirs.diagnostics_dir() / "round0.json").string());

  RefinementState state;
  state.round = 0;
  state.checkpoint_path = env.dirs.stage1_checkpoint().string();
  state.checkpoint_val_f1 = trained.best_val_f1;
  state.diagnostics = bundle;
  save_refine_state(env, state);
  save_prompt_state(env);

  return {env.dirs.stage1_checkpoint().string(), trained.best_val_f1, trained.best_epoch};
}

void save_prompt_state(const PipelineEnv& env) {
  std::filesystem::create_directories(env.dirs.prompts_dir());
  nlohmann::ordered_json doc;
  for (const auto& spec : env.pool) {
    const std::string fname =
        sanitize_filename(spec.id()) + ".v" + std::to_string(spec.prompt.version) + ".txt";
    write_file(env.dirs.prompts_dir() / fname, spec.prompt.text);
    doc[spec.id()] = {{"version", spec.prompt.version}, {"hash", spec.prompt.hash}, {"file", fname}};
  }
  write_file(env.dirs.prompts_dir() / "state.json", doc.dump(2) + "\n");
}

void save_refine_state(const PipelineEnv& env, const RefinementState& state) {
  nlohmann::ordered_json doc;
  doc["round"] = state.round;
  doc["checkpoint_path"] = state.checkpoint_path;
  doc["checkpoint_val_f1"] = state.checkpoint_val_f1;
  doc["terminable"] = state.terminable;
  doc["reverted_last"] = state.reverted_last;
  doc["reject_counters"] = state.reject_counters;
  doc["frozen"] = std::vector<std::string>(state.frozen.begin(), state.frozen.end());
  const std::string diag_file = "round" + std::to_string(state.round) + ".json";
  doc["diagnostics_file"] = diag_file;
  std::filesystem::create_directories(env.dirs.diagnostics_dir());
  save_bundle(state.diagnostics, (env.dirs.diagnostics_dir() / diag_file).string());
  write_file(env.dirs.refine_state(), doc.dump(2) + "\n");
}

RefinementState load_refine_state(const PipelineEnv& env) {
  if (!std::filesystem::exists(env.dirs.refine_state())) {
    fail_data("no refinement state; run `train` first");
  }
  auto doc = load_json_file(env.dirs.refine_state());
  RefinementState state;
  state.round = doc.at("round").get<int>();
  state.checkpoint_path = doc.at("checkpoint_path").get<std::string>();
  state.checkpoint_val_f1 = doc.at("checkpoint_val_f1").get<double>();
  state.terminable = doc.value("terminable", false);
  state.reverted_last = doc.value("reverted_last", false);
  const auto counters = doc.value("reject_counters", nlohmann::json::object());
  for (const auto& [agent, count] : counters.items()) {
    state.reject_counters[agent] = count.get<int>();
  }
  for (const auto& agent : doc.value("frozen", nlohmann::json::array())) {
    state.frozen.insert(agent.get<std::string>());
  }
  state.diagnostics = load_bundle(
      (env.dirs.diagnostics_dir() / doc.at("diagnostics_file").get<std::string>()).string());
  return state;
}

RefinementState pipeline_refine(PipelineEnv& env, int rounds,
                                std::optional<TrainConfig> finetune_override) {
  RefinementState state = load_refine_state(env);
  const auto train_instances = load_split(env, "train");
  const auto val_instances = load_split(env, "val");
  const auto train_graphs = load_split_graphs(env, "train", train_instances);
  const auto val_graphs = load_split_graphs(env, "val", val_instances);

  RoundContext ctx;
  ctx.pool = &env.pool;
  ctx.backend = env.backend.get();
  ctx.cache = env.cache.get();
  ctx.rewriter = env.rewriter.get();
  ctx.train_instances = &train_instances;
  ctx.val_instances = &val_instances;
  ctx.train_graphs = &train_graphs;
  ctx.val_graphs = &val_graphs;
  ctx.embedder = env.embedder.get();
  ctx.train_config = finetune_override.value_or(env.config.train);
  ctx.backbone_of = env.backbone_map;
  ctx.run_dir = env.dirs.root;
  ctx.eval_options = env.eval_options();
  ctx.rewrite_retry = env.retry_policy();

  while (state.round < rounds && !state.terminable) {
    run_round(state, ctx, env.config.refine);
    save_prompt_state(env);
    save_refine_state(env, state);
  }
  return state;
}

TuneCandidate pipeline_tune(PipelineEnv& env) {
  const auto val_instances = load_split(env, "val");
  const auto val_graphs = load_split_graphs(env, "val", val_instances);
  const PoolEvalResult val_eval =
      evaluate_pool(env.pool, val_instances, *env.cache, *env.backend, env.eval_options());
  const Checkpoint ckpt = load_checkpoint(current_checkpoint_path(env));

  const auto embed_texts = agent_embed_texts(env.pool);
  std::vector<TuneInput> inputs;
  for (std::size_t i = 0; i < val_instances.size(); ++i) {
    TypedGraph g = val_graphs[i];
    embed_graph(g, *env.embedder, embed_texts);
    TuneInput input;
    input.dist = forward(ckpt.params, g, RouterMode::Eval);
    for (const auto& [agent, row] : val_eval.answers) {
      auto it = row.find(val_instances[i].id);
      if (it != row.end()) input.agent_answers[agent] = it->second;
    }
    input.golds = val_instances[i].gold_answers;
    inputs.push_back(std::move(input));
  }
  const TuneCandidate tuned = tune_adaptive(inputs);

  nlohmann::ordered_json doc;
  doc["tau"] = tuned.config.tau_agree;
  doc["k_min"] = tuned.config.k_min;
  doc["k_max"] = tuned.config.k_max;
  doc["val_mean_f1"] = tuned.mean_f1;
  doc["val_mean_calls"] = tuned.mean_calls;
  write_file(env.dirs.adaptive_file(), doc.dump(2) + "\n");
  return tuned;
}

std::string current_checkpoint_path(const PipelineEnv& env) {
  if (std::filesystem::exists(env.dirs.refine_state())) {
    auto doc = load_json_file(env.dirs.refine_state());
    return doc.at("checkpoint_path").get<std::string>();
  }
  if (std::filesystem::exists(env.dirs.stage1_checkpoint())) {
    return env.dirs.stage1_checkpoint().string();
  }
  fail_data("no router checkpoint; run `train` first");
}

InferSummary pipeline_infer(PipelineEnv& env, const std::string& split,
                            std::optional<AdaptiveConfig> override_config) {
  AdaptiveConfig cfg;
  if (override_config) {
    cfg = *override_config;
  } else if (std::filesystem::exists(env.dirs.adaptive_file())) {
    auto doc = load_json_file(env.dirs.adaptive_file());
    cfg.tau_agree = doc.at("tau").get<double>();
    cfg.k_min = doc.at("k_min").get<int>();
    cfg.k_max = doc.at("k_max").get<int>();
  } else {
    cfg = env.config.adaptive;
  }

  const auto instances = load_split(env, split);
  const auto graphs = load_split_graphs(env, split, instances);
  const Checkpoint ckpt = load_checkpoint(current_checkpoint_path(env));
  const auto embed_texts = agent_embed_texts(env.pool);

  InferSummary summary;
  std::ostringstream lines;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    TypedGraph g = graphs[i];
    embed_graph(g, *env.embedder, embed_texts);
    const RoutingDistribution dist = forward(ckpt.params, g, RouterMode::Eval);
    const AdaptiveResult r = adaptive_infer(dist, env.pool, instances[i], *env.cache, *env.backend,
                                            cfg, env.retry_policy());
    const Score s = best_score(r.answer, instances[i].gold_answers);

    nlohmann::ordered_json line;
    line["id"] = instances[i].id;
    line["answer"] = r.answer;
    line["gold"] = instances[i].gold_answers;
    line["f1"] = s.f1;
    line["em"] = s.em;
    line["k_star"] = r.k_star;
    line["stopped_early"] = r.stopped_early;
    line["agreement_trace"] = r.agreement_trace;
    auto consulted = nlohmann::ordered_json::array();
    for (const auto& c : r.consulted) {
      consulted.push_back({{"agent", c.agent_id}, {"weight", c.weight}, {"answer", c.answer}});
    }
    line["consulted"] = std::move(consulted);
    lines << line.dump() << "\n";

    summary.mean_f1 += s.f1;
    summary.mean_em += s.em ? 1.0 : 0.0;
    summary.mean_calls += r.k_star;
    ++summary.count;
  }
  if (summary.count > 0) {
    summary.mean_f1 /= summary.count;
    summary.mean_em /= summary.count;
    summary.mean_calls /= summary.count;
  }
  std::filesystem::create_directories(env.dirs.predictions_dir());
  const auto path = env.dirs.predictions_dir() / (split + ".jsonl");
  write_file(path, lines.str());
  summary.predictions_path = path.string();
  return summary;
}

EvalSummary pipeline_eval(const std::vector<std::string>& prediction_files) {
  if (prediction_files.empty()) fail_data("eval: no prediction files given");
  EvalSummary summary;
  for (const auto& file : prediction_files) {
    std::ifstream in(file);
    if (!in) fail_data("eval: cannot open " + file);
    std::string line;
    double f1 = 0.0, em = 0.0;
    int n = 0;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (trim_copy(line).empty()) continue;
      auto doc = nlohmann::json::parse(line, nullptr, false);
      if (doc.is_discarded()) {
        fail_data("eval: malformed line " + std::to_string(line_no) + " in " + file);
      }
      const std::string answer = doc.at("answer").get<std::string>();
      const auto golds = doc.at("gold").get<std::vector<std::string>>();
      const Score s = best_score(answer, golds);
      f1 += s.f1;
      em += s.em ? 1.0 : 0.0;
      ++n;
    }
    if (n == 0) fail_data("eval: empty prediction file " + file);
    summary.per_file_f1.push_back(f1 / n);
    summary.per_file_em.push_back(em / n);
  }
  const auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  summary.f1_mean = mean(summary.per_file_f1);
  summary.em_mean = mean(summary.per_file_em);
  if (summary.per_file_f1.size() > 1) {
    double df1 = 0.0, dem = 0.0;
    for (std::size_t i = 0; i < summary.per_file_f1.size(); ++i) {
      df1 += (summary.per_file_f1[i] - summary.f1_mean) * (summary.per_file_f1[i] - summary.f1_mean);
      dem += (summary.per_file_em[i] - summary.em_mean) * (summary.per_file_em[i] - summary.em_mean);
    }
    summary.f1_std = std::sqrt(df1 / static_cast<double>(summary.per_file_f1.size() - 1));
    summary.em_std = std::sqrt(dem / static_cast<double>(summary.per_file_em.size() - 1));
  }
  return summary;
}

InferSummary pipeline_run(PipelineEnv& env) {
  pipeline_prepare(env, "train");
  pipeline_prepare(env, "val");
  pipeline_prepare(env, "test");
  pipeline_score(env, "train");
  pipeline_score(env, "val");
  pipeline_train(env);
  pipeline_refine(env, env.config.refine.rounds);
  pipeline_tune(env);
  return pipeline_infer(env, "test");
}

}  // namespace routeforge
