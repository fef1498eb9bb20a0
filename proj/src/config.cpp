#include "routeforge/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace routeforge {

namespace {

struct IniDoc {
  // section -> key -> value
  std::map<std::string, std::map<std::string, std::string>> values;
  std::set<std::string> consumed;

  bool has(const std::string& section, const std::string& key) const {
    auto s = values.find(section);
    return s != values.end() && s->second.count(key);
  }
  std::string raw(const std::string& section, const std::string& key) {
    consumed.insert(section + "." + key);
    return values.at(section).at(key);
  }
  std::string get_string(const std::string& section, const std::string& key, std::string dflt) {
    return has(section, key) ? raw(section, key) : dflt;
  }
  double get_double(const std::string& section, const std::string& key, double dflt) {
    if (!has(section, key)) return dflt;
    try {
      return std::stod(raw(section, key));
    } catch (...) {
      fail_config("config: " + section + "." + key + " must be a number");
    }
  }
  long long get_int(const std::string& section, const std::string& key, long long dflt) {
    if (!has(section, key)) return dflt;
    try {
      return std::stoll(raw(section, key));
    } catch (...) {
      fail_config("config: " + section + "." + key + " must be an integer");
    }
  }
  std::vector<std::string> get_list(const std::string& section, const std::string& key,
                                    std::vector<std::string> dflt) {
    if (!has(section, key)) return dflt;
    std::vector<std::string> out;
    for (auto& part : split(raw(section, key), ',')) {
      const std::string t = trim_copy(part);
      if (!t.empty()) out.push_back(t);
    }
    return out;
  }
  std::vector<double> get_double_list(const std::string& section, const std::string& key,
                                      std::vector<double> dflt) {
    if (!has(section, key)) return dflt;
    std::vector<double> out;
    for (auto& part : split(raw(section, key), ',')) {
      try {
        out.push_back(std::stod(trim_copy(part)));
      } catch (...) {
        fail_config("config: " + section + "." + key + " must be a comma list of numbers");
      }
    }
    return out;
  }
};

IniDoc parse_ini(const std::string& text, const std::string& origin) {
  IniDoc doc;
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = trim_copy(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[' && t.back() == ']') {
      section = trim_copy(t.substr(1, t.size() - 2));
      if (section.empty()) fail_config(origin + ":" + std::to_string(line_no) + ": empty section");
      doc.values[section];
      continue;
    }
    auto eq = t.find('=');
    if (eq == std::string::npos) {
      fail_config(origin + ":" + std::to_string(line_no) + ": expected key = value");
    }
    if (section.empty()) {
      fail_config(origin + ":" + std::to_string(line_no) + ": key outside any [section]");
    }
    doc.values[section][trim_copy(t.substr(0, eq))] = trim_copy(t.substr(eq + 1));
  }
  return doc;
}

}  // namespace

void RunConfig::validate() const {
  if (pool.backend != "synthetic" && pool.backend != "http") {
    fail_config("config: pool.backend must be 'synthetic' or 'http'");
  }
  if (pool.backend == "http" && pool.endpoint.empty()) {
    fail_config("config: pool.backend=http requires pool.endpoint");
  }
  if (pool.backbones.empty() || pool.roles.empty()) {
    fail_config("config: pool needs backbones and roles");
  }
  if (graph.embed_dim < 1) fail_config("config: graph.embed_dim must be >= 1");
  if (runtime.concurrency < 1) fail_config("config: runtime.concurrency must be >= 1");
  train.validate();
  if (refine.alpha <= 0.0) fail_config("config: refine.alpha must be positive");
  if (refine.delta < 0.0) fail_config("config: refine.delta must be >= 0");
}

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  IniDoc ini = parse_ini(text, origin);
  RunConfig cfg;

  cfg.paths.train = ini.get_string("paths", "train", cfg.paths.train);
  cfg.paths.val = ini.get_string("paths", "val", cfg.paths.val);
  cfg.paths.test = ini.get_string("paths", "test", cfg.paths.test);
  cfg.paths.run_dir = ini.get_string("paths", "run_dir", cfg.paths.run_dir);
  cfg.paths.prompts_dir = ini.get_string("paths", "prompts_dir", cfg.paths.prompts_dir);

  cfg.pool.backend = ini.get_string("pool", "backend", cfg.pool.backend);
  cfg.pool.backbones = ini.get_list("pool", "backbones", cfg.pool.backbones);
  cfg.pool.roles = ini.get_list("pool", "roles", cfg.pool.roles);
  cfg.pool.endpoint = ini.get_string("pool", "endpoint", cfg.pool.endpoint);
  cfg.pool.endpoint_path = ini.get_string("pool", "endpoint_path", cfg.pool.endpoint_path);
  cfg.pool.api_key_env = ini.get_string("pool", "api_key_env", cfg.pool.api_key_env);
  cfg.pool.rewriter_model = ini.get_string("pool", "rewriter_model", cfg.pool.rewriter_model);
  cfg.pool.temperature = ini.get_double("pool", "temperature", cfg.pool.temperature);
  cfg.pool.max_tokens = static_cast<int>(ini.get_int("pool", "max_tokens", cfg.pool.max_tokens));
  for (const auto& bb : cfg.pool.backbones) {
    if (ini.has("pool", "model." + bb)) {
      cfg.pool.model_by_backbone[bb] = ini.raw("pool", "model." + bb);
    }
  }

  cfg.synthetic.seed =
      static_cast<std::uint64_t>(ini.get_int("synthetic", "seed", static_cast<long long>(cfg.synthetic.seed)));
  cfg.synthetic.best_competence =
      ini.get_double("synthetic", "best_competence", cfg.synthetic.best_competence);
  cfg.synthetic.other_competence =
      ini.get_double("synthetic", "other_competence", cfg.synthetic.other_competence);
  cfg.synthetic.degraded_competence =
      ini.get_double("synthetic", "degraded_competence", cfg.synthetic.degraded_competence);
  cfg.synthetic.degrade_marker =
      ini.get_string("synthetic", "degrade_marker", cfg.synthetic.degrade_marker);
  cfg.synthetic.distractor_classes = static_cast<int>(
      ini.get_int("synthetic", "distractor_classes", cfg.synthetic.distractor_classes));
  cfg.synthetic.view_rate = ini.get_double("synthetic", "view_rate", cfg.synthetic.view_rate);
  cfg.synthetic.profiles_file =
      ini.get_string("synthetic", "profiles_file", cfg.synthetic.profiles_file);

  cfg.graph.embed_dim = static_cast<int>(ini.get_int("graph", "embed_dim", cfg.graph.embed_dim));
  cfg.graph.max_entities =
      static_cast<int>(ini.get_int("graph", "max_entities", cfg.graph.max_entities));
  cfg.graph.cooccur_window =
      static_cast<int>(ini.get_int("graph", "cooccur_window", cfg.graph.cooccur_window));

  cfg.train.layers = static_cast<int>(ini.get_int("train", "layers", cfg.train.layers));
  cfg.train.hidden = static_cast<int>(ini.get_int("train", "hidden", cfg.train.hidden));
  cfg.train.dropout = ini.get_double("train", "dropout", cfg.train.dropout);
  cfg.train.lr = ini.get_double("train", "lr", cfg.train.lr);
  cfg.train.temperature = ini.get_double("train", "temperature", cfg.train.temperature);
  cfg.train.label_smoothing =
      ini.get_double("train", "label_smoothing", cfg.train.label_smoothing);
  cfg.train.lambda_bb = ini.get_double("train", "lambda_bb", cfg.train.lambda_bb);
  cfg.train.lambda_ent = ini.get_double("train", "lambda_ent", cfg.train.lambda_ent);
  cfg.train.aux_smoothing = ini.get_double("train", "aux_smoothing", cfg.train.aux_smoothing);
  cfg.train.max_epochs = static_cast<int>(ini.get_int("train", "max_epochs", cfg.train.max_epochs));
  cfg.train.patience = static_cast<int>(ini.get_int("train", "patience", cfg.train.patience));
  cfg.train.grad_accumulation = static_cast<int>(
      ini.get_int("train", "grad_accumulation", cfg.train.grad_accumulation));
  cfg.train.seed =
      static_cast<std::uint64_t>(ini.get_int("train", "seed", static_cast<long long>(cfg.train.seed)));

  cfg.refine.rounds = static_cast<int>(ini.get_int("refine", "rounds", cfg.refine.rounds));
  cfg.refine.n_max = static_cast<int>(ini.get_int("refine", "n_max", cfg.refine.n_max));
  cfg.refine.n_candidates =
      static_cast<int>(ini.get_int("refine", "n_candidates", cfg.refine.n_candidates));
  cfg.refine.rewrite_temperatures =
      ini.get_double_list("refine", "rewrite_temperatures", cfg.refine.rewrite_temperatures);
  cfg.refine.alpha = ini.get_double("refine", "alpha", cfg.refine.alpha);
  cfg.refine.delta = ini.get_double("refine", "delta", cfg.refine.delta);
  cfg.refine.k_freeze = static_cast<int>(ini.get_int("refine", "k_freeze", cfg.refine.k_freeze));
  cfg.refine.failure_threshold =
      ini.get_double("refine", "failure_threshold", cfg.refine.failure_threshold);
  cfg.refine.archive_cap =
      static_cast<int>(ini.get_int("refine", "archive_cap", cfg.refine.archive_cap));
  cfg.refine.val_sample =
      static_cast<int>(ini.get_int("refine", "val_sample", cfg.refine.val_sample));
  cfg.refine.finetune_epochs =
      static_cast<int>(ini.get_int("refine", "finetune_epochs", cfg.refine.finetune_epochs));
  cfg.refine.router_regression =
      ini.get_double("refine", "router_regression", cfg.refine.router_regression);
  cfg.refine.max_prompt_words =
      static_cast<int>(ini.get_int("refine", "max_prompt_words", cfg.refine.max_prompt_words));
  cfg.refine.seed =
      static_cast<std::uint64_t>(ini.get_int("refine", "seed", static_cast<long long>(cfg.refine.seed)));

  cfg.adaptive.tau_agree = ini.get_double("adaptive", "tau", cfg.adaptive.tau_agree);
  cfg.adaptive.k_min = static_cast<int>(ini.get_int("adaptive", "k_min", cfg.adaptive.k_min));
  cfg.adaptive.k_max = static_cast<int>(ini.get_int("adaptive", "k_max", cfg.adaptive.k_max));

  cfg.runtime.concurrency =
      static_cast<int>(ini.get_int("runtime", "concurrency", cfg.runtime.concurrency));
  cfg.runtime.retries = static_cast<int>(ini.get_int("runtime", "retries", cfg.runtime.retries));
  cfg.runtime.backoff_ms =
      static_cast<int>(ini.get_int("runtime", "backoff_ms", cfg.runtime.backoff_ms));
  cfg.runtime.missing_threshold =
      ini.get_double("runtime", "missing_threshold", cfg.runtime.missing_threshold);
  cfg.runtime.limit =
      static_cast<std::size_t>(ini.get_int("runtime", "limit", static_cast<long long>(cfg.runtime.limit)));

  // reject typo'd keys rather than silently ignoring them
  for (const auto& [section, kv] : ini.values) {
    for (const auto& [key, value] : kv) {
      if (!ini.consumed.count(section + "." + key)) {
        fail_config("config: unknown key " + section + "." + key);
      }
    }
  }

  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_config("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path);
}

}  // namespace routeforge
