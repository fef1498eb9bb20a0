#include "routeforge/agents.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "routeforge/prompts.hpp"

namespace routeforge {

namespace {

std::string cache_key_string(const CacheKey& key) {
  return key.agent_id + "\x1f" + key.instance_id + "\x1f" + key.prompt_hash;
}

std::string truncate_words(const std::string& s, std::size_t max_words = 12) {
  auto toks = split_ws(s);
  if (toks.size() > max_words) toks.resize(max_words);
  return join(toks, " ");
}

std::optional<std::string> last_json_answer(const std::string& raw) {
  std::size_t pos = raw.rfind('{');
  while (pos != std::string::npos) {
    int depth = 0;
    bool in_str = false, esc = false;
    for (std::size_t i = pos; i < raw.size(); ++i) {
      const char c = raw[i];
      if (in_str) {
        if (esc) {
          esc = false;
        } else if (c == '\\') {
          esc = true;
        } else if (c == '"') {
          in_str = false;
        }
        continue;
      }
      if (c == '"') {
        in_str = true;
      } else if (c == '{') {
        ++depth;
      } else if (c == '}') {
        if (--depth == 0) {
          auto j = nlohmann::json::parse(raw.substr(pos, i - pos + 1), nullptr, false);
          if (!j.is_discarded() && j.is_object() && j.contains("answer")) {
            const auto& v = j["answer"];
            return v.is_string() ? v.get<std::string>() : v.dump();
          }
          break;
        }
      }
    }
    if (pos == 0) break;
    pos = raw.rfind('{', pos - 1);
  }
  return std::nullopt;
}

std::optional<std::string> last_boxed_span(const std::string& raw) {
  const std::string marker = "\\boxed{";
  const std::size_t pos = raw.rfind(marker);
  if (pos == std::string::npos) return std::nullopt;
  int depth = 1;
  for (std::size_t i = pos + marker.size(); i < raw.size(); ++i) {
    if (raw[i] == '{') ++depth;
    else if (raw[i] == '}' && --depth == 0) {
      return raw.substr(pos + marker.size(), i - pos - marker.size());
    }
  }
  return std::nullopt;
}

std::string fill_wrapper(const std::string& wrapper, const std::string& role_name,
                         const std::string& role_prompt) {
  std::string out = wrapper;
  auto replace_all = [&out](const std::string& from, const std::string& to) {
    std::size_t pos = 0;
    while ((pos = out.find(from, pos)) != std::string::npos) {
      out.replace(pos, from.size(), to);
      pos += to.size();
    }
  };
  replace_all("<role_name>", role_name);
  replace_all("<role_prompt>", role_prompt);
  return out;
}

}  // namespace

PromptVersion make_prompt_version(const std::string& text, int version) {
  return {text, version, hex64(fnv1a64(text))};
}

std::vector<AgentSpec> make_pool(const std::vector<std::string>& backbones,
                                 const std::vector<std::string>& roles,
                                 const std::string& prompts_dir) {
  if (backbones.empty() || roles.empty()) fail_config("pool needs at least one backbone and role");
  std::vector<AgentSpec> pool;
  for (const auto& bb : backbones) {
    for (const auto& role : roles) {
      AgentSpec spec;
      spec.backbone = bb;
      spec.role = role;
      spec.prompt = make_prompt_version(load_role_prompt(prompts_dir, role), 0);
      pool.push_back(std::move(spec));
    }
  }
  std::sort(pool.begin(), pool.end(),
            [](const AgentSpec& a, const AgentSpec& b) { return a.id() < b.id(); });
  return pool;
}

const AgentSpec* find_agent(const std::vector<AgentSpec>& pool, const std::string& agent_id) {
  for (const auto& spec : pool) {
    if (spec.id() == agent_id) return &spec;
  }
  return nullptr;
}

Cache::Cache(const std::filesystem::path& dir) : dir_(dir) {
  std::filesystem::create_directories(dir_);
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir_)) {
    if (entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& file : files) {
    std::ifstream in(file);
    std::stringstream ss;
    ss << in.rdbuf();
    auto doc = nlohmann::json::parse(ss.str(), nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) continue;  // skip unreadable entries
    CacheKey key{doc.value("agent_id", ""), doc.value("instance_id", ""),
                 doc.value("prompt_hash", "")};
    CacheEntry e;
    e.raw_output = doc.value("raw_output", "");
    e.parsed_answer = doc.value("parsed_answer", "");
    e.f1 = doc.value("f1", 0.0);
    e.em = doc.value("em", false);
    e.timestamp = doc.value("timestamp", static_cast<std::int64_t>(0));
    index_[cache_key_string(key)] = std::move(e);
  }
}

std::optional<CacheEntry> Cache::lookup(const CacheKey& key) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = index_.find(cache_key_string(key));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void Cache::put(const CacheKey& key, const CacheEntry& entry) {
  {
    std::lock_guard<std::mutex> lock(mu_);
    index_[cache_key_string(key)] = entry;
  }
  if (dir_.empty()) return;
  nlohmann::ordered_json doc;
  doc["agent_id"] = key.agent_id;
  doc["instance_id"] = key.instance_id;
  doc["prompt_hash"] = key.prompt_hash;
  doc["raw_output"] = entry.raw_output;
  doc["parsed_answer"] = entry.parsed_answer;
  doc["f1"] = entry.f1;
  doc["em"] = entry.em;
  doc["timestamp"] = entry.timestamp;
  // unique temp name so duplicate concurrent misses on one key converge via
  // atomic rename (last write wins)
  static std::atomic<std::uint64_t> tmp_counter{0};
  const auto path = dir_ / (digest(key) + ".json");
  const auto tmp =
      dir_ / (digest(key) + "." + std::to_string(tmp_counter.fetch_add(1)) + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << doc.dump();
  }
  std::filesystem::rename(tmp, path);
}

std::size_t Cache::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return index_.size();
}

std::string Cache::digest(const CacheKey& key) {
  return hex64(hash_parts({key.agent_id, key.instance_id, key.prompt_hash}));
}

double SyntheticProfile::get(const std::string& category) const {
  auto it = competence.find(category);
  return it != competence.end() ? it->second : default_competence;
}

void SyntheticBackend::set_profile(const std::string& agent_id, SyntheticProfile profile) {
  for (const auto& [cat, c] : profile.competence) {
    if (c < 0.0 || c > 1.0) fail_config("synthetic competence out of [0,1] for " + agent_id);
  }
  profiles_[agent_id] = std::move(profile);
}

std::string SyntheticBackend::answer(const AgentSpec& agent, const QAInstance& instance,
                                     Cache* /*cache*/) {
  note_transport_call();
  double competence;
  if (!degrade_marker_.empty() && contains(agent.prompt.text, degrade_marker_)) {
    competence = degraded_competence_;
  } else {
    auto it = profiles_.find(agent.id());
    competence = it != profiles_.end() ? it->second.get(effective_category(instance))
                                       : SyntheticProfile{}.get(effective_category(instance));
  }
  const double draw = unit_double(mix64(hash_parts({agent.id(), instance.id, "draw"}) ^ seed_));
  std::string text;
  if (draw < competence) {
    text = instance.gold_answers.front();
  } else {
    const std::uint64_t slot =
        mix64(hash_parts({agent.id(), instance.id, "slot"}) ^ seed_) %
        static_cast<std::uint64_t>(std::max(1, distractor_classes_));
    text = "wrong-" + instance.id + "-" + std::string(1, static_cast<char>('a' + slot));
  }
  return nlohmann::json{{"answer", text}}.dump();
}

ChatAnswerBackend::ChatAnswerBackend(ChatTransport& transport,
                                     std::map<std::string, std::string> model_by_backbone,
                                     std::string system_wrapper)
    : transport_(transport),
      model_by_backbone_(std::move(model_by_backbone)),
      system_wrapper_(std::move(system_wrapper)) {}

std::string ChatAnswerBackend::sub_call(const AgentSpec& agent, const QAInstance& instance,
                                        Cache* cache, const std::string& tag,
                                        const std::string& sub_prompt,
                                        const std::string& user_content) {
  const CacheKey key{agent.id() + "#" + tag, instance.id, agent.prompt.hash};
  if (cache) {
    if (auto hit = cache->lookup(key)) return hit->raw_output;
  }
  auto it = model_by_backbone_.find(agent.backbone);
  const std::string model = it != model_by_backbone_.end() ? it->second : agent.backbone;
  const std::string system = fill_wrapper(system_wrapper_, agent.role, sub_prompt);
  note_transport_call();
  const std::string raw = transport_.complete(
      model, {{"system", system}, {"user", user_content}}, agent.gen.temperature,
      agent.gen.max_tokens);
  if (cache) {
    CacheEntry entry;
    entry.raw_output = raw;
    entry.parsed_answer = parse_answer(raw);
    entry.timestamp = static_cast<std::int64_t>(std::time(nullptr));
    cache->put(key, entry);
  }
  return raw;
}

std::string ChatAnswerBackend::answer(const AgentSpec& agent, const QAInstance& instance,
                                      Cache* cache) {
  const std::string base =
      "Question: " + instance.question + "\n\nContext: " + instance.context;
  const auto sections = parse_prompt_sections(agent.prompt.text);
  auto section = [&](const char* name) -> const std::string& { return sections.at(name); };

  if (sections.count("debater_a") && sections.count("debater_b") && sections.count("judge")) {
    const std::string a = sub_call(agent, instance, cache, "debater_a", section("debater_a"), base);
    const std::string b = sub_call(agent, instance, cache, "debater_b", section("debater_b"),
                                   base + "\n\nDebater A says:\n" + a);
    return sub_call(agent, instance, cache, "judge", section("judge"),
                    base + "\n\nDebater A says:\n" + a + "\n\nDebater B says:\n" + b);
  }
  if (sections.count("react") && sections.count("reflect")) {
    const std::string first = sub_call(agent, instance, cache, "react1", section("react"), base);
    const std::string review = sub_call(agent, instance, cache, "reflect1", section("reflect"),
                                        base + "\n\nAgent answer:\n" + first);
    if (contains(review, "Status: revise")) {
      return sub_call(agent, instance, cache, "react2", section("react"),
                      base + "\n\nReviewer feedback:\n" + review);
    }
    return first;
  }
  if (sections.count("think") && sections.count("summarize")) {
    const std::string t1 = sub_call(agent, instance, cache, "think1", section("think"), base);
    const std::string t2 = sub_call(agent, instance, cache, "think2", section("think"), base);
    return sub_call(agent, instance, cache, "summarize", section("summarize"),
                    base + "\n\nAgent A:\n" + t1 + "\n\nAgent B:\n" + t2);
  }

  // single-turn role; the top-level cache entry written by invoke() suffices
  auto it = model_by_backbone_.find(agent.backbone);
  const std::string model = it != model_by_backbone_.end() ? it->second : agent.backbone;
  const std::string system =
      fill_wrapper(system_wrapper_, agent.role, trim_copy(agent.prompt.text));
  note_transport_call();
  return transport_.complete(model, {{"system", system}, {"user", base}}, agent.gen.temperature,
                             agent.gen.max_tokens);
}

std::set<std::size_t> ChatAnswerBackend::entity_view(const AgentSpec& agent,
                                                     const QAInstance& instance,
                                                     const std::vector<EntityMention>& entities,
                                                     Cache* cache) {
  if (entities.empty()) return {};
  std::string user = "Question: " + instance.question + "\n\nContext: " + instance.context +
                     "\n\nEntities:\n";
  for (std::size_t i = 0; i < entities.size(); ++i) {
    user += std::to_string(i) + ". " + entities[i].surface + "\n";
  }
  user += "\nReply ONLY with the comma-separated indices of up to 8 entities you would attend "
          "to when answering.";
  const std::string sub_prompt =
      "You identify which context entities matter for answering the question.";
  const std::string raw = sub_call(agent, instance, cache, "views", sub_prompt, user);

  std::set<std::size_t> out;
  std::size_t i = 0;
  while (i < raw.size()) {
    if (std::isdigit(static_cast<unsigned char>(raw[i]))) {
      std::size_t j = i;
      while (j < raw.size() && std::isdigit(static_cast<unsigned char>(raw[j]))) ++j;
      const unsigned long v = std::stoul(raw.substr(i, j - i));
      if (v < entities.size()) out.insert(static_cast<std::size_t>(v));
      i = j;
    } else {
      ++i;
    }
  }
  return out;
}

std::string parse_answer(const std::string& raw) {
  if (auto json_ans = last_json_answer(raw)) return truncate_words(trim_copy(*json_ans));
  if (auto boxed = last_boxed_span(raw)) return truncate_words(trim_copy(*boxed));
  const auto lines = split(raw, '\n');
  for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
    const std::string t = trim_copy(*it);
    if (!t.empty()) return truncate_words(t);
  }
  return "";
}

InvokeResult invoke(const AgentSpec& agent, const QAInstance& instance, Cache& cache,
                    AnswerBackend& backend, const RetryPolicy& retry) {
  const CacheKey key{agent.id(), instance.id, agent.prompt.hash};
  if (auto hit = cache.lookup(key)) {
    return {hit->parsed_answer, hit->raw_output, true};
  }

  std::string raw;
  int attempt = 0;
  for (;;) {
    try {
      raw = backend.answer(agent, instance, &cache);
      break;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Backend || ++attempt >= retry.attempts) {
        fail_backend("agent " + agent.id() + " on instance " + instance.id + ": " + e.what());
      }
      std::this_thread::sleep_for(
          std::chrono::milliseconds(retry.base_backoff_ms * (1 << (attempt - 1))));
    }
  }
  backend.note_logical_call();

  CacheEntry entry;
  entry.raw_output = raw;
  entry.parsed_answer = parse_answer(raw);
  const Score s = best_score(entry.parsed_answer, instance.gold_answers);
  entry.f1 = s.f1;
  entry.em = s.em;
  entry.timestamp = static_cast<std::int64_t>(std::time(nullptr));
  cache.put(key, entry);
  return {entry.parsed_answer, entry.raw_output, false};
}

double PoolEvalResult::mean_f1(const std::string& agent_id) const {
  auto it = scores.find(agent_id);
  if (it == scores.end() || it->second.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [inst, s] : it->second) sum += s.f1;
  return sum / static_cast<double>(it->second.size());
}

PoolEvalResult evaluate_pool(const std::vector<AgentSpec>& pool,
                             const std::vector<QAInstance>& instances, Cache& cache,
                             AnswerBackend& backend, const PoolEvalOptions& options) {
  if (pool.empty()) fail_data("evaluate_pool: empty pool");
  PoolEvalResult result;
  for (const auto& spec : pool) result.agent_ids.push_back(spec.id());
  std::sort(result.agent_ids.begin(), result.agent_ids.end());
  for (const auto& inst : instances) result.instance_ids.push_back(inst.id);

  struct Cell {
    bool ok = false;
    Score score;
    std::string answer;
  };
  const std::size_t n_cells = pool.size() * instances.size();
  std::vector<Cell> cells(n_cells);

  auto eval_cell = [&](std::size_t flat) {
    const std::size_t ai = flat / instances.size();
    const std::size_t ii = flat % instances.size();
    try {
      const InvokeResult r = invoke(pool[ai], instances[ii], cache, backend, options.retry);
      const Score s = best_score(r.answer, instances[ii].gold_answers);
      cells[flat] = {true, s, r.answer};
    } catch (const Error&) {
      cells[flat] = {};
    }
  };

  const int workers = std::max(1, options.concurrency);
  if (workers == 1 || n_cells < 2) {
    for (std::size_t flat = 0; flat < n_cells; ++flat) eval_cell(flat);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> threads;
    for (int w = 0; w < workers; ++w) {
      threads.emplace_back([&]() {
        for (;;) {
          const std::size_t flat = next.fetch_add(1);
          if (flat >= n_cells) return;
          eval_cell(flat);
        }
      });
    }
    for (auto& t : threads) t.join();
  }

  for (std::size_t ai = 0; ai < pool.size(); ++ai) {
    for (std::size_t ii = 0; ii < instances.size(); ++ii) {
      const Cell& c = cells[ai * instances.size() + ii];
      const std::string& agent_id = pool[ai].id();
      if (c.ok) {
        result.scores[agent_id][instances[ii].id] = c.score;
        result.answers[agent_id][instances[ii].id] = c.answer;
      } else {
        result.missing.emplace_back(agent_id, instances[ii].id);
      }
    }
  }
  std::sort(result.missing.begin(), result.missing.end());

  if (n_cells > 0) {
    const double frac = static_cast<double>(result.missing.size()) / static_cast<double>(n_cells);
    if (frac > options.missing_threshold) {
      std::map<std::string, int> per_agent;
      for (const auto& [agent, inst] : result.missing) ++per_agent[agent];
      std::string breakdown;
      for (const auto& [agent, count] : per_agent) {
        breakdown += " " + agent + ":" + std::to_string(count);
      }
      fail_backend("evaluate_pool: missing fraction " + std::to_string(frac) +
                   " exceeds threshold; failures per agent:" + breakdown);
    }
  }
  return result;
}

std::map<std::string, std::set<std::size_t>> SeededViewProvider::views(
    const std::vector<AgentSpec>& pool, const QAInstance& /*instance*/,
    const std::vector<EntityMention>& entities) {
  std::map<std::string, std::set<std::size_t>> out;
  for (const auto& spec : pool) {
    std::set<std::size_t> v;
    for (std::size_t e = 0; e < entities.size(); ++e) {
      const double draw =
          unit_double(mix64(hash_parts({spec.id(), entities[e].surface, "view"}) ^ seed_));
      if (draw < rate_) v.insert(e);
    }
    if (!v.empty()) out[spec.id()] = v;
  }
  return out;
}

std::map<std::string, std::set<std::size_t>> ChatViewProvider::views(
    const std::vector<AgentSpec>& pool, const QAInstance& instance,
    const std::vector<EntityMention>& entities) {
  std::map<std::string, std::set<std::size_t>> out;
  for (const auto& spec : pool) {
    auto v = backend_.entity_view(spec, instance, entities, &cache_);
    if (!v.empty()) out[spec.id()] = std::move(v);
  }
  return out;
}

std::map<std::string, std::string> agent_embed_texts(const std::vector<AgentSpec>& pool) {
  std::map<std::string, std::string> out;
  for (const auto& spec : pool) {
    out[spec.id()] = spec.backbone + " " + spec.role + " " + spec.prompt.text.substr(0, 256);
  }
  return out;
}

}  // namespace routeforge
