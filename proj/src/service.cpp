#include "routeforge/service.hpp"

#include <fstream>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

namespace routeforge {

struct RouteService::Impl {
  PipelineEnv& env;
  Checkpoint checkpoint;
  AdaptiveConfig adaptive;
  SeededViewProvider views;  // no backend calls on the /route path
  httplib::Server server;
  std::thread thread;

  explicit Impl(PipelineEnv& e)
      : env(e),
        checkpoint(load_checkpoint(current_checkpoint_path(e))),
        adaptive(e.config.adaptive),
        views(e.config.synthetic.seed, e.config.synthetic.view_rate) {
    if (std::filesystem::exists(env.dirs.adaptive_file())) {
      std::ifstream in(env.dirs.adaptive_file());
      std::stringstream ss;
      ss << in.rdbuf();
      auto doc = nlohmann::json::parse(ss.str(), nullptr, false);
      if (!doc.is_discarded()) {
        adaptive.tau_agree = doc.value("tau", adaptive.tau_agree);
        adaptive.k_min = doc.value("k_min", adaptive.k_min);
        adaptive.k_max = doc.value("k_max", adaptive.k_max);
      }
    }
    install_routes();
  }

  QAInstance instance_from_body(const std::string& body) {
    auto doc = nlohmann::json::parse(body, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) {
      fail_data("body must be a JSON object {\"question\", \"context\"}");
    }
    if (!doc.contains("question") || !doc["question"].is_string() || !doc.contains("context") ||
        !doc["context"].is_string()) {
      fail_data("body must carry string fields 'question' and 'context'");
    }
    QAInstance inst;
    inst.question = doc["question"].get<std::string>();
    inst.context = doc["context"].get<std::string>();
    if (inst.question.empty()) fail_data("'question' must be non-empty");
    inst.id = "req-" + hex64(hash_parts({inst.question, inst.context}));
    inst.gold_answers = {""};  // scoring fields unused on the service path
    if (doc.contains("category") && doc["category"].is_string()) {
      inst.category = doc["category"].get<std::string>();
    }
    return inst;
  }

  RoutingDistribution route(const QAInstance& inst) {
    const auto entities = env.extractor->extract(inst.context);
    const auto agent_views = views.views(env.pool, inst, entities);
    GraphBuildOptions opts;
    opts.cooccur_window = static_cast<std::size_t>(env.config.graph.cooccur_window);
    std::vector<std::string> ids;
    for (const auto& spec : env.pool) ids.push_back(spec.id());
    TypedGraph g = build_graph(inst, entities, agent_views, ids, opts);
    embed_graph(g, *env.embedder, agent_embed_texts(env.pool));
    return forward(checkpoint.params, g, RouterMode::Eval);
  }

  void install_routes() {
    server.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"status":"ok"})", "application/json");
    });

    server.Post("/route", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        const QAInstance inst = instance_from_body(req.body);
        const RoutingDistribution dist = route(inst);
        nlohmann::ordered_json out;
        out["distribution"] = dist.prob_map();
        out["ranking"] = rank_agents(dist);
        res.set_content(out.dump(), "application/json");
      } catch (const Error& e) {
        res.status = e.kind() == ErrorKind::Data ? 400 : 500;
        res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
      }
    });

    server.Post("/answer", [this](const httplib::Request& req, httplib::Response& res) {
      QAInstance inst;
      try {
        inst = instance_from_body(req.body);
      } catch (const Error& e) {
        res.status = 400;
        res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
        return;
      }
      try {
        const RoutingDistribution dist = route(inst);
        const AdaptiveResult r = adaptive_infer(dist, env.pool, inst, *env.cache, *env.backend,
                                                adaptive, env.retry_policy());
        nlohmann::ordered_json out;
        out["answer"] = r.answer;
        out["k_star"] = r.k_star;
        out["stopped_early"] = r.stopped_early;
        out["agreement_trace"] = r.agreement_trace;
        auto consulted = nlohmann::ordered_json::array();
        for (const auto& c : r.consulted) {
          consulted.push_back({{"agent", c.agent_id}, {"weight", c.weight}, {"answer", c.answer}});
        }
        out["consulted"] = std::move(consulted);
        res.set_content(out.dump(), "application/json");
      } catch (const Error& e) {
        res.status = e.kind() == ErrorKind::Backend ? 503 : 500;
        res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
      }
    });
  }
};

RouteService::RouteService(PipelineEnv& env) : impl_(std::make_unique<Impl>(env)) {}

RouteService::~RouteService() { stop(); }

int RouteService::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
    if (bound <= 0) fail_backend("service: cannot bind to " + host);
  } else {
    if (!impl_->server.bind_to_port(host, port)) {
      fail_backend("service: cannot bind to " + host + ":" + std::to_string(port));
    }
  }
  impl_->thread = std::thread([this]() { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void RouteService::wait() {
  if (impl_->thread.joinable()) impl_->thread.join();
}

void RouteService::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace routeforge
