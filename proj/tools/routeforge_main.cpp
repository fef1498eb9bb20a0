#include <iostream>

#include <CLI11.hpp>

#include "routeforge/pipeline.hpp"
#include "routeforge/prompts.hpp"
#include "routeforge/service.hpp"

namespace {

using namespace routeforge;

int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Data: return 3;
    case ErrorKind::Backend: return 4;
    case ErrorKind::Numeric: return 5;
  }
  return 1;
}

void print_prepare(const std::string& split, const PrepareResult& r) {
  std::cout << "prepare " << split << ": " << r.written << " written, " << r.skipped
            << " skipped";
  if (!r.errors.empty()) std::cout << ", " << r.errors.size() << " failed";
  std::cout << "\n";
  for (const auto& e : r.errors) std::cerr << "  error: " << e << "\n";
}

void print_infer(const InferSummary& s) {
  std::cout << "predictions: " << s.predictions_path << "\n";
  std::cout << "instances: " << s.count << "  mean F1: " << 100.0 * s.mean_f1
            << "  EM: " << 100.0 * s.mean_em << "  mean agent calls: " << s.mean_calls << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-graph routing over an LLM agent pool with closed-loop prompt "
               "refinement and adaptive early-stopping inference"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("-c,--config", config_path, "Path to the run config file");

  long long limit = -1;
  app.add_option("--limit", limit, "Cap dataset ingestion at N instances per split");

  std::string split = "train";
  std::vector<std::string> pred_files;
  int rounds = -1;
  double tau = -1.0;
  int kmin = -1, kmax = -1;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string prompts_out;

  auto* prepare = app.add_subcommand("prepare", "Build and embed one graph per instance");
  prepare->add_option("--split", split, "train|val|test|all")->default_val("all");

  auto* score = app.add_subcommand("score-agents", "Execute the pool and persist the score matrix");
  score->add_option("--split", split)->default_val("train");

  app.add_subcommand("train", "Train the router and collect diagnostics");

  auto* diagnose = app.add_subcommand("diagnose", "Print the diagnostics report");
  (void)diagnose;

  auto* refine = app.add_subcommand("refine", "Run closed-loop prompt refinement rounds");
  refine->add_option("--rounds", rounds, "Total rounds (default from config)");

  app.add_subcommand("tune-adaptive", "Grid-search (tau, k_min, k_max) on validation");

  auto* infer = app.add_subcommand("infer", "Adaptive inference over a split");
  infer->add_option("--split", split)->default_val("test");
  infer->add_option("--tau", tau, "Agreement threshold override");
  infer->add_option("--kmin", kmin, "Minimum consulted agents override");
  infer->add_option("--kmax", kmax, "Maximum consulted agents override");

  auto* eval = app.add_subcommand("eval", "F1/EM summary over prediction files");
  eval->add_option("--predictions", pred_files, "Prediction JSONL files (repeatable)")
      ->required()
      ->expected(-1);

  app.add_subcommand("run", "All stages chained: prepare, score, train, refine, tune, infer");

  auto* serve = app.add_subcommand("serve", "Serve POST /route, POST /answer, GET /healthz");
  serve->add_option("--host", host)->default_val("127.0.0.1");
  serve->add_option("--port", port)->default_val(8080);

  auto* prompts = app.add_subcommand("write-prompts", "Materialize the shipped role prompts");
  prompts->add_option("--out", prompts_out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (prompts->parsed()) {
      write_default_prompts(prompts_out);
      std::cout << "wrote prompt files to " << prompts_out << "\n";
      return 0;
    }

    if (config_path.empty()) fail_config("pass --config <file> (see README for the format)");
    RunConfig config = load_run_config(config_path);
    if (limit >= 0) config.runtime.limit = static_cast<std::size_t>(limit);
    if (eval->parsed()) {
      const EvalSummary s = pipeline_eval(pred_files);
      std::cout << "files: " << s.per_file_f1.size() << "\n";
      std::cout << "F1: " << 100.0 * s.f1_mean << " +/- " << 100.0 * s.f1_std << "\n";
      std::cout << "EM: " << 100.0 * s.em_mean << " +/- " << 100.0 * s.em_std << "\n";
      return 0;
    }

    PipelineEnv env = make_env(config);

    if (prepare->parsed()) {
      bool failed = false;
      const std::vector<std::string> splits =
          split == "all" ? std::vector<std::string>{"train", "val", "test"}
                         : std::vector<std::string>{split};
      for (const auto& s : splits) {
        if (s != "train" && (s == "val" ? config.paths.val : config.paths.test).empty()) continue;
        const PrepareResult r = pipeline_prepare(env, s);
        print_prepare(s, r);
        failed = failed || !r.errors.empty();
      }
      return failed ? 3 : 0;
    }
    if (score->parsed()) {
      const PoolEvalResult r = pipeline_score(env, split);
      std::cout << "scored " << r.agent_ids.size() << " agents x " << r.instance_ids.size()
                << " instances (" << r.missing.size() << " missing)\n";
      std::cout << "logical backend calls so far: " << env.backend->logical_calls() << "\n";
      return 0;
    }
    if (app.got_subcommand("train")) {
      const TrainOutput out = pipeline_train(env);
      std::cout << "checkpoint: " << out.checkpoint_path << "\n";
      std::cout << "best epoch: " << out.best_epoch << "  val vote F1: " << 100.0 * out.val_f1
                << "\n";
      return 0;
    }
    if (diagnose->parsed()) {
      const RefinementState state = load_refine_state(env);
      std::cout << summarize(state.diagnostics, config.refine.alpha);
      return 0;
    }
    if (refine->parsed()) {
      const int total = rounds > 0 ? rounds : config.refine.rounds;
      const RefinementState state = pipeline_refine(env, total);
      std::cout << "completed rounds: " << state.round << (state.terminable ? " (terminated)" : "")
                << "\n";
      std::cout << "router checkpoint: " << state.checkpoint_path
                << "  val vote F1: " << 100.0 * state.checkpoint_val_f1 << "\n";
      return 0;
    }
    if (app.got_subcommand("tune-adaptive")) {
      const TuneCandidate t = pipeline_tune(env);
      std::cout << "tau=" << t.config.tau_agree << " k_min=" << t.config.k_min
                << " k_max=" << t.config.k_max << "  val F1: " << 100.0 * t.mean_f1
                << "  mean calls: " << t.mean_calls << "\n";
      return 0;
    }
    if (infer->parsed()) {
      std::optional<AdaptiveConfig> override_cfg;
      if (tau > 0.0 || kmin > 0 || kmax > 0) {
        AdaptiveConfig c = config.adaptive;
        if (tau > 0.0) c.tau_agree = tau;
        if (kmin > 0) c.k_min = kmin;
        if (kmax > 0) c.k_max = kmax;
        override_cfg = c;
      }
      print_infer(pipeline_infer(env, split, override_cfg));
      return 0;
    }
    if (app.got_subcommand("run")) {
      print_infer(pipeline_run(env));
      return 0;
    }
    if (serve->parsed()) {
      RouteService service(env);
      const int bound = service.start(host, port);
      std::cout << "serving on " << host << ":" << bound << "\n";
      service.wait();
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
