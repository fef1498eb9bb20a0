#pragma once

#include <memory>

#include "routeforge/pipeline.hpp"

namespace routeforge {

// Batch-stateless HTTP service over a loaded checkpoint: POST /route,
// POST /answer, GET /healthz. Read-only with respect to training state.
class RouteService {
 public:
  explicit RouteService(PipelineEnv& env);
  ~RouteService();

  // port 0 binds an ephemeral port; returns the bound port.
  int start(const std::string& host, int port);
  void wait();  // blocks until stop()
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace routeforge
