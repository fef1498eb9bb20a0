#include "routeforge/tensor.hpp"

#include <cmath>

namespace routeforge {

void matvec(const Tensor& w, const std::vector<double>& x, std::vector<double>& out) {
  out.assign(w.rows, 0.0);
  const double* wp = w.data.data();
  for (std::size_t r = 0; r < w.rows; ++r) {
    double acc = 0.0;
    const double* row = wp + r * w.cols;
    for (std::size_t c = 0; c < w.cols; ++c) acc += row[c] * x[c];
    out[r] = acc;
  }
}

void matvec_transpose_add(const Tensor& w, const std::vector<double>& x, std::vector<double>& out) {
  const double* wp = w.data.data();
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    const double* row = wp + r * w.cols;
    for (std::size_t c = 0; c < w.cols; ++c) out[c] += row[c] * xr;
  }
}

void outer_add(Tensor& g, const std::vector<double>& u, const std::vector<double>& v) {
  double* gp = g.data.data();
  for (std::size_t r = 0; r < g.rows; ++r) {
    const double ur = u[r];
    if (ur == 0.0) continue;
    double* row = gp + r * g.cols;
    for (std::size_t c = 0; c < g.cols; ++c) row[c] += ur * v[c];
  }
}

Tensor uniform_init(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
  Tensor t(rows, cols);
  const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in ? fan_in : 1));
  for (auto& v : t.data) v = rng.next_symmetric(scale);
  return t;
}

Tensor constant_tensor(std::size_t rows, std::size_t cols, double value) {
  Tensor t(rows, cols);
  std::fill(t.data.begin(), t.data.end(), value);
  return t;
}

bool all_finite(const Tensor& t) {
  for (double v : t.data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void AdamOptimizer::step(TensorMap& params, const TensorMap& grads) {
  if (m_.empty()) {
    for (const auto& [name, p] : params) {
      m_.emplace(name, Tensor(p.rows, p.cols));
      v_.emplace(name, Tensor(p.rows, p.cols));
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) fail_numeric("adam: missing gradient for tensor " + name);
    const Tensor& g = git->second;
    Tensor& m = m_.at(name);
    Tensor& v = v_.at(name);
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const double gi = g.data[i];
      m.data[i] = beta1_ * m.data[i] + (1.0 - beta1_) * gi;
      v.data[i] = beta2_ * v.data[i] + (1.0 - beta2_) * gi * gi;
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      p.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

}  // namespace routeforge
