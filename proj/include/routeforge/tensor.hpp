#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "routeforge/common.hpp"

namespace routeforge {

// Dense row-major matrix; vectors are n x 1.
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  void zero() { std::fill(data.begin(), data.end(), 0.0); }
};

using TensorMap = std::map<std::string, Tensor>;

// out = W x   (x.size == W.cols, out.size == W.rows)
void matvec(const Tensor& w, const std::vector<double>& x, std::vector<double>& out);

// out += W^T x   (x.size == W.rows, out.size == W.cols)
void matvec_transpose_add(const Tensor& w, const std::vector<double>& x, std::vector<double>& out);

// G += u v^T
void outer_add(Tensor& g, const std::vector<double>& u, const std::vector<double>& v);

// Uniform fan-in init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
Tensor uniform_init(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng);

Tensor constant_tensor(std::size_t rows, std::size_t cols, double value);

bool all_finite(const Tensor& t);

// Adam with bias correction over a named tensor collection.
class AdamOptimizer {
 public:
  AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(TensorMap& params, const TensorMap& grads);
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long long t_ = 0;
  TensorMap m_, v_;
};

}  // namespace routeforge
