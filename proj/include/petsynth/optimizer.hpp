#pragma once

#include <vector>

#include "petsynth/tensor.hpp"

namespace petsynth {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Fully deterministic: state update order follows
/// the parameter list. Throws NumericalError naming the parameter if a
/// gradient is non-finite.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config);

  void step();
  void set_lr(double lr) { config_.lr = lr; }
  double lr() const { return config_.lr; }
  std::int64_t iteration() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace petsynth
