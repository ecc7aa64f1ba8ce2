#include "petsynth/optimizer.hpp"

#include <cmath>

#include "petsynth/errors.hpp"

namespace petsynth {

Adam::Adam(std::vector<Tensor> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p->numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p->numel()), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    auto& p = *params_[pi];
    p.ensure_grad();
    auto& m = m_[pi];
    auto& v = v_[pi];
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = p.grad[i];
      if (!std::isfinite(g))
        throw NumericalError("non-finite gradient for parameter '" +
                             (p.name.empty() ? std::string("<unnamed>") : p.name) + "'");
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.value[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

}  // namespace petsynth
