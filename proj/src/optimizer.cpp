#include "dgpo/optimizer.hpp"

#include <cmath>

#include "dgpo/error.hpp"

namespace dgpo {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "sgd"; }

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adamw") return OptimizerKind::adamw;
  if (name == "sgd") return OptimizerKind::sgd;
  throw InputError("unknown optimizer '" + std::string(name) + "'");
}

Optimizer::Optimizer(OptimizerConfig cfg, std::size_t param_count)
    : cfg_(cfg), m_(param_count, 0.0), v_(param_count, 0.0) {}

void Optimizer::step(std::span<double> params, std::span<const double> grad) {
  if (params.size() != m_.size() || grad.size() != m_.size()) throw InputError("optimizer shape mismatch");
  ++t_;
  const double lr = cfg_.learning_rate;
  const double decay = 1.0 - lr * cfg_.weight_decay;
  if (cfg_.kind == OptimizerKind::sgd) {
    for (std::size_t j = 0; j < params.size(); ++j) params[j] = params[j] * decay - lr * grad[j];
    return;
  }
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t j = 0; j < params.size(); ++j) {
    m_[j] = cfg_.beta1 * m_[j] + (1.0 - cfg_.beta1) * grad[j];
    v_[j] = cfg_.beta2 * v_[j] + (1.0 - cfg_.beta2) * grad[j] * grad[j];
    const double mhat = m_[j] / c1;
    const double vhat = v_[j] / c2;
    params[j] = params[j] * decay - lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
  }
}

}  // namespace dgpo
