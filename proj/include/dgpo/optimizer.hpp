#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dgpo {

enum class OptimizerKind { adamw, sgd };

std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(std::string_view name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adamw;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.1;  // decoupled
};

// Adam with decoupled weight decay, or plain SGD (weight decay still decoupled).
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::size_t param_count);

  // params -= update(grad); grad is the gradient of the minimized loss.
  void step(std::span<double> params, std::span<const double> grad);
  std::size_t steps_taken() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::size_t t_ = 0;
};

}  // namespace dgpo
