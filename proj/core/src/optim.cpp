#include "modeseg/optim.hpp"

#include <cmath>

namespace modeseg {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + s + "' (expected adam or sgd)");
}

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("optimizer.learning_rate must be positive");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("optimizer betas must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw ConfigError("optimizer.epsilon must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optimizer.momentum must lie in [0, 1)");
}

template <typename T>
void step_sgd(std::span<T> param, std::span<const T> grad, const OptimizerConfig& cfg,
              std::vector<double>* velocity) {
  if (param.size() != grad.size()) throw DimensionError("step_sgd: parameter/gradient size mismatch");
  if (cfg.momentum > 0.0 && velocity) {
    velocity->resize(param.size(), 0.0);
    for (std::size_t i = 0; i < param.size(); ++i) {
      (*velocity)[i] = cfg.momentum * (*velocity)[i] + grad[i];
      param[i] = static_cast<T>(param[i] - cfg.learning_rate * (*velocity)[i]);
    }
    return;
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    param[i] = static_cast<T>(param[i] - cfg.learning_rate * grad[i]);
  }
}

template <typename T>
void step_adam(std::span<T> param, std::span<const T> grad, AdamMoments& state,
               const OptimizerConfig& cfg, std::size_t t) {
  if (param.size() != grad.size()) throw DimensionError("step_adam: parameter/gradient size mismatch");
  if (t == 0) throw ContractError("step_adam: step count is 1-based");
  state.m.resize(param.size(), 0.0);
  state.v.resize(param.size(), 0.0);
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    param[i] = static_cast<T>(param[i] - cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon));
  }
}

template <typename T>
Optimizer<T>::Optimizer(std::vector<NamedParam<T>> params, const OptimizerConfig& cfg)
    : params_(std::move(params)), cfg_(cfg), moments_(params_.size()), velocity_(params_.size()) {
  cfg_.validate();
}

template <typename T>
void Optimizer<T>::step() {
  for (const auto& p : params_) {
    if (p.var.has_grad() && !p.var.grad().all_finite()) {
      throw NumericError("non-finite gradient in parameter " + p.name);
    }
  }
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var<T> v = params_[i].var;
    if (!v.has_grad()) continue;
    std::span<T> value = v.mutable_value().data();
    std::span<const T> grad = v.grad().data();
    if (cfg_.kind == OptimizerKind::adam) {
      step_adam(value, grad, moments_[i], cfg_, t_);
    } else {
      step_sgd(value, grad, cfg_, &velocity_[i]);
    }
  }
}

#define MODESEG_INSTANTIATE(T)                                                               \
  template void step_sgd<T>(std::span<T>, std::span<const T>, const OptimizerConfig&,        \
                            std::vector<double>*);                                           \
  template void step_adam<T>(std::span<T>, std::span<const T>, AdamMoments&,                 \
                             const OptimizerConfig&, std::size_t);                           \
  template class Optimizer<T>;

MODESEG_INSTANTIATE(float)
MODESEG_INSTANTIATE(double)

#undef MODESEG_INSTANTIATE

}  // namespace modeseg
