#pragma once

#include <span>
#include <string>
#include <vector>

#include "modeseg/models.hpp"

namespace modeseg {

enum class OptimizerKind { adam, sgd };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double momentum = 0.0;  // sgd only

  void validate() const;
};

/// First and second moment estimates of one parameter.
struct AdamMoments {
  std::vector<double> m, v;
};

/// p <- p - lr * g
template <typename T>
void step_sgd(std::span<T> param, std::span<const T> grad, const OptimizerConfig& cfg,
              std::vector<double>* velocity = nullptr);

/// One bias-corrected Adam update; `t` is the 1-based step count.
template <typename T>
void step_adam(std::span<T> param, std::span<const T> grad, AdamMoments& state,
               const OptimizerConfig& cfg, std::size_t t);

/// Applies the configured update to every parameter that received a
/// gradient. Throws NumericError naming the parameter on a non-finite
/// gradient, before any parameter is modified.
template <typename T>
class Optimizer {
 public:
  Optimizer(std::vector<NamedParam<T>> params, const OptimizerConfig& cfg);

  void step();
  std::size_t steps() const noexcept { return t_; }
  const OptimizerConfig& config() const noexcept { return cfg_; }

 private:
  std::vector<NamedParam<T>> params_;
  OptimizerConfig cfg_;
  std::vector<AdamMoments> moments_;
  std::vector<std::vector<double>> velocity_;
  std::size_t t_ = 0;
};

}  // namespace modeseg
