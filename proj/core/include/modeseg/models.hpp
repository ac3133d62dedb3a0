#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "modeseg/nn_ops.hpp"
#include "modeseg/normalization.hpp"

namespace modeseg {

enum class Arch { unet, segnet };

std::string to_string(Arch arch);
Arch parse_arch(const std::string& s);

/// Declarative description of a mini U-Net or mini SegNet.
struct ModelSpec {
  Arch arch = Arch::unet;
  int depth = 3;           // pooling levels
  int base_channels = 16;  // channels at the first level, doubled per level
  NormConfig norm{};
  double dropout_rate = 0.0;
  int in_channels = 1;
  int out_channels = 1;

  void validate() const;
  /// Throws ConfigError unless both extents are positive multiples of 2^depth.
  void check_extent(std::size_t height, std::size_t width) const;
  /// Display name such as "U-NetMN" or "SegNetBN".
  std::string display_name() const;
};

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

/// Non-learnable per-layer state, exposed by reference for checkpointing.
template <typename T>
struct NamedBuffer {
  std::string name;
  std::vector<T>* values;
};

/// Copy of every normalization layer's mutable state (running statistics,
/// mixture estimates and affine values, which mode sorting may permute).
template <typename T>
struct NormSnapshot {
  std::vector<BatchStats<T>> batch;
  std::vector<MixtureState<T>> mixture;
  std::vector<Tensor<T>> gamma, beta;
};

/// Binary segmentation network built from conv -> norm -> ReLU blocks and a
/// final sigmoid. The graph is rebuilt on every forward call.
template <typename T>
class Model {
 public:
  /// Conv kernels get Kaiming-uniform (fan-in) initialization from `seed`,
  /// biases start at zero. `seed` also seeds the dropout stream.
  Model(const ModelSpec& spec, std::uint64_t seed);
  ~Model();
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// Returns per-pixel water probabilities, same spatial shape as `x`.
  /// `training` selects batch statistics in norm layers and enables dropout.
  Var<T> forward(const Var<T>& x, bool training);

  const ModelSpec& spec() const noexcept { return spec_; }
  const std::vector<NamedParam<T>>& parameters() const noexcept { return params_; }
  std::vector<NamedBuffer<T>> buffers();
  std::vector<NormLayer<T>*> norm_layers();
  std::size_t parameter_count() const;
  void zero_grad();

  NormSnapshot<T> snapshot_norm_state();
  void restore_norm_state(const NormSnapshot<T>& snap);

  std::mt19937_64& dropout_rng() noexcept { return rng_; }

 private:
  struct Layers;
  ModelSpec spec_;
  std::mt19937_64 rng_;
  std::unique_ptr<Layers> layers_;
  std::vector<NamedParam<T>> params_;
};

}  // namespace modeseg
