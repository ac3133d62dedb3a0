#pragma once

// Batch normalization and mode normalization.
//
// Mode normalization models each channel's activations as a K-component
// Gaussian mixture. Every activation is hard-assigned to the mode with the
// highest posterior and standardized with that mode's statistics, followed by
// a mode-specific affine map. With K = 1 it is exactly batch normalization.

#include <cstdint>
#include <string>
#include <vector>

#include "modeseg/autodiff.hpp"

namespace modeseg {

enum class NormKind { none, batch, mode };

std::string to_string(NormKind kind);
NormKind parse_norm_kind(const std::string& s);

struct NormConfig {
  NormKind kind = NormKind::batch;
  int modes = 2;  // K; only used when kind == mode
  double epsilon = 1e-5;
  double momentum = 0.1;
  int em_iters = 1;
  double min_mode_weight = 1e-3;

  /// Number of affine rows: K for mode normalization, 1 otherwise.
  int affine_rows() const { return kind == NormKind::mode ? modes : 1; }
  void validate() const;
};

/// Learnable per-mode scale and shift, each [K, C]. Row k belongs to mode k.
template <typename T>
struct AffineParams {
  Var<T> gamma;
  Var<T> beta;

  std::size_t modes() const { return gamma.shape()[0]; }
  std::size_t channels() const { return gamma.shape()[1]; }

  static AffineParams identity(std::size_t modes, std::size_t channels);
};

template <typename T>
struct BatchStats {
  std::vector<T> mu, var;
  std::vector<T> running_mu, running_var;
  std::size_t count = 0;

  BatchStats() = default;
  explicit BatchStats(std::size_t channels)
      : mu(channels, T{0}), var(channels, T{1}), running_mu(channels, T{0}),
        running_var(channels, T{1}) {}
};

/// Per-channel Gaussian mixture, all arrays laid out [K, C] (index k*C + c).
///
/// `pi`, `mu`, `var` are the EM estimate on the most recent training batch
/// and drive training-time assignment. The running mixture drives inference
/// assignment. `running_norm_mu`/`running_norm_var` track the statistics of
/// the hard-assigned partitions, which is what training actually normalizes
/// with, so inference normalizes with the same quantities.
///
/// Within every channel modes are sorted by ascending `mu`.
template <typename T>
struct MixtureState {
  std::size_t modes = 0;
  std::size_t channels = 0;
  std::vector<T> pi, mu, var;
  std::vector<T> running_pi, running_mu, running_var;
  std::vector<T> running_norm_mu, running_norm_var;
  bool initialized = false;

  MixtureState() = default;
  MixtureState(std::size_t k, std::size_t c)
      : modes(k), channels(c), pi(k * c, T{1} / static_cast<T>(k)), mu(k * c, T{0}),
        var(k * c, T{1}), running_pi(pi), running_mu(mu), running_var(var),
        running_norm_mu(mu), running_norm_var(var) {}

  std::size_t at(std::size_t k, std::size_t c) const noexcept { return k * channels + c; }
};

/// Per-activation mode labels, same element order as the activations.
using ModeAssignment = std::vector<std::uint8_t>;

/// Standard batch normalization. `affine` must have a single row.
template <typename T>
Var<T> batch_norm_forward(const Var<T>& x, BatchStats<T>& stats, const AffineParams<T>& affine,
                          const NormConfig& cfg, bool training);

/// Quantile initialization: mode k starts at the (k + 1/2)/K quantile of the
/// channel's batch activations (the mean when K = 1), every variance at the
/// batch variance, uniform weights. Running copies are set equal.
template <typename T>
MixtureState<T> init_mixture(const Tensor<T>& first_batch, int modes, const NormConfig& cfg);

/// Runs `cfg.em_iters` EM steps per channel, warm-started from `state`.
/// Re-seeds starved modes, restores ascending-mean order (permuting `affine`
/// rows coherently when given), then blends the running mixture.
/// Returns the responsibilities of the last E-step, laid out [K, numel(x)].
template <typename T>
Tensor<T> em_update(const Tensor<T>& x, MixtureState<T>& state, const NormConfig& cfg,
                    AffineParams<T>* affine = nullptr);

/// Hard assignment k* = argmax_k P(k | x); ties go to the lower mode index.
/// Uses the running mixture when `use_running` is true.
template <typename T>
ModeAssignment assign_modes(const Tensor<T>& x, const MixtureState<T>& state,
                            bool use_running = false);

/// Posterior P(k | value) for one channel of a mixture (K entries).
template <typename T>
std::vector<double> mode_posteriors(T value, const MixtureState<T>& state, std::size_t channel,
                                    bool use_running = false);

/// Mode normalization. Training: EM update, hard assignment, then each
/// (mode, channel) partition is standardized with its own batch statistics;
/// the assignment is constant under differentiation. Inference: running
/// mixture for assignment and running partition statistics for scaling.
template <typename T>
Var<T> mode_norm_forward(const Var<T>& x, MixtureState<T>& state, AffineParams<T>& affine,
                         const NormConfig& cfg, bool training);

/// Normalization layer placed after a convolution. Holds parameters and
/// running state for one of {none, batch, mode}.
template <typename T>
class NormLayer {
 public:
  NormLayer() = default;
  NormLayer(std::size_t channels, const NormConfig& cfg);

  Var<T> forward(const Var<T>& x, bool training);

  NormKind kind() const noexcept { return cfg_.kind; }
  const NormConfig& config() const noexcept { return cfg_; }
  std::size_t channels() const noexcept { return channels_; }

  AffineParams<T>& affine() noexcept { return affine_; }
  const AffineParams<T>& affine() const noexcept { return affine_; }
  BatchStats<T>& batch_stats() noexcept { return batch_; }
  const BatchStats<T>& batch_stats() const noexcept { return batch_; }
  MixtureState<T>& mixture() noexcept { return mixture_; }
  const MixtureState<T>& mixture() const noexcept { return mixture_; }

  /// Learnable tensors (gamma, beta), or none for kind == none.
  std::vector<Var<T>> parameters() const;

 private:
  std::size_t channels_ = 0;
  NormConfig cfg_{};
  AffineParams<T> affine_{};
  BatchStats<T> batch_{};
  MixtureState<T> mixture_{};
};

}  // namespace modeseg
