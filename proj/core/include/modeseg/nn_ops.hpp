#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "modeseg/autodiff.hpp"

namespace modeseg {

/// Arg-max bookkeeping of a 2x2/stride-2 max-pool. `argmax[i]` is the flat
/// index into the pooled tensor's source of the element selected for output i.
struct PoolIndices {
  Shape source_shape;
  Shape pooled_shape;
  std::vector<std::size_t> argmax;
};

/// Cross-correlation with zero padding. weight is [Cout, Cin, kh, kw]; bias is
/// [Cout] or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride = 1,
              int padding = 0);

/// Transposed convolution (adjoint of conv2d w.r.t. its input). weight is
/// [Cin, Cout, kh, kw], the same tensor a matching conv2d would use as
/// [Cout', Cin', kh, kw].
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride);

/// 2x2 max-pool, stride 2. Ties go to the first element in row-major order.
template <typename T>
std::pair<Var<T>, PoolIndices> maxpool2d(const Var<T>& x);

/// Scatters `x` to the positions recorded by `indices`; zeros elsewhere.
template <typename T>
Var<T> max_unpool2d(const Var<T>& x, const PoolIndices& indices);

template <typename T>
Var<T> relu(const Var<T>& x);

template <typename T>
Var<T> sigmoid(const Var<T>& x);

/// Concatenates along the channel axis, `a` first.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

/// Inverted dropout: kept activations are scaled by 1/(1-rate). Identity when
/// `training` is false or `rate` is 0.
template <typename T>
Var<T> dropout(const Var<T>& x, double rate, bool training, std::mt19937_64& rng);

/// Output extent of a convolution along one axis.
constexpr std::size_t conv_out_extent(std::size_t in, std::size_t k, int stride, int padding) {
  return (in + 2 * static_cast<std::size_t>(padding) - k) / static_cast<std::size_t>(stride) + 1;
}

}  // namespace modeseg
