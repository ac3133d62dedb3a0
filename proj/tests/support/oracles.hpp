#pragma once

// Independent reference implementations used as test oracles. Everything
// here is deliberately naive: plain loops in double precision, no sharing of
// code with the library beyond its value types.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

#include <modeseg/autodiff.hpp>
#include <modeseg/objectives.hpp>

namespace oracle {

using modeseg::Shape;
using modeseg::Tensor;
using modeseg::Var;

template <typename T>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                        double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(shape);
  for (auto& v : t.storage()) v = static_cast<T>(u(rng));
  return t;
}

/// Direct 7-loop cross-correlation with zero padding.
inline Tensor<double> conv2d(const Tensor<double>& x, const Tensor<double>& w,
                             const Tensor<double>* b, int stride, int pad) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const std::size_t OH = (H + 2 * pad - KH) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
  Tensor<double> y(Shape{N, O, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < OH; ++i)
        for (std::size_t j = 0; j < OW; ++j) {
          double acc = b ? (*b)[o] : 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < KH; ++u)
              for (std::size_t v = 0; v < KW; ++v) {
                const long r = static_cast<long>(i * stride + u) - pad;
                const long s = static_cast<long>(j * stride + v) - pad;
                if (r < 0 || s < 0 || r >= static_cast<long>(H) || s >= static_cast<long>(W)) continue;
                acc += x.at(n, c, r, s) * w.at(o, c, u, v);
              }
          y.at(n, o, i, j) = acc;
        }
  return y;
}

/// Scatter form of the transposed convolution; w is [Cin, Cout, k, k].
inline Tensor<double> conv_transpose2d(const Tensor<double>& x, const Tensor<double>& w,
                                       const Tensor<double>* b, int stride) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(1), K = w.dim(2);
  const std::size_t OH = (H - 1) * stride + K, OW = (W - 1) * stride + K;
  Tensor<double> y(Shape{N, O, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t r = 0; r < OH; ++r)
        for (std::size_t s = 0; s < OW; ++s) y.at(n, o, r, s) = b ? (*b)[o] : 0.0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          for (std::size_t o = 0; o < O; ++o)
            for (std::size_t u = 0; u < K; ++u)
              for (std::size_t v = 0; v < K; ++v)
                y.at(n, o, i * stride + u, j * stride + v) += x.at(n, c, i, j) * w.at(c, o, u, v);
  return y;
}

/// Gaussian-mixture posterior for one scalar, straight from Bayes' rule.
inline std::vector<double> posterior(double x, const std::vector<double>& pi,
                                     const std::vector<double>& mu,
                                     const std::vector<double>& var) {
  std::vector<double> p(pi.size());
  double z = 0.0;
  for (std::size_t k = 0; k < pi.size(); ++k) {
    p[k] = pi[k] / std::sqrt(2.0 * std::numbers::pi * var[k]) *
           std::exp(-(x - mu[k]) * (x - mu[k]) / (2.0 * var[k]));
    z += p[k];
  }
  for (double& v : p) v /= z;
  return p;
}

/// Per-pixel confusion count with explicit branches for every cell.
template <typename T>
modeseg::ConfusionMatrix confusion(const std::vector<T>& pred, const std::vector<T>& target,
                                   double threshold = 0.5) {
  modeseg::ConfusionMatrix cm;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i] >= threshold ? 1 : 0;
    const int t = target[i] >= 0.5 ? 1 : 0;
    if (p == 1 && t == 1) cm.tp += 1;
    if (p == 1 && t == 0) cm.fp += 1;
    if (p == 0 && t == 0) cm.tn += 1;
    if (p == 0 && t == 1) cm.fn += 1;
  }
  return cm;
}

struct GradCheck {
  double max_abs = 0.0;
  double max_rel = 0.0;  // |a - n| / max(|a|, |n|, floor)
  std::size_t checked = 0;
};

/// Central finite differences of the scalar `f(inputs)` against reverse
/// mode. `reset` runs before every evaluation so that stateful layers see
/// identical state. `floor` keeps the relative error meaningful near zero.
template <typename T>
GradCheck gradcheck(std::vector<Var<T>>& inputs, const std::function<Var<T>()>& f,
                    const std::function<void()>& reset, double h, double floor = 1e-2,
                    std::size_t max_per_input = 40, std::uint64_t seed = 1) {
  for (auto& in : inputs) in.zero_grad();
  reset();
  Var<T> loss = f();
  modeseg::backward(loss);
  std::vector<Tensor<T>> analytic;
  for (auto& in : inputs) {
    analytic.push_back(in.has_grad() ? in.grad() : Tensor<T>(in.shape()));
  }
  GradCheck out;
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor<T>& val = inputs[k].mutable_value();
    std::vector<std::size_t> idx(val.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > max_per_input) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_per_input);
    }
    for (std::size_t i : idx) {
      const T orig = val[i];
      val[i] = static_cast<T>(orig + h);
      reset();
      const double fp = f().value()[0];
      val[i] = static_cast<T>(orig - h);
      reset();
      const double fm = f().value()[0];
      val[i] = orig;
      const double num = (fp - fm) / (2.0 * h);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - num);
      out.max_abs = std::max(out.max_abs, abs_err);
      out.max_rel = std::max(out.max_rel, abs_err / std::max({std::abs(a), std::abs(num), floor}));
      ++out.checked;
    }
  }
  reset();
  return out;
}

/// Weighted sum of all elements with fixed random weights, so a scalar loss
/// probes every output coordinate.
template <typename T>
Var<T> probe(const Var<T>& y, const Tensor<T>& weights) {
  return modeseg::sum(modeseg::mul(y, Var<T>(weights)));
}

}  // namespace oracle
