#include "modeseg/normalization.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace modeseg {

std::string to_string(NormKind kind) {
  switch (kind) {
    case NormKind::none: return "none";
    case NormKind::batch: return "batch";
    case NormKind::mode: return "mode";
  }
  return "none";
}

NormKind parse_norm_kind(const std::string& s) {
  if (s == "none") return NormKind::none;
  if (s == "batch" || s == "bn") return NormKind::batch;
  if (s == "mode" || s == "mn") return NormKind::mode;
  throw ConfigError("unknown normalization kind '" + s + "' (expected none, batch or mode)");
}

void NormConfig::validate() const {
  if (modes < 1 || modes > 8) throw ConfigError("norm.modes must lie in [1, 8]");
  if (!(epsilon > 0.0)) throw ConfigError("norm.epsilon must be positive");
  if (!(momentum > 0.0 && momentum <= 1.0)) throw ConfigError("norm.momentum must lie in (0, 1]");
  if (em_iters < 1) throw ConfigError("norm.em_iters must be >= 1");
  if (!(min_mode_weight >= 0.0 && min_mode_weight < 1.0)) {
    throw ConfigError("norm.min_mode_weight must lie in [0, 1)");
  }
}

template <typename T>
AffineParams<T> AffineParams<T>::identity(std::size_t modes, std::size_t channels) {
  AffineParams p;
  p.gamma = Var<T>(Tensor<T>(Shape{modes, channels}, T{1}), true, "gamma");
  p.beta = Var<T>(Tensor<T>(Shape{modes, channels}, T{0}), true, "beta");
  return p;
}

namespace {

// Geometry of an NCHW activation viewed channel by channel.
struct ChannelView {
  std::size_t n, c, plane;
  explicit ChannelView(const Shape& s) : n(s[0]), c(s[1]), plane(s[2] * s[3]) {}
  std::size_t count() const { return n * plane; }
  std::size_t base(std::size_t sample, std::size_t channel) const {
    return (sample * c + channel) * plane;
  }
};

template <typename F>
void for_channel(const ChannelView& v, std::size_t channel, F&& f) {
  for (std::size_t s = 0; s < v.n; ++s) {
    const std::size_t b = v.base(s, channel);
    for (std::size_t i = 0; i < v.plane; ++i) f(b + i);
  }
}

void check_input(const Shape& s, std::size_t channels, const char* what) {
  require_rank(s, 4, what);
  if (s[1] != channels) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(channels) +
                         " channels, got " + std::to_string(s[1]));
  }
  if (s[0] * s[2] * s[3] == 0) throw ContractError(std::string(what) + ": empty batch");
}

template <typename T>
void check_affine(const AffineParams<T>& affine, std::size_t modes, std::size_t channels) {
  const Shape want{modes, channels};
  if (affine.gamma.shape() != want || affine.beta.shape() != want) {
    throw DimensionError("affine parameters must be " + shape_str(want) + ", got " +
                         shape_str(affine.gamma.shape()));
  }
}

template <typename T>
void blend(std::vector<T>& running, const std::vector<T>& batch, double momentum) {
  for (std::size_t i = 0; i < running.size(); ++i) {
    running[i] = static_cast<T>((1.0 - momentum) * running[i] + momentum * batch[i]);
  }
}

// Normalizes every activation with the statistics of its (mode, channel)
// partition and applies the mode's affine map. When `through_stats` is set the
// backward pass differentiates through the partition mean and variance, as
// batch normalization does through its batch statistics.
template <typename T>
Var<T> partition_normalize(const Var<T>& x, const AffineParams<T>& affine,
                           ModeAssignment assignment, std::vector<double> mean,
                           std::vector<double> inv_std, std::vector<double> counts,
                           std::size_t modes, bool through_stats, const char* label) {
  const ChannelView v(x.shape());
  const T* src = x.value().ptr();
  const T* gamma = affine.gamma.value().ptr();
  const T* beta = affine.beta.value().ptr();
  Tensor<T> xhat(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t c = 0; c < v.c; ++c) {
    for_channel(v, c, [&](std::size_t i) {
      const std::size_t ki = assignment[i] * v.c + c;
      const T h = static_cast<T>((src[i] - mean[ki]) * inv_std[ki]);
      xhat[i] = h;
      out[i] = gamma[ki] * h + beta[ki];
    });
  }
  return make_result<T>(
      std::move(out), {x, affine.gamma, affine.beta},
      [v, modes, through_stats, xhat = std::move(xhat), assignment = std::move(assignment),
       inv_std = std::move(inv_std), counts = std::move(counts)](Node<T>& self) {
        Node<T>& xn = *self.inputs[0];
        Node<T>& gn = *self.inputs[1];
        Node<T>& bn = *self.inputs[2];
        const T* dy = self.grad.ptr();
        const T* gamma = gn.value.ptr();
        const std::size_t kc = modes * v.c;
        std::vector<double> sum_dy(kc, 0.0), sum_dy_xhat(kc, 0.0);
        for (std::size_t c = 0; c < v.c; ++c) {
          for_channel(v, c, [&](std::size_t i) {
            const std::size_t ki = assignment[i] * v.c + c;
            sum_dy[ki] += dy[i];
            sum_dy_xhat[ki] += static_cast<double>(dy[i]) * xhat[i];
          });
        }
        if (gn.requires_grad) {
          Tensor<T>& dg = gn.grad_buffer();
          for (std::size_t i = 0; i < kc; ++i) dg[i] += static_cast<T>(sum_dy_xhat[i]);
        }
        if (bn.requires_grad) {
          Tensor<T>& db = bn.grad_buffer();
          for (std::size_t i = 0; i < kc; ++i) db[i] += static_cast<T>(sum_dy[i]);
        }
        if (!xn.requires_grad) return;
        Tensor<T>& dx = xn.grad_buffer();
        for (std::size_t c = 0; c < v.c; ++c) {
          for_channel(v, c, [&](std::size_t i) {
            const std::size_t ki = assignment[i] * v.c + c;
            const double g = gamma[ki];
            const double dxhat = g * dy[i];
            if (through_stats) {
              const double m = counts[ki];
              // sums of dxhat and dxhat * xhat over the partition
              const double s1 = g * sum_dy[ki];
              const double s2 = g * sum_dy_xhat[ki];
              dx[i] += static_cast<T>(inv_std[ki] / m * (m * dxhat - s1 - xhat[i] * s2));
            } else {
              dx[i] += static_cast<T>(dxhat * inv_std[ki]);
            }
          });
        }
      },
      label);
}

template <typename T>
void sort_modes(MixtureState<T>& st, AffineParams<T>* affine) {
  const std::size_t K = st.modes, C = st.channels;
  if (K < 2) return;
  std::vector<std::size_t> order(K);
  std::vector<T> tmp(K);
  auto permute = [&](std::vector<T>& arr, std::size_t c) {
    for (std::size_t k = 0; k < K; ++k) tmp[k] = arr[order[k] * C + c];
    for (std::size_t k = 0; k < K; ++k) arr[k * C + c] = tmp[k];
  };
  auto permute_tensor = [&](Tensor<T>& t, std::size_t c) {
    for (std::size_t k = 0; k < K; ++k) tmp[k] = t[order[k] * C + c];
    for (std::size_t k = 0; k < K; ++k) t[k * C + c] = tmp[k];
  };
  for (std::size_t c = 0; c < C; ++c) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return st.mu[a * C + c] < st.mu[b * C + c];
    });
    bool identity = true;
    for (std::size_t k = 0; k < K; ++k) identity = identity && order[k] == k;
    if (identity) continue;
    for (auto* arr : {&st.pi, &st.mu, &st.var, &st.running_pi, &st.running_mu, &st.running_var,
                      &st.running_norm_mu, &st.running_norm_var}) {
      permute(*arr, c);
    }
    if (affine) {
      permute_tensor(affine->gamma.mutable_value(), c);
      permute_tensor(affine->beta.mutable_value(), c);
    }
  }
}

// A mode whose weight falls below the floor is split off the heaviest mode,
// one standard deviation to the side it sits on in the ordering.
template <typename T>
void reseed_starved(MixtureState<T>& st, double min_weight) {
  const std::size_t K = st.modes, C = st.channels;
  if (K < 2) return;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t k = 0; k < K; ++k) {
      if (!(st.pi[st.at(k, c)] < min_weight)) continue;
      std::size_t heavy = 0;
      for (std::size_t j = 1; j < K; ++j) {
        if (st.pi[st.at(j, c)] > st.pi[st.at(heavy, c)]) heavy = j;
      }
      if (heavy == k) continue;
      const T sd = std::sqrt(st.var[st.at(heavy, c)]);
      st.mu[st.at(k, c)] = st.mu[st.at(heavy, c)] + (k > heavy ? sd : -sd);
      st.var[st.at(k, c)] = st.var[st.at(heavy, c)];
      const T half = st.pi[st.at(heavy, c)] / T{2};
      st.pi[st.at(heavy, c)] = half;
      st.pi[st.at(k, c)] = half;
    }
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) total += st.pi[st.at(k, c)];
    for (std::size_t k = 0; k < K; ++k) {
      st.pi[st.at(k, c)] = static_cast<T>(st.pi[st.at(k, c)] / total);
    }
  }
}

// Per-(mode, channel) constants of the log-density: log pi - log(sigma) and 1/(2 var).
template <typename T>
void score_terms(const MixtureState<T>& st, bool running, std::vector<double>& offset,
                 std::vector<double>& inv2var) {
  const auto& pi = running ? st.running_pi : st.pi;
  const auto& var = running ? st.running_var : st.var;
  offset.resize(pi.size());
  inv2var.resize(pi.size());
  for (std::size_t i = 0; i < pi.size(); ++i) {
    const double p = std::max<double>(pi[i], 1e-300);
    offset[i] = std::log(p) - 0.5 * std::log(static_cast<double>(var[i]));
    inv2var[i] = 0.5 / static_cast<double>(var[i]);
  }
}

template <typename T>
void em_fit(const Tensor<T>& x, MixtureState<T>& st, const NormConfig& cfg,
            AffineParams<T>* affine, Tensor<T>* responsibilities) {
  const ChannelView v(x.shape());
  const std::size_t K = st.modes, C = st.channels;
  const T* src = x.ptr();
  const double var_floor = cfg.epsilon;
  const auto count = static_cast<double>(v.count());
  std::vector<double> offset, inv2var, logp(K);
  std::vector<double> s0(K), s1(K), s2(K);
  for (int iter = 0; iter < cfg.em_iters; ++iter) {
    const bool collect = responsibilities && iter == cfg.em_iters - 1;
    score_terms(st, false, offset, inv2var);
    for (std::size_t c = 0; c < C; ++c) {
      std::fill(s0.begin(), s0.end(), 0.0);
      std::fill(s1.begin(), s1.end(), 0.0);
      std::fill(s2.begin(), s2.end(), 0.0);
      if (K == 2) {
        // two modes: r1 = 1 / (1 + exp(l0 - l1)), a single exp per activation
        const double m0 = st.mu[c], m1 = st.mu[C + c];
        const double o0 = offset[c], o1 = offset[C + c];
        const double q0 = inv2var[c], q1 = inv2var[C + c];
        double a0 = 0, a1 = 0, b0 = 0, b1 = 0, w1 = 0;
        const std::size_t n = x.numel();
        for_channel(v, c, [&](std::size_t i) {
          const double d0 = src[i] - m0, d1 = src[i] - m1;
          const T e = std::exp(static_cast<T>((o0 - d0 * d0 * q0) - (o1 - d1 * d1 * q1)));
          const double r1 = 1.0 / (1.0 + static_cast<double>(e));
          const double r0 = 1.0 - r1;
          w1 += r1;
          a0 += r0 * d0;
          a1 += r1 * d1;
          b0 += r0 * d0 * d0;
          b1 += r1 * d1 * d1;
          if (collect) {
            (*responsibilities)[i] = static_cast<T>(r0);
            (*responsibilities)[n + i] = static_cast<T>(r1);
          }
        });
        s0[0] = count - w1;
        s0[1] = w1;
        s1[0] = a0;
        s1[1] = a1;
        s2[0] = b0;
        s2[1] = b1;
      } else {
        for_channel(v, c, [&](std::size_t i) {
          const double xv = src[i];
          double best = -INFINITY;
          for (std::size_t k = 0; k < K; ++k) {
            const double d = xv - st.mu[k * C + c];
            logp[k] = offset[k * C + c] - d * d * inv2var[k * C + c];
            best = std::max(best, logp[k]);
          }
          double z = 0.0;
          for (std::size_t k = 0; k < K; ++k) {
            logp[k] = std::exp(logp[k] - best);
            z += logp[k];
          }
          for (std::size_t k = 0; k < K; ++k) {
            const double r = logp[k] / z;
            // shifted by the previous mean for a stable one-pass variance
            const double d = xv - st.mu[k * C + c];
            s0[k] += r;
            s1[k] += r * d;
            s2[k] += r * d * d;
            if (collect) (*responsibilities)[k * x.numel() + i] = static_cast<T>(r);
          }
        });
      }
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t at = k * C + c;
        if (s0[k] <= 0.0) {
          st.pi[at] = T{0};
          continue;
        }
        const double shift = s1[k] / s0[k];
        st.mu[at] = static_cast<T>(st.mu[at] + shift);
        st.var[at] = static_cast<T>(std::max(s2[k] / s0[k] - shift * shift, var_floor));
        st.pi[at] = static_cast<T>(s0[k] / count);
      }
    }
  }
  reseed_starved(st, cfg.min_mode_weight);
  sort_modes(st, affine);
  blend(st.running_pi, st.pi, cfg.momentum);
  blend(st.running_mu, st.mu, cfg.momentum);
  blend(st.running_var, st.var, cfg.momentum);
}

}  // namespace

template <typename T>
Var<T> batch_norm_forward(const Var<T>& x, BatchStats<T>& stats, const AffineParams<T>& affine,
                          const NormConfig& cfg, bool training) {
  const std::size_t C = affine.channels();
  check_input(x.shape(), C, "batch_norm_forward");
  check_affine(affine, 1, C);
  if (stats.mu.size() != C) stats = BatchStats<T>(C);
  const ChannelView v(x.shape());
  const T* src = x.value().ptr();
  const T* gamma = affine.gamma.value().ptr();
  const T* beta = affine.beta.value().ptr();
  std::vector<double> mean(C), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (training) {
      double acc = 0.0;
      for_channel(v, c, [&](std::size_t i) { acc += src[i]; });
      const double mu = acc / static_cast<double>(v.count());
      double sq = 0.0;
      for_channel(v, c, [&](std::size_t i) {
        const double d = src[i] - mu;
        sq += d * d;
      });
      const double var = sq / static_cast<double>(v.count());
      stats.mu[c] = static_cast<T>(mu);
      stats.var[c] = static_cast<T>(var);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + cfg.epsilon);
    } else {
      mean[c] = stats.running_mu[c];
      inv_std[c] = 1.0 / std::sqrt(static_cast<double>(stats.running_var[c]) + cfg.epsilon);
    }
  }
  if (training) {
    stats.count = v.count();
    blend(stats.running_mu, stats.mu, cfg.momentum);
    blend(stats.running_var, stats.var, cfg.momentum);
  }

  Tensor<T> xhat(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t c = 0; c < C; ++c) {
    for_channel(v, c, [&](std::size_t i) {
      const T h = static_cast<T>((src[i] - mean[c]) * inv_std[c]);
      xhat[i] = h;
      out[i] = gamma[c] * h + beta[c];
    });
  }
  return make_result<T>(
      std::move(out), {x, affine.gamma, affine.beta},
      [v, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        Node<T>& xn = *self.inputs[0];
        Node<T>& gn = *self.inputs[1];
        Node<T>& bn = *self.inputs[2];
        const T* dy = self.grad.ptr();
        const T* gamma = gn.value.ptr();
        std::vector<double> sum_dy(v.c, 0.0), sum_dy_xhat(v.c, 0.0);
        for (std::size_t c = 0; c < v.c; ++c) {
          for_channel(v, c, [&](std::size_t i) {
            sum_dy[c] += dy[i];
            sum_dy_xhat[c] += static_cast<double>(dy[i]) * xhat[i];
          });
        }
        if (gn.requires_grad) {
          Tensor<T>& dg = gn.grad_buffer();
          for (std::size_t c = 0; c < v.c; ++c) dg[c] += static_cast<T>(sum_dy_xhat[c]);
        }
        if (bn.requires_grad) {
          Tensor<T>& db = bn.grad_buffer();
          for (std::size_t c = 0; c < v.c; ++c) db[c] += static_cast<T>(sum_dy[c]);
        }
        if (!xn.requires_grad) return;
        Tensor<T>& dx = xn.grad_buffer();
        const auto m = static_cast<double>(v.count());
        for (std::size_t c = 0; c < v.c; ++c) {
          const double g = gamma[c];
          for_channel(v, c, [&](std::size_t i) {
            if (training) {
              dx[i] += static_cast<T>(inv_std[c] * g / m *
                                      (m * dy[i] - sum_dy[c] - xhat[i] * sum_dy_xhat[c]));
            } else {
              dx[i] += static_cast<T>(g * dy[i] * inv_std[c]);
            }
          });
        }
      },
      "batch_norm");
}

template <typename T>
MixtureState<T> init_mixture(const Tensor<T>& first_batch, int modes, const NormConfig& cfg) {
  require_rank(first_batch.shape(), 4, "init_mixture");
  if (modes < 1) throw ConfigError("init_mixture: need at least one mode");
  const ChannelView v(first_batch.shape());
  if (v.count() == 0) throw ContractError("init_mixture: empty batch");
  const auto K = static_cast<std::size_t>(modes);
  MixtureState<T> st(K, v.c);
  const T* src = first_batch.ptr();
  std::vector<T> values(v.count());
  for (std::size_t c = 0; c < v.c; ++c) {
    std::size_t j = 0;
    double acc = 0.0;
    for_channel(v, c, [&](std::size_t i) {
      values[j++] = src[i];
      acc += src[i];
    });
    const double mu = acc / static_cast<double>(values.size());
    double sq = 0.0;
    for (T val : values) sq += (val - mu) * (val - mu);
    const T var = static_cast<T>(std::max(sq / static_cast<double>(values.size()), cfg.epsilon));
    for (std::size_t k = 0; k < K; ++k) {
      if (K == 1) {
        st.mu[st.at(k, c)] = static_cast<T>(mu);
      } else {
        const double q = (static_cast<double>(k) + 0.5) / static_cast<double>(K);
        const auto rank = std::min(values.size() - 1,
                                   static_cast<std::size_t>(q * static_cast<double>(values.size())));
        std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(rank),
                         values.end());
        st.mu[st.at(k, c)] = values[rank];
      }
      st.var[st.at(k, c)] = var;
      st.pi[st.at(k, c)] = T{1} / static_cast<T>(K);
    }
  }
  st.running_pi = st.pi;
  st.running_mu = st.mu;
  st.running_var = st.var;
  st.running_norm_mu = st.mu;
  st.running_norm_var = st.var;
  st.initialized = true;
  return st;
}

template <typename T>
Tensor<T> em_update(const Tensor<T>& x, MixtureState<T>& state, const NormConfig& cfg,
                    AffineParams<T>* affine) {
  if (!state.initialized) throw ContractError("em_update: mixture state is not initialized");
  check_input(x.shape(), state.channels, "em_update");
  if (affine) check_affine(*affine, state.modes, state.channels);
  Tensor<T> resp(Shape{state.modes, x.numel()});
  em_fit(x, state, cfg, affine, &resp);
  return resp;
}

template <typename T>
ModeAssignment assign_modes(const Tensor<T>& x, const MixtureState<T>& state, bool use_running) {
  check_input(x.shape(), state.channels, "assign_modes");
  const ChannelView v(x.shape());
  const std::size_t K = state.modes, C = state.channels;
  ModeAssignment out(x.numel(), 0);
  if (K == 1) return out;
  const auto& mu = use_running ? state.running_mu : state.mu;
  std::vector<double> offset, inv2var;
  score_terms(state, use_running, offset, inv2var);
  const T* src = x.ptr();
  for (std::size_t c = 0; c < C; ++c) {
    for_channel(v, c, [&](std::size_t i) {
      const double xv = src[i];
      std::size_t best_k = 0;
      double best = -INFINITY;
      for (std::size_t k = 0; k < K; ++k) {
        const double d = xv - mu[k * C + c];
        const double s = offset[k * C + c] - d * d * inv2var[k * C + c];
        if (s > best) {
          best = s;
          best_k = k;
        }
      }
      out[i] = static_cast<std::uint8_t>(best_k);
    });
  }
  return out;
}

template <typename T>
std::vector<double> mode_posteriors(T value, const MixtureState<T>& state, std::size_t channel,
                                    bool use_running) {
  const std::size_t K = state.modes, C = state.channels;
  const auto& pi = use_running ? state.running_pi : state.pi;
  const auto& mu = use_running ? state.running_mu : state.mu;
  const auto& var = use_running ? state.running_var : state.var;
  std::vector<double> p(K);
  double best = -INFINITY;
  for (std::size_t k = 0; k < K; ++k) {
    const double d = value - mu[k * C + channel];
    p[k] = std::log(std::max<double>(pi[k * C + channel], 1e-300)) -
           0.5 * std::log(2.0 * std::numbers::pi * var[k * C + channel]) -
           d * d / (2.0 * var[k * C + channel]);
    best = std::max(best, p[k]);
  }
  double z = 0.0;
  for (double& e : p) z += (e = std::exp(e - best));
  for (double& e : p) e /= z;
  return p;
}

template <typename T>
Var<T> mode_norm_forward(const Var<T>& x, MixtureState<T>& state, AffineParams<T>& affine,
                         const NormConfig& cfg, bool training) {
  const std::size_t K = affine.modes(), C = affine.channels();
  check_input(x.shape(), C, "mode_norm_forward");
  check_affine(affine, K, C);
  if (state.modes != K || state.channels != C) state = MixtureState<T>(K, C);
  const ChannelView v(x.shape());
  const std::size_t kc = K * C;
  std::vector<double> mean(kc), inv_std(kc);

  if (!training) {
    ModeAssignment assignment = assign_modes(x.value(), state, /*use_running=*/true);
    for (std::size_t i = 0; i < kc; ++i) {
      mean[i] = state.running_norm_mu[i];
      inv_std[i] = 1.0 / std::sqrt(static_cast<double>(state.running_norm_var[i]) + cfg.epsilon);
    }
    return partition_normalize(x, affine, std::move(assignment), std::move(mean),
                               std::move(inv_std), {}, K, false, "mode_norm");
  }

  if (!state.initialized) state = init_mixture(x.value(), static_cast<int>(K), cfg);
  em_fit<T>(x.value(), state, cfg, &affine, nullptr);

  // Assignment and partition statistics in one pass. Sums are shifted by
  // the mode's EM mean, which sits close to the partition mean.
  const T* src = x.value().ptr();
  ModeAssignment assignment(x.numel(), 0);
  std::vector<double> weight(kc, 0.0), acc(kc, 0.0), sq(kc, 0.0);
  std::vector<double> offset, inv2var;
  score_terms(state, false, offset, inv2var);
  for (std::size_t c = 0; c < C; ++c) {
    for_channel(v, c, [&](std::size_t i) {
      const double xv = src[i];
      std::size_t best_k = 0;
      double best = -INFINITY;
      for (std::size_t k = 0; k < K; ++k) {
        const double d = xv - state.mu[k * C + c];
        const double score = offset[k * C + c] - d * d * inv2var[k * C + c];
        if (score > best) {
          best = score;
          best_k = k;
        }
      }
      assignment[i] = static_cast<std::uint8_t>(best_k);
      const std::size_t ki = best_k * C + c;
      const double d = xv - state.mu[ki];
      weight[ki] += 1.0;
      acc[ki] += d;
      sq[ki] += d * d;
    });
  }
  for (std::size_t i = 0; i < kc; ++i) {
    if (weight[i] <= 0.0) continue;
    const double shift = acc[i] / weight[i];
    mean[i] = state.mu[i] + shift;
    sq[i] = std::max(sq[i] - shift * acc[i], 0.0);
  }
  for (std::size_t i = 0; i < kc; ++i) {
    const double m = cfg.momentum;
    if (weight[i] <= 0.0) {
      // empty partition: running statistics relax toward the EM estimate
      inv_std[i] = 1.0;
      state.running_norm_mu[i] =
          static_cast<T>((1.0 - m) * state.running_norm_mu[i] + m * state.mu[i]);
      state.running_norm_var[i] =
          static_cast<T>((1.0 - m) * state.running_norm_var[i] + m * state.var[i]);
      continue;
    }
    const double var = sq[i] / weight[i];
    inv_std[i] = 1.0 / std::sqrt(var + cfg.epsilon);
    state.running_norm_mu[i] = static_cast<T>((1.0 - m) * state.running_norm_mu[i] + m * mean[i]);
    state.running_norm_var[i] = static_cast<T>((1.0 - m) * state.running_norm_var[i] + m * var);
  }
  return partition_normalize(x, affine, std::move(assignment), std::move(mean), std::move(inv_std),
                             std::move(weight), K, true, "mode_norm");
}

template <typename T>
NormLayer<T>::NormLayer(std::size_t channels, const NormConfig& cfg)
    : channels_(channels), cfg_(cfg) {
  cfg_.validate();
  if (cfg_.kind == NormKind::none) return;
  const auto rows = static_cast<std::size_t>(cfg_.affine_rows());
  affine_ = AffineParams<T>::identity(rows, channels);
  if (cfg_.kind == NormKind::batch) batch_ = BatchStats<T>(channels);
  if (cfg_.kind == NormKind::mode) mixture_ = MixtureState<T>(rows, channels);
}

template <typename T>
Var<T> NormLayer<T>::forward(const Var<T>& x, bool training) {
  switch (cfg_.kind) {
    case NormKind::none: return x;
    case NormKind::batch: return batch_norm_forward(x, batch_, affine_, cfg_, training);
    case NormKind::mode: return mode_norm_forward(x, mixture_, affine_, cfg_, training);
  }
  return x;
}

template <typename T>
std::vector<Var<T>> NormLayer<T>::parameters() const {
  if (cfg_.kind == NormKind::none) return {};
  return {affine_.gamma, affine_.beta};
}

#define MODESEG_INSTANTIATE(T)                                                              \
  template struct AffineParams<T>;                                                          \
  template class NormLayer<T>;                                                              \
  template Var<T> batch_norm_forward<T>(const Var<T>&, BatchStats<T>&, const AffineParams<T>&, \
                                        const NormConfig&, bool);                           \
  template MixtureState<T> init_mixture<T>(const Tensor<T>&, int, const NormConfig&);      \
  template Tensor<T> em_update<T>(const Tensor<T>&, MixtureState<T>&, const NormConfig&,    \
                                  AffineParams<T>*);                                        \
  template ModeAssignment assign_modes<T>(const Tensor<T>&, const MixtureState<T>&, bool);  \
  template std::vector<double> mode_posteriors<T>(T, const MixtureState<T>&, std::size_t,   \
                                                  bool);                                    \
  template Var<T> mode_norm_forward<T>(const Var<T>&, MixtureState<T>&, AffineParams<T>&,   \
                                       const NormConfig&, bool);

MODESEG_INSTANTIATE(float)
MODESEG_INSTANTIATE(double)

#undef MODESEG_INSTANTIATE

}  // namespace modeseg
