#include "modeseg/nn_ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

namespace modeseg {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using MapConstMat = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t channels, height, width;  // the "image" side
  std::size_t kh, kw;
  std::size_t stride, padding;
  std::size_t out_h, out_w;  // the "column" side

  std::size_t col_rows() const { return channels * kh * kw; }
  std::size_t col_cols() const { return out_h * out_w; }
};

// Output columns [lo, hi) whose tap kj lands inside the image row.
std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t kj) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  const auto k = static_cast<std::ptrdiff_t>(kj);
  const auto st = static_cast<std::ptrdiff_t>(g.stride);
  const std::ptrdiff_t lo = k >= pad ? 0 : (pad - k + st - 1) / st;
  const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(g.width) - 1 + pad - k;
  const std::ptrdiff_t hi = last < 0 ? 0 : std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(g.out_w), last / st + 1);
  return {static_cast<std::size_t>(std::min(lo, hi)), static_cast<std::size_t>(hi)};
}

// Unfolds image patches so that a convolution becomes [Cout,K] x [K,P].
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::size_t plane = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* src = img + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* dst = col + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.padding);
          T* row = dst + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(row, row + g.out_w, T{0});
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(ih) * g.width;
          const auto [lo, hi] = valid_columns(g, kj);
          std::fill(row, row + lo, T{0});
          std::fill(row + hi, row + g.out_w, T{0});
          const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(g.padding);
          if (g.stride == 1) {
            std::copy(srow + lo + shift, srow + hi + shift, row + lo);
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow) row[ow] = srow[ow * g.stride + shift];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: folds columns back, summing overlapping contributions.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* img) {
  const std::size_t plane = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* dst = img + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* src = col + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.padding);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* drow = dst + static_cast<std::size_t>(ih) * g.width;
          const T* row = src + oh * g.out_w;
          const auto [lo, hi] = valid_columns(g, kj);
          const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(g.padding);
          if (g.stride == 1) {
            T* d = drow + lo + shift;
            for (std::size_t ow = lo; ow < hi; ++ow) d[ow - lo] += row[ow];
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow) drow[ow * g.stride + shift] += row[ow];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0;
}

void check_bias(const Shape& bias, std::size_t channels, const char* what) {
  if (bias.size() != 1 || bias[0] != channels) {
    throw DimensionError(std::string(what) + ": bias shape " + shape_str(bias) +
                         " does not match " + std::to_string(channels) + " output channels");
  }
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride,
              int padding) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(weight.shape(), 4, "conv2d weight");
  const std::size_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const std::size_t cout = weight.shape()[0], kh = weight.shape()[2], kw = weight.shape()[3];
  if (weight.shape()[1] != cin) {
    throw DimensionError("conv2d: input has " + std::to_string(cin) +
                         " channels but weight expects " + std::to_string(weight.shape()[1]));
  }
  if (stride < 1 || padding < 0 || kh < 1 || kw < 1 ||
      h + 2 * static_cast<std::size_t>(padding) < kh ||
      w + 2 * static_cast<std::size_t>(padding) < kw) {
    throw DimensionError("conv2d: kernel " + shape_str(weight.shape()) +
                         " does not fit input " + shape_str(x.shape()));
  }
  if (bias.defined()) check_bias(bias.shape(), cout, "conv2d");

  const ConvGeometry g{cin,
                       h,
                       w,
                       kh,
                       kw,
                       static_cast<std::size_t>(stride),
                       static_cast<std::size_t>(padding),
                       conv_out_extent(h, kh, stride, padding),
                       conv_out_extent(w, kw, stride, padding)};
  const std::size_t K = g.col_rows(), P = g.col_cols();

  Tensor<T> out(Shape{n, cout, g.out_h, g.out_w});
  std::vector<T> col(is_pointwise(g) ? 0 : K * P);
  MapConstMat<T> wm(weight.value().ptr(), cout, K);
  for (std::size_t s = 0; s < n; ++s) {
    const T* img = x.value().ptr() + s * cin * h * w;
    const T* cp = img;
    if (!is_pointwise(g)) {
      im2col(img, g, col.data());
      cp = col.data();
    }
    MapMat<T> om(out.ptr() + s * cout * P, cout, P);
    om.noalias() = wm * MapConstMat<T>(cp, K, P);
    if (bias.defined()) {
      for (std::size_t co = 0; co < cout; ++co) om.row(co).array() += bias.value()[co];
    }
  }

  return make_result<T>(std::move(out), {x, weight, bias}, [g, n, cout](Node<T>& self) {
    Node<T>& xn = *self.inputs[0];
    Node<T>& wn = *self.inputs[1];
    Node<T>* bn = self.inputs[2].get();
    const std::size_t K = g.col_rows(), P = g.col_cols();
    const std::size_t in_plane = g.channels * g.height * g.width;
    std::vector<T> col(K * P);
    MapConstMat<T> wm(wn.value.ptr(), cout, K);
    Tensor<T>* dx = xn.requires_grad ? &xn.grad_buffer() : nullptr;
    Tensor<T>* dw = wn.requires_grad ? &wn.grad_buffer() : nullptr;
    for (std::size_t s = 0; s < n; ++s) {
      MapConstMat<T> dy(self.grad.ptr() + s * cout * P, cout, P);
      if (dw) {
        const T* cp = xn.value.ptr() + s * in_plane;
        if (!is_pointwise(g)) {
          im2col(cp, g, col.data());
          cp = col.data();
        }
        MapMat<T>(dw->ptr(), cout, K).noalias() += dy * MapConstMat<T>(cp, K, P).transpose();
      }
      if (dx) {
        if (is_pointwise(g)) {
          MapMat<T>(dx->ptr() + s * in_plane, K, P).noalias() += wm.transpose() * dy;
        } else {
          MapMat<T>(col.data(), K, P).noalias() = wm.transpose() * dy;
          col2im(col.data(), g, dx->ptr() + s * in_plane);
        }
      }
    }
    if (bn && bn->requires_grad) {
      Tensor<T>& db = bn->grad_buffer();
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t co = 0; co < cout; ++co) {
          const T* p = self.grad.ptr() + (s * cout + co) * P;
          double acc = 0.0;
          for (std::size_t i = 0; i < P; ++i) acc += p[i];
          db[co] += static_cast<T>(acc);
        }
      }
    }
  }, "conv2d");
}

template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride) {
  require_rank(x.shape(), 4, "conv_transpose2d input");
  require_rank(weight.shape(), 4, "conv_transpose2d weight");
  if (stride < 1) throw DimensionError("conv_transpose2d: stride must be >= 1");
  const std::size_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const std::size_t cout = weight.shape()[1], kh = weight.shape()[2], kw = weight.shape()[3];
  if (weight.shape()[0] != cin) {
    throw DimensionError("conv_transpose2d: input has " + std::to_string(cin) +
                         " channels but weight expects " + std::to_string(weight.shape()[0]));
  }
  if (bias.defined()) check_bias(bias.shape(), cout, "conv_transpose2d");

  const auto s = static_cast<std::size_t>(stride);
  // The output plays the role of a conv2d input whose conv output is `x`.
  const ConvGeometry g{cout, s * (h - 1) + kh, s * (w - 1) + kw, kh, kw, s, 0, h, w};
  const std::size_t K = g.col_rows(), P = g.col_cols();
  const std::size_t out_plane = cout * g.height * g.width;

  Tensor<T> out(Shape{n, cout, g.height, g.width});
  std::vector<T> col(K * P);
  MapConstMat<T> wm(weight.value().ptr(), cin, K);
  for (std::size_t b = 0; b < n; ++b) {
    MapConstMat<T> xm(x.value().ptr() + b * cin * P, cin, P);
    MapMat<T>(col.data(), K, P).noalias() = wm.transpose() * xm;
    col2im(col.data(), g, out.ptr() + b * out_plane);
    if (bias.defined()) {
      T* o = out.ptr() + b * out_plane;
      const std::size_t plane = g.height * g.width;
      for (std::size_t co = 0; co < cout; ++co) {
        const T bv = bias.value()[co];
        for (std::size_t i = 0; i < plane; ++i) o[co * plane + i] += bv;
      }
    }
  }

  return make_result<T>(std::move(out), {x, weight, bias}, [g, n, cin](Node<T>& self) {
    Node<T>& xn = *self.inputs[0];
    Node<T>& wn = *self.inputs[1];
    Node<T>* bn = self.inputs[2].get();
    const std::size_t K = g.col_rows(), P = g.col_cols();
    const std::size_t out_plane = g.channels * g.height * g.width;
    std::vector<T> col(K * P);
    MapConstMat<T> wm(wn.value.ptr(), cin, K);
    Tensor<T>* dx = xn.requires_grad ? &xn.grad_buffer() : nullptr;
    Tensor<T>* dw = wn.requires_grad ? &wn.grad_buffer() : nullptr;
    for (std::size_t b = 0; b < n; ++b) {
      im2col(self.grad.ptr() + b * out_plane, g, col.data());
      MapConstMat<T> cm(col.data(), K, P);
      if (dx) MapMat<T>(dx->ptr() + b * cin * P, cin, P).noalias() += wm * cm;
      if (dw) {
        MapMat<T>(dw->ptr(), cin, K).noalias() +=
            MapConstMat<T>(xn.value.ptr() + b * cin * P, cin, P) * cm.transpose();
      }
    }
    if (bn && bn->requires_grad) {
      Tensor<T>& db = bn->grad_buffer();
      const std::size_t plane = g.height * g.width;
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t co = 0; co < g.channels; ++co) {
          const T* p = self.grad.ptr() + b * out_plane + co * plane;
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += p[i];
          db[co] += static_cast<T>(acc);
        }
      }
    }
  }, "conv_transpose2d");
}

template <typename T>
std::pair<Var<T>, PoolIndices> maxpool2d(const Var<T>& x) {
  require_rank(x.shape(), 4, "maxpool2d input");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0) {
    throw DimensionError("maxpool2d: spatial extent " + std::to_string(h) + "x" +
                         std::to_string(w) + " is not even");
  }
  const std::size_t oh = h / 2, ow = w / 2;
  PoolIndices idx;
  idx.source_shape = x.shape();
  idx.pooled_shape = Shape{n, c, oh, ow};
  idx.argmax.resize(n * c * oh * ow);
  Tensor<T> out(idx.pooled_shape);
  const T* src = x.value().ptr();
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j, ++o) {
        std::size_t best = base + (2 * i) * w + 2 * j;
        for (std::size_t di = 0; di < 2; ++di) {
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t at = base + (2 * i + di) * w + 2 * j + dj;
            if (src[at] > src[best]) best = at;
          }
        }
        idx.argmax[o] = best;
        out[o] = src[best];
      }
    }
  }
  auto result = make_result<T>(std::move(out), {x}, [argmax = idx.argmax](Node<T>& self) {
    Tensor<T>& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += self.grad[i];
  }, "maxpool2d");
  return {std::move(result), std::move(idx)};
}

template <typename T>
Var<T> max_unpool2d(const Var<T>& x, const PoolIndices& indices) {
  if (x.shape() != indices.pooled_shape || indices.argmax.size() != x.numel()) {
    throw DimensionError("max_unpool2d: input " + shape_str(x.shape()) +
                         " does not match pooled shape " + shape_str(indices.pooled_shape));
  }
  Tensor<T> out(indices.source_shape);
  for (std::size_t i = 0; i < indices.argmax.size(); ++i) {
    if (indices.argmax[i] >= out.numel()) {
      throw DimensionError("max_unpool2d: index out of range of source shape");
    }
    out[indices.argmax[i]] = x.value()[i];
  }
  return make_result<T>(std::move(out), {x}, [argmax = indices.argmax](Node<T>& self) {
    Tensor<T>& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < argmax.size(); ++i) dx[i] += self.grad[argmax[i]];
  }, "max_unpool2d");
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T v = x.value()[i];
    out[i] = v > T{0} || std::isnan(v) ? v : T{0};  // NaN passes through to the finiteness check
  }
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    Tensor<T>& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < dx.numel(); ++i) {
      if (self.value[i] > T{0}) dx[i] += self.grad[i];
    }
  }, "relu");
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T v = x.value()[i];
    // Split by sign so exp never overflows.
    if (v >= T{0}) {
      out[i] = T{1} / (T{1} + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T{1} + e);
    }
  }
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    Tensor<T>& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < dx.numel(); ++i) {
      const T y = self.value[i];
      dx[i] += self.grad[i] * y * (T{1} - y);
    }
  }, "sigmoid");
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  require_rank(a.shape(), 4, "concat_channels lhs");
  require_rank(b.shape(), 4, "concat_channels rhs");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3]) {
    throw DimensionError("concat_channels: incompatible shapes " + shape_str(sa) + " and " +
                         shape_str(sb));
  }
  const std::size_t n = sa[0], ca = sa[1], cb = sb[1], plane = sa[2] * sa[3];
  Tensor<T> out(Shape{n, ca + cb, sa[2], sa[3]});
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(a.value().ptr() + s * ca * plane, ca * plane, out.ptr() + s * (ca + cb) * plane);
    std::copy_n(b.value().ptr() + s * cb * plane, cb * plane,
                out.ptr() + s * (ca + cb) * plane + ca * plane);
  }
  return make_result<T>(std::move(out), {a, b}, [n, ca, cb, plane](Node<T>& self) {
    Node<T>& an = *self.inputs[0];
    Node<T>& bn = *self.inputs[1];
    for (std::size_t s = 0; s < n; ++s) {
      const T* g = self.grad.ptr() + s * (ca + cb) * plane;
      if (an.requires_grad) {
        T* d = an.grad_buffer().ptr() + s * ca * plane;
        for (std::size_t i = 0; i < ca * plane; ++i) d[i] += g[i];
      }
      if (bn.requires_grad) {
        T* d = bn.grad_buffer().ptr() + s * cb * plane;
        for (std::size_t i = 0; i < cb * plane; ++i) d[i] += g[ca * plane + i];
      }
    }
  }, "concat_channels");
}

template <typename T>
Var<T> dropout(const Var<T>& x, double rate, bool training, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ContractError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::bernoulli_distribution keep(1.0 - rate);
  std::vector<T> mask(x.numel());
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = keep(rng) ? keep_scale : T{0};
    out[i] = x.value()[i] * mask[i];
  }
  return make_result<T>(std::move(out), {x}, [mask = std::move(mask)](Node<T>& self) {
    Tensor<T>& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < mask.size(); ++i) dx[i] += self.grad[i] * mask[i];
  }, "dropout");
}

#define MODESEG_INSTANTIATE(T)                                                             \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, int);        \
  template Var<T> conv_transpose2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int);   \
  template std::pair<Var<T>, PoolIndices> maxpool2d<T>(const Var<T>&);                     \
  template Var<T> max_unpool2d<T>(const Var<T>&, const PoolIndices&);                      \
  template Var<T> relu<T>(const Var<T>&);                                                  \
  template Var<T> sigmoid<T>(const Var<T>&);                                               \
  template Var<T> concat_channels<T>(const Var<T>&, const Var<T>&);                        \
  template Var<T> dropout<T>(const Var<T>&, double, bool, std::mt19937_64&);

MODESEG_INSTANTIATE(float)
MODESEG_INSTANTIATE(double)

#undef MODESEG_INSTANTIATE

}  // namespace modeseg
