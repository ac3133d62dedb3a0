#include "modeseg/models.hpp"

#include <cmath>

namespace modeseg {

std::string to_string(Arch arch) { return arch == Arch::unet ? "unet" : "segnet"; }

Arch parse_arch(const std::string& s) {
  if (s == "unet") return Arch::unet;
  if (s == "segnet") return Arch::segnet;
  throw ConfigError("unknown architecture '" + s + "' (expected unet or segnet)");
}

void ModelSpec::validate() const {
  if (depth < 1 || depth > 6) throw ConfigError("model.depth must lie in [1, 6]");
  if (base_channels < 1) throw ConfigError("model.base_channels must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ConfigError("model.dropout must lie in [0, 1)");
  }
  if (in_channels < 1 || out_channels < 1) throw ConfigError("model channel counts must be >= 1");
  norm.validate();
}

void ModelSpec::check_extent(std::size_t height, std::size_t width) const {
  const std::size_t m = std::size_t{1} << depth;
  if (height == 0 || width == 0 || height % m != 0 || width % m != 0) {
    throw ConfigError("tile extent " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by 2^depth = " + std::to_string(m));
  }
}

std::string ModelSpec::display_name() const {
  std::string name = arch == Arch::unet ? "U-Net" : "SegNet";
  if (norm.kind == NormKind::mode) name += "MN";
  if (norm.kind == NormKind::batch) name += "BN";
  return name;
}

namespace {

template <typename T>
struct Conv {
  Var<T> weight, bias;
  int stride = 1, padding = 0;
};

template <typename T>
struct ConvBlock {
  std::string name;
  Conv<T> conv;
  NormLayer<T> norm;

  Var<T> forward(const Var<T>& x, bool training) {
    return relu(norm.forward(conv2d(x, conv.weight, conv.bias, conv.stride, conv.padding),
                             training));
  }
};

void check_finite_or_throw(const Tensor<float>& t, const std::string& where) {
  if (!t.all_finite()) throw NumericError("non-finite activation produced by layer " + where);
}
void check_finite_or_throw(const Tensor<double>& t, const std::string& where) {
  if (!t.all_finite()) throw NumericError("non-finite activation produced by layer " + where);
}

}  // namespace

template <typename T>
struct Model<T>::Layers {
  // unet: enc[l] = 2 blocks, bottleneck = 2 blocks, up[l], dec[l] = 2 blocks.
  // segnet: enc[l] = 2 blocks, dec[l] = 2 blocks, no bottleneck or up.
  std::vector<std::vector<ConvBlock<T>>> enc, dec;
  std::vector<ConvBlock<T>> bottleneck;
  std::vector<Conv<T>> up;
  Conv<T> head;
};

template <typename T>
Model<T>::Model(const ModelSpec& spec, std::uint64_t seed)
    : spec_(spec), rng_(seed), layers_(std::make_unique<Layers>()) {
  spec_.validate();
  std::mt19937_64 init_rng(seed ^ 0x9e3779b97f4a7c15ULL);

  auto kaiming = [&](Shape shape, double fan_in, const std::string& name) {
    const double bound = std::sqrt(6.0 / std::max(fan_in, 1.0));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> w(std::move(shape));
    for (T& v : w.data()) v = static_cast<T>(dist(init_rng));
    Var<T> var(std::move(w), true, name);
    params_.push_back({name, var});
    return var;
  };
  auto zeros = [&](std::size_t n, const std::string& name) {
    Var<T> var(Tensor<T>(Shape{n}), true, name);
    params_.push_back({name, var});
    return var;
  };
  auto make_conv = [&](std::size_t cin, std::size_t cout, std::size_t k, const std::string& name) {
    Conv<T> c;
    c.weight = kaiming(Shape{cout, cin, k, k}, static_cast<double>(cin * k * k), name + ".weight");
    c.bias = zeros(cout, name + ".bias");
    c.padding = static_cast<int>(k / 2);
    return c;
  };
  auto make_block = [&](std::size_t cin, std::size_t cout, const std::string& name) {
    ConvBlock<T> b;
    b.name = name;
    b.conv = make_conv(cin, cout, 3, name + ".conv");
    b.norm = NormLayer<T>(cout, spec_.norm);
    if (spec_.norm.kind != NormKind::none) {
      params_.push_back({name + ".norm.gamma", b.norm.affine().gamma});
      params_.push_back({name + ".norm.beta", b.norm.affine().beta});
    }
    return b;
  };

  const auto D = static_cast<std::size_t>(spec_.depth);
  const auto base = static_cast<std::size_t>(spec_.base_channels);
  auto ch = [&](std::size_t level) { return base << level; };
  Layers& L = *layers_;

  std::size_t cin = static_cast<std::size_t>(spec_.in_channels);
  for (std::size_t l = 0; l < D; ++l) {
    const std::string p = "enc" + std::to_string(l);
    std::vector<ConvBlock<T>> level;
    level.push_back(make_block(cin, ch(l), p + ".0"));
    level.push_back(make_block(ch(l), ch(l), p + ".1"));
    L.enc.push_back(std::move(level));
    cin = ch(l);
  }

  if (spec_.arch == Arch::unet) {
    L.bottleneck.push_back(make_block(ch(D - 1), ch(D), "bottleneck.0"));
    L.bottleneck.push_back(make_block(ch(D), ch(D), "bottleneck.1"));
    L.up.resize(D);
    L.dec.resize(D);
    for (std::size_t l = D; l-- > 0;) {
      const std::string p = "dec" + std::to_string(l);
      Conv<T> up;
      // [Cin, Cout, 2, 2]; each output pixel sees Cin inputs at stride 2
      up.weight = kaiming(Shape{ch(l + 1), ch(l), 2, 2}, static_cast<double>(ch(l + 1)),
                          p + ".up.weight");
      up.bias = zeros(ch(l), p + ".up.bias");
      up.stride = 2;
      L.up[l] = std::move(up);
      L.dec[l].push_back(make_block(2 * ch(l), ch(l), p + ".0"));
      L.dec[l].push_back(make_block(ch(l), ch(l), p + ".1"));
    }
  } else {
    L.dec.resize(D);
    for (std::size_t l = D; l-- > 0;) {
      const std::string p = "dec" + std::to_string(l);
      const std::size_t next = l == 0 ? ch(0) : ch(l - 1);
      L.dec[l].push_back(make_block(ch(l), ch(l), p + ".0"));
      L.dec[l].push_back(make_block(ch(l), next, p + ".1"));
    }
  }

  L.head = make_conv(ch(0), static_cast<std::size_t>(spec_.out_channels), 1, "head");
}

template <typename T>
Model<T>::~Model() = default;
template <typename T>
Model<T>::Model(Model&&) noexcept = default;
template <typename T>
Model<T>& Model<T>::operator=(Model&&) noexcept = default;

template <typename T>
Var<T> Model<T>::forward(const Var<T>& x, bool training) {
  require_rank(x.shape(), 4, "model input");
  if (x.shape()[1] != static_cast<std::size_t>(spec_.in_channels)) {
    throw DimensionError("model expects " + std::to_string(spec_.in_channels) +
                         " input channels, got " + std::to_string(x.shape()[1]));
  }
  spec_.check_extent(x.shape()[2], x.shape()[3]);
  Layers& L = *layers_;
  const std::size_t D = L.enc.size();

  auto run_block = [&](ConvBlock<T>& b, const Var<T>& in) {
    Var<T> out = b.forward(in, training);
    check_finite_or_throw(out.value(), b.name);
    return out;
  };

  Var<T> h = x;
  if (spec_.arch == Arch::unet) {
    std::vector<Var<T>> skips;
    for (std::size_t l = 0; l < D; ++l) {
      for (auto& b : L.enc[l]) h = run_block(b, h);
      h = dropout(h, spec_.dropout_rate, training, rng_);
      skips.push_back(h);
      h = maxpool2d(h).first;
    }
    for (auto& b : L.bottleneck) h = run_block(b, h);
    for (std::size_t l = D; l-- > 0;) {
      h = conv_transpose2d(h, L.up[l].weight, L.up[l].bias, 2);
      h = concat_channels(skips[l], h);
      for (auto& b : L.dec[l]) h = run_block(b, h);
    }
  } else {
    std::vector<PoolIndices> indices;
    for (std::size_t l = 0; l < D; ++l) {
      for (auto& b : L.enc[l]) h = run_block(b, h);
      h = dropout(h, spec_.dropout_rate, training, rng_);
      auto pooled = maxpool2d(h);
      h = std::move(pooled.first);
      indices.push_back(std::move(pooled.second));
    }
    for (std::size_t l = D; l-- > 0;) {
      h = max_unpool2d(h, indices[l]);
      for (auto& b : L.dec[l]) h = run_block(b, h);
    }
  }
  Var<T> out = sigmoid(conv2d(h, L.head.weight, L.head.bias, 1, 0));
  check_finite_or_throw(out.value(), "head");
  return out;
}

template <typename T>
std::vector<NormLayer<T>*> Model<T>::norm_layers() {
  std::vector<NormLayer<T>*> out;
  Layers& L = *layers_;
  for (auto& level : L.enc)
    for (auto& b : level) out.push_back(&b.norm);
  for (auto& b : L.bottleneck) out.push_back(&b.norm);
  // decoder in construction order (deepest level first)
  for (std::size_t l = L.dec.size(); l-- > 0;)
    for (auto& b : L.dec[l]) out.push_back(&b.norm);
  return out;
}

template <typename T>
std::vector<NamedBuffer<T>> Model<T>::buffers() {
  std::vector<NamedBuffer<T>> out;
  Layers& L = *layers_;
  auto add = [&](ConvBlock<T>& b) {
    const std::string p = b.name + ".norm.";
    NormLayer<T>& n = b.norm;
    if (n.kind() == NormKind::batch) {
      out.push_back({p + "running_mu", &n.batch_stats().running_mu});
      out.push_back({p + "running_var", &n.batch_stats().running_var});
    } else if (n.kind() == NormKind::mode) {
      MixtureState<T>& m = n.mixture();
      out.push_back({p + "pi", &m.pi});
      out.push_back({p + "mu", &m.mu});
      out.push_back({p + "var", &m.var});
      out.push_back({p + "running_pi", &m.running_pi});
      out.push_back({p + "running_mu", &m.running_mu});
      out.push_back({p + "running_var", &m.running_var});
      out.push_back({p + "running_norm_mu", &m.running_norm_mu});
      out.push_back({p + "running_norm_var", &m.running_norm_var});
    }
  };
  for (auto& level : L.enc)
    for (auto& b : level) add(b);
  for (auto& b : L.bottleneck) add(b);
  for (std::size_t l = L.dec.size(); l-- > 0;)
    for (auto& b : L.dec[l]) add(b);
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var.numel();
  return n;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

template <typename T>
NormSnapshot<T> Model<T>::snapshot_norm_state() {
  NormSnapshot<T> snap;
  for (NormLayer<T>* n : norm_layers()) {
    snap.batch.push_back(n->batch_stats());
    snap.mixture.push_back(n->mixture());
    if (n->kind() != NormKind::none) {
      snap.gamma.push_back(n->affine().gamma.value());
      snap.beta.push_back(n->affine().beta.value());
    } else {
      snap.gamma.emplace_back();
      snap.beta.emplace_back();
    }
  }
  return snap;
}

template <typename T>
void Model<T>::restore_norm_state(const NormSnapshot<T>& snap) {
  auto layers = norm_layers();
  if (snap.batch.size() != layers.size()) {
    throw ContractError("restore_norm_state: snapshot does not match this model");
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i]->batch_stats() = snap.batch[i];
    layers[i]->mixture() = snap.mixture[i];
    if (layers[i]->kind() != NormKind::none) {
      layers[i]->affine().gamma.mutable_value() = snap.gamma[i];
      layers[i]->affine().beta.mutable_value() = snap.beta[i];
    }
  }
}

template class Model<float>;
template class Model<double>;

}  // namespace modeseg
