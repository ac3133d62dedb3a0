#include <doctest.h>

#include <filesystem>
#include <random>
#include <set>
#include <unistd.h>

#include <modeseg/checkpoint.hpp>
#include <modeseg/models.hpp>
#include <modeseg/objectives.hpp>
#include <modeseg/optim.hpp>

#include "oracles.hpp"

using namespace modeseg;
namespace fs = std::filesystem;

namespace {

ModelSpec spec(Arch arch, NormKind norm, int depth = 2, int base = 4, int modes = 2) {
  ModelSpec s;
  s.arch = arch;
  s.depth = depth;
  s.base_channels = base;
  s.norm.kind = norm;
  s.norm.modes = modes;
  return s;
}

Tensor<double> binary_target(const Shape& s, std::mt19937_64& rng) {
  std::bernoulli_distribution b(0.4);
  Tensor<double> t(s);
  for (auto& v : t.storage()) v = b(rng) ? 1.0 : 0.0;
  return t;
}

}  // namespace

TEST_CASE("parameter counts match a layer-by-layer derivation") {
  // U-Net depth 2, base 4. A 3x3 conv from a to b holds 9ab + b values.
  //   enc0  1->4, 4->4     40 + 148
  //   enc1  4->8, 8->8     296 + 584
  //   mid   8->16, 16->16  1168 + 2320
  //   dec1  up 16->8 (2x2) 520, conv 16->8 1160, 8->8 584
  //   dec0  up 8->4 (2x2)  132, conv 8->4 292, 4->4 148
  //   head  1x1 4->1       5
  // Ten norm layers over 80 channels; batch adds 2 per channel, K=2 modes 4.
  CHECK(Model<float>(spec(Arch::unet, NormKind::none), 1).parameter_count() == 7397);
  CHECK(Model<float>(spec(Arch::unet, NormKind::batch), 1).parameter_count() == 7557);
  CHECK(Model<float>(spec(Arch::unet, NormKind::mode), 1).parameter_count() == 7717);
  // SegNet depth 2, base 4:
  //   enc0 40 + 148, enc1 296 + 584, dec1 8->8 584, 8->4 292, dec0 148 + 148, head 5
  // Eight norm layers over 44 channels.
  CHECK(Model<float>(spec(Arch::segnet, NormKind::none), 1).parameter_count() == 2245);
  CHECK(Model<float>(spec(Arch::segnet, NormKind::batch), 1).parameter_count() == 2333);
  CHECK(Model<float>(spec(Arch::segnet, NormKind::mode), 1).parameter_count() == 2421);
}

TEST_CASE("parameter names are unique") {
  for (Arch a : {Arch::unet, Arch::segnet}) {
    Model<float> m(spec(a, NormKind::mode, 3, 4), 1);
    std::set<std::string> names;
    for (const auto& p : m.parameters()) CHECK(names.insert(p.name).second);
  }
}

TEST_CASE("output has the input's spatial shape and lies in (0, 1)") {
  std::mt19937_64 rng(1);
  for (Arch a : {Arch::unet, Arch::segnet}) {
    for (NormKind k : {NormKind::none, NormKind::batch, NormKind::mode}) {
      Model<float> m(spec(a, k, 3, 16), 3);
      Var<float> x(oracle::random_tensor<float>(Shape{2, 1, 64, 64}, rng, -2, 2));
      for (bool training : {true, false}) {
        Tensor<float> y = m.forward(x, training).value();
        REQUIRE(y.shape() == Shape{2, 1, 64, 64});
        for (float v : y.data()) {
          CHECK(v > 0.0f);
          CHECK(v < 1.0f);
        }
      }
    }
  }
}

TEST_CASE("extents must be multiples of two to the depth") {
  ModelSpec s = spec(Arch::unet, NormKind::batch, 3, 4);
  CHECK_NOTHROW(s.check_extent(64, 64));
  CHECK_THROWS_AS(s.check_extent(60, 64), ConfigError);
  Model<float> m(s, 1);
  CHECK_THROWS_AS(m.forward(Var<float>(Tensor<float>(Shape{1, 1, 36, 36})), false), ConfigError);
  CHECK_THROWS_AS(m.forward(Var<float>(Tensor<float>(Shape{1, 2, 32, 32})), false), DimensionError);
}

TEST_CASE("spec validation and display names") {
  ModelSpec s = spec(Arch::unet, NormKind::mode);
  CHECK(s.display_name() == "U-NetMN");
  CHECK(spec(Arch::segnet, NormKind::batch).display_name() == "SegNetBN");
  s.depth = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = spec(Arch::unet, NormKind::mode);
  s.dropout_rate = 1.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK(parse_arch("segnet") == Arch::segnet);
  CHECK_THROWS_AS(parse_arch("fcn"), ConfigError);
}

TEST_CASE("inference is deterministic") {
  std::mt19937_64 rng(2);
  for (Arch a : {Arch::unet, Arch::segnet}) {
    Model<float> m(spec(a, NormKind::mode), 5);
    Var<float> x(oracle::random_tensor<float>(Shape{2, 1, 16, 16}, rng));
    m.forward(x, true);  // populate the mixture state
    CHECK(m.forward(x, false).value() == m.forward(x, false).value());
  }
}

TEST_CASE("a constant input gives an output periodic in the pooling grid away from borders") {
  for (Arch a : {Arch::unet, Arch::segnet}) {
    Model<double> m(spec(a, NormKind::none), 4);
    std::mt19937_64 rng(3);
    for (const auto& p : m.parameters()) {
      if (p.name.ends_with(".bias")) {
        Var<double> v = p.var;
        v.mutable_value() = oracle::random_tensor<double>(v.shape(), rng, -0.5, 0.5);
      }
    }
    Tensor<double> y = m.forward(Var<double>(Tensor<double>(Shape{1, 1, 96, 96}, 0.3)), false).value();
    for (std::size_t i = 36; i < 56; ++i)
      for (std::size_t j = 36; j < 56; ++j) {
        CHECK(y.at(0, 0, i, j) == doctest::Approx(y.at(0, 0, i + 4, j)).epsilon(1e-12));
        CHECK(y.at(0, 0, i, j) == doctest::Approx(y.at(0, 0, i, j + 4)).epsilon(1e-12));
      }
  }
}

TEST_CASE("non-finite activations name the layer that produced them") {
  Model<float> m(spec(Arch::unet, NormKind::batch), 1);
  for (const auto& p : m.parameters()) {
    if (p.name == "enc1.0.conv.weight") {
      Var<float> v = p.var;
      v.mutable_value()[0] = std::numeric_limits<float>::quiet_NaN();
    }
  }
  try {
    m.forward(Var<float>(Tensor<float>(Shape{1, 1, 8, 8}, 1.0f)), false);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("enc1.0") != std::string::npos);
  }
}

// Hard mode assignment makes the mode-normalized loss piecewise smooth; a
// step of 1e-6 already moves some activations across a mode boundary in a
// deep net, so the difference step is kept well below that scale.
TEST_CASE("end-to-end gradients match finite differences in 64-bit") {
  std::mt19937_64 rng(4);
  for (Arch a : {Arch::segnet, Arch::unet}) {
    for (NormKind k : {NormKind::batch, NormKind::mode}) {
      CAPTURE(to_string(a));
      CAPTURE(to_string(k));
      Model<double> m(spec(a, k), 6);
      Var<double> x(oracle::random_tensor<double>(Shape{2, 1, 8, 8}, rng, -2, 2));
      Tensor<double> t = binary_target(x.shape(), rng);
      m.forward(x, true);
      const NormSnapshot<double> snap = m.snapshot_norm_state();
      std::vector<Var<double>> params;
      for (const auto& p : m.parameters()) params.push_back(p.var);
      auto layers = m.norm_layers();
      auto r = oracle::gradcheck<double>(
          params, [&] { return dice_loss(m.forward(x, true), t, LossConfig{}); },
          [&] {
            for (std::size_t i = 0; i < layers.size(); ++i) layers[i]->mixture() = snap.mixture[i];
          },
          1e-8, 1e-2, 6);
      CHECK(r.checked > 100);
      CHECK(r.max_rel <= 1e-3);
    }
  }
}

TEST_CASE("mode norm with one mode trains exactly like batch norm") {
  std::mt19937_64 rng(5);
  for (Arch a : {Arch::unet, Arch::segnet}) {
    Model<double> bn(spec(a, NormKind::batch), 11);
    Model<double> mn(spec(a, NormKind::mode, 2, 4, 1), 11);
    OptimizerConfig oc;
    oc.learning_rate = 1e-2;
    Optimizer<double> ob(bn.parameters(), oc), om(mn.parameters(), oc);
    for (int step = 0; step < 3; ++step) {
      Var<double> x(oracle::random_tensor<double>(Shape{2, 1, 8, 8}, rng, -2, 2));
      Tensor<double> t = binary_target(x.shape(), rng);
      Var<double> lb = dice_loss(bn.forward(x, true), t, LossConfig{});
      Var<double> lm = dice_loss(mn.forward(x, true), t, LossConfig{});
      CHECK(lb.value()[0] == doctest::Approx(lm.value()[0]).epsilon(1e-10));
      bn.zero_grad();
      mn.zero_grad();
      backward(lb);
      backward(lm);
      ob.step();
      om.step();
    }
    for (std::size_t i = 0; i < bn.parameters().size(); ++i) {
      const auto& p = bn.parameters()[i].var.value();
      const auto& q = mn.parameters()[i].var.value();
      for (std::size_t j = 0; j < p.numel(); ++j) CHECK(p[j] == doctest::Approx(q[j]).epsilon(1e-9));
    }
  }
}

TEST_CASE("one gradient step lowers the Dice loss on a single tile") {
  for (NormKind k : {NormKind::none, NormKind::batch, NormKind::mode}) {
    CAPTURE(to_string(k));
    int decreased = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      std::mt19937_64 rng(seed);
      Model<double> m(spec(Arch::unet, k), seed);
      Var<double> x(oracle::random_tensor<double>(Shape{1, 1, 16, 16}, rng, -2, 2));
      Tensor<double> t = binary_target(x.shape(), rng);
      std::vector<MixtureState<double>> before;
      for (auto* n : m.norm_layers()) before.push_back(n->mixture());
      Var<double> l0 = dice_loss(m.forward(x, true), t, LossConfig{});
      backward(l0);
      OptimizerConfig oc;
      oc.kind = OptimizerKind::sgd;
      // Mode normalization jumps wherever an activation changes mode, so the
      // step has to stay inside one assignment region to probe the gradient.
      oc.learning_rate = k == NormKind::mode ? 1e-8 : 1e-2;
      Optimizer<double>(m.parameters(), oc).step();
      auto layers = m.norm_layers();
      for (std::size_t i = 0; i < layers.size(); ++i) layers[i]->mixture() = before[i];
      const double l1 = dice_loss(m.forward(x, true), t, LossConfig{}).value()[0];
      decreased += l1 < l0.value()[0];
    }
    CHECK(decreased >= 95);
  }
}

TEST_CASE("checkpoints round-trip bit-identically") {
  const fs::path dir = fs::temp_directory_path() / ("modeseg_ckpt_" + std::to_string(::getpid()));
  std::mt19937_64 rng(6);
  for (Arch a : {Arch::unet, Arch::segnet}) {
    for (NormKind k : {NormKind::none, NormKind::batch, NormKind::mode}) {
      Model<float> m(spec(a, k), 7);
      OptimizerConfig oc;
      oc.learning_rate = 1e-2;
      Optimizer<float> opt(m.parameters(), oc);
      for (int s = 0; s < 3; ++s) {
        Var<float> x(oracle::random_tensor<float>(Shape{2, 1, 16, 16}, rng, -2, 2));
        Tensor<float> t = binary_target(x.shape(), rng).cast<float>();
        m.zero_grad();
        backward(dice_loss(m.forward(x, true), t, LossConfig{}));
        opt.step();
      }
      Var<float> probe(oracle::random_tensor<float>(Shape{1, 1, 16, 16}, rng, -2, 2));
      const Tensor<float> before = m.forward(probe, false).value();
      CheckpointMeta meta;
      meta.standardization = StandardizationStats{-12.5, 4.25};
      meta.tile_size = 16;
      save_checkpoint(m, dir / "ckpt", meta);
      CheckpointMeta back_meta;
      Model<float> back = load_checkpoint(dir / "ckpt", &back_meta);
      CHECK(back.forward(probe, false).value() == before);
      CHECK(weight_fingerprint(back) == weight_fingerprint(m));
      CHECK(back.spec().display_name() == m.spec().display_name());
      REQUIRE(back_meta.standardization.has_value());
      CHECK(*back_meta.standardization == *meta.standardization);
      CHECK(back_meta.tile_size == 16);
    }
  }
  fs::resize_file(dir / "ckpt.bin", 8);
  CHECK_THROWS_AS(load_checkpoint(dir / "ckpt"), FormatError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("fingerprints change when any weight changes") {
  Model<float> m(spec(Arch::segnet, NormKind::batch), 1);
  const auto fp = weight_fingerprint(m);
  CHECK(fingerprint_hex(fp).size() == 16);
  Var<float> v = m.parameters().back().var;
  v.mutable_value()[0] += 1e-3f;
  CHECK(weight_fingerprint(m) != fp);
}

TEST_CASE("model specs serialize") {
  ModelSpec s = spec(Arch::segnet, NormKind::mode, 3, 8, 3);
  s.dropout_rate = 0.2;
  s.norm.epsilon = 1e-4;
  ModelSpec back = model_spec_from_json(model_spec_to_json(s));
  CHECK(back.arch == s.arch);
  CHECK(back.depth == 3);
  CHECK(back.base_channels == 8);
  CHECK(back.norm.kind == NormKind::mode);
  CHECK(back.norm.modes == 3);
  CHECK(back.norm.epsilon == 1e-4);
  CHECK(back.dropout_rate == 0.2);
  CHECK_THROWS_AS(model_spec_from_json("{"), FormatError);
}

TEST_CASE("norm snapshots restore running state") {
  std::mt19937_64 rng(8);
  Model<float> m(spec(Arch::unet, NormKind::mode), 1);
  Var<float> x(oracle::random_tensor<float>(Shape{2, 1, 8, 8}, rng));
  m.forward(x, true);
  auto snap = m.snapshot_norm_state();
  const auto y = m.forward(x, false).value();
  m.forward(Var<float>(oracle::random_tensor<float>(Shape{2, 1, 8, 8}, rng, 3, 5)), true);
  m.restore_norm_state(snap);
  CHECK(m.forward(x, false).value() == y);
}
