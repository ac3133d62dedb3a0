#include <benchmark/benchmark.h>

#include <random>

#include <modeseg/models.hpp>
#include <modeseg/normalization.hpp>
#include <modeseg/objectives.hpp>

using namespace modeseg;

namespace {

Tensor<float> random_tensor(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  Tensor<float> t(s);
  for (auto& v : t.storage()) v = d(rng);
  return t;
}

// Bimodal activations, roughly what a first-layer feature map of a SAR tile looks like.
Tensor<float> bimodal(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 0.5f);
  std::bernoulli_distribution water(0.35);
  Tensor<float> t(s);
  for (auto& v : t.storage()) v = (water(rng) ? -2.0f : 1.5f) + d(rng);
  return t;
}

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Var<float> x(random_tensor({8, c, 64, 64}, 1), true);
  Var<float> w(random_tensor({c, c, 3, 3}, 2), true);
  Var<float> b(Tensor<float>(Shape{c}, 0.0f), true);
  for (auto _ : state) {
    x.zero_grad();
    w.zero_grad();
    b.zero_grad();
    Var<float> y = conv2d(x, w, b, 1, 1);
    backward(sum(y));
    benchmark::DoNotOptimize(w.grad().ptr());
  }
  state.SetItemsProcessed(state.iterations() * 8 * 64 * 64 * static_cast<std::int64_t>(c * c * 9));
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_BatchNormTrain(benchmark::State& state) {
  NormConfig cfg;
  cfg.kind = NormKind::batch;
  Var<float> x(bimodal({8, 16, 64, 64}, 3), true);
  BatchStats<float> st(16);
  auto a = AffineParams<float>::identity(1, 16);
  for (auto _ : state) {
    Var<float> y = batch_norm_forward(x, st, a, cfg, true);
    backward(sum(y));
    benchmark::DoNotOptimize(x.grad().ptr());
  }
}
BENCHMARK(BM_BatchNormTrain)->Unit(benchmark::kMillisecond);

void BM_ModeNormTrain(benchmark::State& state) {
  NormConfig cfg;
  cfg.kind = NormKind::mode;
  cfg.modes = static_cast<int>(state.range(0));
  Var<float> x(bimodal({8, 16, 64, 64}, 3), true);
  MixtureState<float> st;
  auto a = AffineParams<float>::identity(static_cast<std::size_t>(cfg.modes), 16);
  for (auto _ : state) {
    Var<float> y = mode_norm_forward(x, st, a, cfg, true);
    backward(sum(y));
    benchmark::DoNotOptimize(x.grad().ptr());
  }
}
BENCHMARK(BM_ModeNormTrain)->Arg(1)->Arg(2)->Arg(3)->Unit(benchmark::kMillisecond);

void BM_EmUpdate(benchmark::State& state) {
  NormConfig cfg;
  cfg.kind = NormKind::mode;
  cfg.modes = static_cast<int>(state.range(0));
  const Tensor<float> x = bimodal({8, 16, 64, 64}, 4);
  MixtureState<float> st = init_mixture(x, cfg.modes, cfg);
  for (auto _ : state) {
    Tensor<float> r = em_update(x, st, cfg);
    benchmark::DoNotOptimize(r.ptr());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(x.numel()));
}
BENCHMARK(BM_EmUpdate)->Arg(2)->Arg(3)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  ModelSpec spec;
  spec.norm.kind = static_cast<NormKind>(state.range(0));
  Model<float> model(spec, 7);
  const Tensor<float> x = bimodal({8, 1, 64, 64}, 5);
  Tensor<float> t(x.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = x[i] < 0.0f ? 1.0f : 0.0f;
  for (auto _ : state) {
    model.zero_grad();
    Var<float> loss = dice_loss(model.forward(Var<float>(x), true), t, LossConfig{});
    backward(loss);
    benchmark::DoNotOptimize(loss.value().ptr());
  }
  state.SetLabel(spec.display_name());
}
BENCHMARK(BM_TrainStep)
    ->Arg(static_cast<int>(NormKind::batch))
    ->Arg(static_cast<int>(NormKind::mode))
    ->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
