#include <doctest.h>

#include <cmath>
#include <limits>

#include <modeseg/optim.hpp>

using namespace modeseg;

TEST_CASE("a zero gradient leaves the parameter unchanged") {
  OptimizerConfig cfg;
  for (OptimizerKind k : {OptimizerKind::adam, OptimizerKind::sgd}) {
    cfg.kind = k;
    std::vector<double> p{1.25};
    std::vector<double> g{0.0};
    AdamMoments st;
    if (k == OptimizerKind::adam) step_adam<double>(p, g, st, cfg, 1);
    else step_sgd<double>(p, g, cfg);
    CHECK(p[0] == 1.25);
  }
}

TEST_CASE("sgd takes the plain gradient step") {
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::sgd;
  cfg.learning_rate = 0.1;
  std::vector<double> p{1.0, -2.0};
  std::vector<double> g{0.5, -4.0};
  step_sgd<double>(p, g, cfg);
  CHECK(p[0] == 1.0 - 0.1 * 0.5);
  CHECK(p[1] == -2.0 - 0.1 * -4.0);
}

TEST_CASE("sgd momentum accumulates a velocity") {
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::sgd;
  cfg.learning_rate = 0.1;
  cfg.momentum = 0.5;
  std::vector<double> p{0.0}, g{1.0}, vel;
  step_sgd<double>(p, g, cfg, &vel);
  step_sgd<double>(p, g, cfg, &vel);
  CHECK(p[0] == doctest::Approx(-0.1 - 0.15));
}

TEST_CASE("adam on a quadratic follows the scalar recurrence") {
  OptimizerConfig cfg;
  cfg.learning_rate = 0.1;
  std::vector<double> p{1.0};
  AdamMoments st;
  double q = 1.0, m = 0.0, v = 0.0;
  std::vector<double> trace;
  for (std::size_t t = 1; t <= 100; ++t) {
    std::vector<double> g{p[0]};  // d/dp p^2/2
    step_adam<double>(p, g, st, cfg, t);
    m = 0.9 * m + 0.1 * q;
    v = 0.999 * v + 0.001 * q * q;
    q -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    CHECK(p[0] == doctest::Approx(q).epsilon(1e-12));
    trace.push_back(p[0]);
  }
  // Early steps move monotonically toward the minimum; momentum then carries
  // the iterate past zero and it settles into a decaying oscillation.
  for (std::size_t t = 1; t < 11; ++t) CHECK(trace[t] < trace[t - 1]);
  CHECK(std::abs(trace.back()) < 0.01);
}

TEST_CASE("adam step count is 1-based and sizes must agree") {
  OptimizerConfig cfg;
  std::vector<double> p{1.0}, g{1.0}, g2{1.0, 2.0};
  AdamMoments st;
  CHECK_THROWS_AS(step_adam<double>(p, g, st, cfg, 0), ContractError);
  CHECK_THROWS_AS(step_adam<double>(p, g2, st, cfg, 1), DimensionError);
  CHECK_THROWS_AS(step_sgd<double>(p, g2, cfg), DimensionError);
}

TEST_CASE("optimizer rejects non-finite gradients before touching any parameter") {
  Var<float> a(Tensor<float>(Shape{2}, 1.0f), true, "a");
  Var<float> b(Tensor<float>(Shape{2}, 1.0f), true, "b");
  backward(sum(add(a, b)));
  b.node()->grad[1] = std::numeric_limits<float>::quiet_NaN();
  Optimizer<float> opt({{"enc0.0.conv.weight", a}, {"dec0.1.conv.bias", b}}, OptimizerConfig{});
  try {
    opt.step();
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("dec0.1.conv.bias") != std::string::npos);
  }
  CHECK(a.value()[0] == 1.0f);
  CHECK(opt.steps() == 0);
}

TEST_CASE("optimizer skips parameters without a gradient") {
  Var<float> a(Tensor<float>(Shape{1}, 1.0f), true);
  Var<float> b(Tensor<float>(Shape{1}, 1.0f), true);
  backward(sum(a));
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::sgd;
  cfg.learning_rate = 0.5;
  Optimizer<float> opt({{"a", a}, {"b", b}}, cfg);
  opt.step();
  CHECK(a.value()[0] == 0.5f);
  CHECK(b.value()[0] == 1.0f);
  CHECK(opt.steps() == 1);
}

TEST_CASE("optimizer config validation") {
  OptimizerConfig cfg;
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = OptimizerConfig{};
  cfg.beta2 = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(parse_optimizer_kind("sgd") == OptimizerKind::sgd);
  CHECK_THROWS_AS(parse_optimizer_kind("rmsprop"), ConfigError);
}
