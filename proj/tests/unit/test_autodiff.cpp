#include <doctest.h>

#include <random>

#include <modeseg/autodiff.hpp>

#include "oracles.hpp"

using namespace modeseg;

TEST_CASE("sum gives a gradient of ones") {
  Var<double> x(Tensor<double>(Shape{2, 3}, {1, -2, 3, 4, 5, -6}), true);
  backward(sum(x));
  for (double g : x.grad().data()) CHECK(g == 1.0);
}

TEST_CASE("half sum of squares gives the input as gradient") {
  Var<double> x(Tensor<double>(Shape{5}, {0.5, -1.5, 2.0, 0.0, 3.25}), true);
  backward(scale(sum(mul(x, x)), 0.5));
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(x.value()[i]));
}

TEST_CASE("mean scales the gradient by the element count") {
  Var<double> x(Tensor<double>(Shape{4}, 2.0), true);
  Var<double> m = mean(x);
  CHECK(m.value()[0] == 2.0);
  backward(m);
  for (double g : x.grad().data()) CHECK(g == 0.25);
}

TEST_CASE("gradients accumulate at fan-out points") {
  // y = x*x + x  ->  dy/dx = 2x + 1
  Var<double> x(Tensor<double>(Shape{3}, {1.0, -2.0, 0.5}), true);
  backward(sum(add(mul(x, x), x)));
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  CHECK(x.grad()[1] == doctest::Approx(-3.0));
  CHECK(x.grad()[2] == doctest::Approx(2.0));
}

TEST_CASE("repeated backward calls accumulate leaf gradients") {
  Var<double> x(Tensor<double>(Shape{2}, {1.0, 2.0}), true);
  backward(sum(scale(x, 3.0)));
  backward(sum(scale(x, 3.0)));
  CHECK(x.grad()[0] == 6.0);
  CHECK(x.grad()[1] == 6.0);
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("backward rejects non-scalar losses") {
  Var<double> x(Tensor<double>(Shape{2}, 1.0), true);
  CHECK_THROWS_AS(backward(scale(x, 2.0)), ContractError);
}

TEST_CASE("ops on constants record no backward closure") {
  Var<float> a(Tensor<float>(Shape{3}, 1.0f));
  Var<float> b(Tensor<float>(Shape{3}, 2.0f));
  Var<float> c = mul(add(a, b), b);
  CHECK(c.node()->is_leaf());
  CHECK_FALSE(c.requires_grad());
  CHECK(c.value()[0] == 6.0f);
}

TEST_CASE("shape mismatch is a dimension error") {
  Var<double> a(Tensor<double>(Shape{2}, 1.0));
  Var<double> b(Tensor<double>(Shape{3}, 1.0));
  CHECK_THROWS_AS(add(a, b), DimensionError);
  CHECK_THROWS_AS(mul(a, b), DimensionError);
}

TEST_CASE("topological order lists inputs before consumers, once each") {
  Var<double> x(Tensor<double>(Shape{2}, 1.0), true);
  Var<double> y = mul(x, x);
  Var<double> z = add(y, x);
  Var<double> loss = sum(z);
  auto order = topological_order(loss);
  auto pos = [&](Node<double>* n) {
    return std::find(order.begin(), order.end(), n) - order.begin();
  };
  CHECK(order.size() == 4);
  CHECK(pos(x.node()) < pos(y.node()));
  CHECK(pos(y.node()) < pos(z.node()));
  CHECK(pos(z.node()) < pos(loss.node()));
}

TEST_CASE("elementwise helpers match finite differences") {
  std::mt19937_64 rng(3);
  Var<double> a(oracle::random_tensor<double>(Shape{3, 4}, rng), true);
  Var<double> b(oracle::random_tensor<double>(Shape{3, 4}, rng), true);
  std::vector<Var<double>> inputs{a, b};
  auto r = oracle::gradcheck<double>(
      inputs, [&] { return mean(mul(add(a, scale(b, 0.5)), b)); }, [] {}, 1e-6);
  CHECK(r.max_rel <= 1e-7);
}

TEST_CASE("ops do not mutate their inputs") {
  std::mt19937_64 rng(4);
  Tensor<double> av = oracle::random_tensor<double>(Shape{6}, rng);
  Var<double> a(av, true);
  backward(sum(mul(a, a)));
  CHECK(a.value() == av);
}
