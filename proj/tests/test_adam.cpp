#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "maskplan/adam.hpp"
#include "maskplan/tensor.hpp"

using namespace maskplan;

namespace {

void set_grad(Tensor& t, double g) {
  auto node = t.node();
  node->grad.assign(node->value.size(), g);
}

}  // namespace

TEST_CASE("zero gradient leaves parameters unchanged") {
  std::vector<NamedParam> params{{"p", Tensor::from({3}, {1.0, -2.0, 0.5}, true)}};
  AdamState state = AdamState::init(params);
  for (int i = 0; i < 5; ++i) {
    set_grad(params[0].tensor, 0.0);
    adam_step(params, state, 0.1);
  }
  REQUIRE(params[0].tensor.data()[0] == 1.0);
  REQUIRE(params[0].tensor.data()[1] == -2.0);
  REQUIRE(params[0].tensor.data()[2] == 0.5);
  REQUIRE(state.step == 5);
}

TEST_CASE("first step with unit gradient moves by about -lr") {
  // bias correction makes mhat = vhat = 1, so delta = -lr / (1 + eps)
  std::vector<NamedParam> params{{"w", Tensor::scalar(0.0, true)}};
  AdamState state = AdamState::init(params);
  set_grad(params[0].tensor, 1.0);
  adam_step(params, state, 0.1);
  const double expected = -0.1 * (1.0 / (1.0 + 1e-8));
  REQUIRE(params[0].tensor.data()[0] == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("two steps with g=1 reproduce a scripted Adam trace") {
  // Independent scalar reference computed step by step.
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double w_ref = 0.3, m = 0.0, v = 0.0;
  for (int step = 1; step <= 2; ++step) {
    const double g = 1.0;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, step));
    const double vhat = v / (1 - std::pow(b2, step));
    w_ref -= lr * mhat / (std::sqrt(vhat) + eps);
  }

  std::vector<NamedParam> params{{"w", Tensor::scalar(0.3, true)}};
  AdamState state = AdamState::init(params);
  for (int step = 0; step < 2; ++step) {
    set_grad(params[0].tensor, 1.0);
    adam_step(params, state, lr);
  }
  REQUIRE(params[0].tensor.data()[0] == Catch::Approx(w_ref).epsilon(1e-14));
}

TEST_CASE("non-finite gradient names the offending parameter") {
  std::vector<NamedParam> params{{"layer0.weight", Tensor::scalar(0.0, true)}};
  AdamState state = AdamState::init(params);
  set_grad(params[0].tensor, std::numeric_limits<double>::quiet_NaN());
  REQUIRE_THROWS_WITH(adam_step(params, state, 0.1),
                      Catch::Matchers::ContainsSubstring("layer0.weight"));
}

TEST_CASE("clip_grad_norm rescales to the requested norm") {
  std::vector<NamedParam> params{{"p", Tensor::from({2}, {0.0, 0.0}, true)}};
  params[0].tensor.node()->grad = {3.0, 4.0};  // norm 5
  const double norm = clip_grad_norm(params, 1.0);
  REQUIRE(norm == Catch::Approx(5.0));
  REQUIRE(params[0].tensor.grad()[0] == Catch::Approx(0.6));
  REQUIRE(params[0].tensor.grad()[1] == Catch::Approx(0.8));
}
