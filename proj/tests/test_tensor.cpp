#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fd_oracle.hpp"
#include "maskplan/rng.hpp"
#include "maskplan/tensor.hpp"

using namespace maskplan;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, bool rg = true, double scale = 1.0) {
  return Tensor::randn(std::move(shape), rng, scale, rg);
}

// Checks d(loss)/d(input) against central differences for one graph builder.
void check_grad(Tensor& input, const std::function<Tensor()>& build,
                double tol = 1e-4) {
  Tensor loss = build();
  backward(loss);
  std::vector<double> ad(input.grad().begin(), input.grad().end());
  auto fd = oracle::finite_diff_grad([&] { return build().item(); }, input);
  REQUIRE(oracle::max_rel_err(ad, fd) <= tol);
}

}  // namespace

TEST_CASE("derivative of x^2 at x=3 is 6") {
  Tensor x = Tensor::scalar(3.0, true);
  Tensor loss = mul(x, x);
  backward(loss);
  REQUIRE(x.grad()[0] == Catch::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("detached branch gets exactly zero gradient") {
  Tensor x = Tensor::scalar(3.0, true);
  Tensor d = x.detach();
  Tensor loss = add(mul(x, x), mul(d, d));
  backward(loss);
  REQUIRE(x.grad()[0] == 6.0);  // the detached x^2 contributes nothing
  REQUIRE_FALSE(d.requires_grad());
}

TEST_CASE("gradient of mean((Wx-y)^2) matches central differences") {
  Rng rng = Rng::stream(7, 1);
  Tensor w = rand_tensor({4, 5}, rng);
  Tensor x = rand_tensor({5, 1}, rng, false);
  Tensor y = rand_tensor({4, 1}, rng, false);
  check_grad(w, [&] { return mse(matmul(w, x), y); });
}

TEST_CASE("non-scalar loss is rejected") {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  Tensor y = scale(x, 2.0);
  REQUIRE_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("cycle in the op graph is a hard error") {
  Tensor x = Tensor::scalar(1.0, true);
  Tensor y = scale(x, 2.0);
  y.node()->parents.push_back(y.node());  // forge a self-cycle
  Tensor loss = sum(y);
  REQUIRE_THROWS_WITH(backward(loss),
                      Catch::Matchers::ContainsSubstring("cycle"));
}

TEST_CASE("forward evaluation is deterministic") {
  auto run = [] {
    Rng rng = Rng::stream(3, 9);
    Tensor a = rand_tensor({3, 4}, rng, false);
    Tensor b = rand_tensor({4, 2}, rng, false);
    return matmul(gelu(a), b);
  };
  Tensor r1 = run();
  Tensor r2 = run();
  for (std::int64_t i = 0; i < r1.numel(); ++i)
    REQUIRE(r1.data()[static_cast<std::size_t>(i)] ==
            r2.data()[static_cast<std::size_t>(i)]);
}

// Property test: every supported op agrees with finite differences on
// randomized inputs. 9 ops x 12 seeds = 108 cases, plus the directed cases in
// this file.
TEST_CASE("autodiff matches finite differences across the op set") {
  const int kCases = 12;
  for (int seed = 0; seed < kCases; ++seed) {
    Rng rng = Rng::stream(100, static_cast<std::uint64_t>(seed));

    SECTION("add/sub/mul/scale seed " + std::to_string(seed)) {
      Tensor a = rand_tensor({3, 4}, rng);
      Tensor b = rand_tensor({3, 4}, rng, false);
      Tensor t = rand_tensor({3, 4}, rng, false);
      check_grad(a, [&] { return mse(scale(mul(add(a, b), sub(a, b)), 0.7), t); });
    }

    SECTION("matmul seed " + std::to_string(seed)) {
      Tensor a = rand_tensor({3, 5}, rng);
      Tensor b = rand_tensor({5, 2}, rng);
      Tensor t = rand_tensor({3, 2}, rng, false);
      check_grad(a, [&] { return mse(matmul(a, b), t); });
      check_grad(b, [&] { return mse(matmul(a, b), t); });
    }

    SECTION("bmm seed " + std::to_string(seed)) {
      Tensor a = rand_tensor({2, 3, 4}, rng);
      Tensor b = rand_tensor({2, 4, 2}, rng);
      Tensor t = rand_tensor({2, 3, 2}, rng, false);
      check_grad(a, [&] { return mse(bmm(a, b), t); });
      check_grad(b, [&] { return mse(bmm(a, b), t); });
    }

    SECTION("linear seed " + std::to_string(seed)) {
      Tensor x = rand_tensor({4, 6}, rng);
      Tensor w = rand_tensor({3, 6}, rng);
      Tensor b = rand_tensor({3}, rng);
      Tensor t = rand_tensor({4, 3}, rng, false);
      check_grad(x, [&] { return mse(linear(x, w, b), t); });
      check_grad(w, [&] { return mse(linear(x, w, b), t); });
      check_grad(b, [&] { return mse(linear(x, w, b), t); });
    }

    SECTION("conv1d seed " + std::to_string(seed)) {
      Tensor x = rand_tensor({2, 3, 5}, rng);
      Tensor w = rand_tensor({4, 3, 2}, rng);
      Tensor b = rand_tensor({4}, rng);
      Tensor t = rand_tensor({2, 4, 4}, rng, false);
      check_grad(x, [&] { return mse(conv1d(x, w, b), t); });
      check_grad(w, [&] { return mse(conv1d(x, w, b), t); });
      check_grad(b, [&] { return mse(conv1d(x, w, b), t); });
    }

    SECTION("conv1d_transpose seed " + std::to_string(seed)) {
      Tensor x = rand_tensor({2, 4, 3}, rng);
      Tensor w = rand_tensor({4, 3, 2}, rng);
      Tensor b = rand_tensor({3}, rng);
      Tensor t = rand_tensor({2, 3, 4}, rng, false);
      check_grad(x, [&] { return mse(conv1d_transpose(x, w, b), t); });
      check_grad(w, [&] { return mse(conv1d_transpose(x, w, b), t); });
      check_grad(b, [&] { return mse(conv1d_transpose(x, w, b), t); });
    }

    SECTION("activations and normalize seed " + std::to_string(seed)) {
      Tensor x = rand_tensor({3, 6}, rng);
      // keep relu inputs away from the kink
      for (auto& v : x.mutable_data())
        if (std::abs(v) < 0.05) v += v < 0 ? -0.1 : 0.1;
      Tensor t = rand_tensor({3, 6}, rng, false);
      check_grad(x, [&] { return mse(relu(x), t); });
      check_grad(x, [&] { return mse(gelu(x), t); });
      check_grad(x, [&] { return mse(normalize(x, 1), t); });
      check_grad(x, [&] { return mse(softmax(x), t); });
    }

    SECTION("slice/concat/reshape seed " + std::to_string(seed)) {
      Tensor x = rand_tensor({3, 6}, rng);
      Tensor t = rand_tensor({30}, rng, false);
      check_grad(x, [&] {
        Tensor left = slice(x, 1, 0, 2);
        Tensor mid = slice(x, 1, 2, 2);
        Tensor all = concat({left, mid, x}, 1);  // reuse x to force fan-out
        return mse(reshape(all, {30}), t);
      });
    }

    SECTION("embedding and cross entropy seed " + std::to_string(seed)) {
      Tensor table = rand_tensor({6, 4}, rng);
      std::vector<std::int64_t> ids = {1, 3, 1, 5};
      std::vector<std::int64_t> labels = {0, 2};
      Tensor w = rand_tensor({3, 8}, rng);
      Tensor b = rand_tensor({3}, rng);
      auto build = [&] {
        Tensor e = embedding(table, ids);
        Tensor flat = reshape(e, {2, 8});
        return cross_entropy(linear(flat, w, b), labels);
      };
      check_grad(table, build);
      check_grad(w, build);
    }

    SECTION("mean/sum/add_channel_bias seed " + std::to_string(seed)) {
      Tensor x = rand_tensor({2, 3, 4}, rng);
      Tensor bias = rand_tensor({2, 3}, rng);
      check_grad(bias, [&] { return mean(mul(add_channel_bias(x, bias),
                                             add_channel_bias(x, bias))); });
      check_grad(x, [&] { return scale(sum(mul(x, x)), 0.25); });
    }
  }
}

TEST_CASE("gradients accumulate across fan-out") {
  Tensor x = Tensor::scalar(2.0, true);
  Tensor y = add(mul(x, x), scale(x, 3.0));  // x^2 + 3x -> 2x + 3 = 7
  backward(y);
  REQUIRE(x.grad()[0] == Catch::Approx(7.0).epsilon(1e-12));
}
