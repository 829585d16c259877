#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "fd_oracle.hpp"
#include "maskplan/unet.hpp"

using namespace maskplan;

namespace {

UNetConfig tiny_config(std::int64_t horizon) {
  UNetConfig cfg;
  cfg.layout = StateLayout{3, 6, 5, horizon};
  cfg.channels = {8, 16, 32};
  cfg.step_embed_dim = 8;
  cfg.diffusion_steps = 10;
  return cfg;
}

}  // namespace

TEST_CASE("output shape equals input shape for all paper horizons") {
  for (std::int64_t T : {3, 4, 5, 6}) {
    UNetConfig cfg = tiny_config(T);
    Rng init = Rng::stream(1, 2);
    DenoiserUNet unet(cfg, init);
    Rng data = Rng::stream(1, 3);
    Tensor x = Tensor::randn({2, cfg.layout.dim(), T}, data);
    std::vector<std::int64_t> steps{1, 5};
    Tensor y = unet.forward(x, steps);
    REQUIRE(y.shape() == x.shape());
    for (double v : y.data()) REQUIRE(std::isfinite(v));
  }
}

TEST_CASE("config rejects a horizon too short for the down path") {
  UNetConfig cfg = tiny_config(2);  // two down stages need T >= 3
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("forward is deterministic for fixed parameters and input") {
  UNetConfig cfg = tiny_config(3);
  Rng init = Rng::stream(5, 1);
  DenoiserUNet unet(cfg, init);
  Rng data = Rng::stream(5, 2);
  Tensor x = Tensor::randn({1, cfg.layout.dim(), 3}, data);
  std::vector<std::int64_t> steps{4};
  Tensor a = unet.forward(x, steps);
  Tensor b = unet.forward(x, steps);
  for (std::int64_t i = 0; i < a.numel(); ++i)
    REQUIRE(a.data()[static_cast<std::size_t>(i)] ==
            b.data()[static_cast<std::size_t>(i)]);
}

TEST_CASE("input shape mismatch is rejected") {
  UNetConfig cfg = tiny_config(3);
  Rng init = Rng::stream(6, 1);
  DenoiserUNet unet(cfg, init);
  Tensor bad = Tensor::zeros({1, cfg.layout.dim() + 1, 3});
  std::vector<std::int64_t> steps{1};
  REQUIRE_THROWS_AS(unet.forward(bad, steps), std::invalid_argument);
  Tensor ok_shape = Tensor::zeros({2, cfg.layout.dim(), 3});
  std::vector<std::int64_t> one_step{1};  // batch 2 but one step index
  REQUIRE_THROWS_AS(unet.forward(ok_shape, one_step), std::invalid_argument);
}

TEST_CASE("outputs at n=1 and n=N differ for generic input") {
  UNetConfig cfg = tiny_config(4);
  Rng init = Rng::stream(7, 1);
  DenoiserUNet unet(cfg, init);
  Rng data = Rng::stream(7, 2);
  Tensor x = Tensor::randn({1, cfg.layout.dim(), 4}, data);
  std::vector<std::int64_t> lo{1}, hi{cfg.diffusion_steps};
  Tensor a = unet.forward(x, lo);
  Tensor b = unet.forward(x, hi);
  double diff = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    diff += std::abs(a.data()[static_cast<std::size_t>(i)] -
                     b.data()[static_cast<std::size_t>(i)]);
  REQUIRE(diff > 1e-6);
}

TEST_CASE("step embeddings are pairwise distinct over 1..N") {
  const std::int64_t N = 200, dim = 16;
  std::vector<std::int64_t> steps(static_cast<std::size_t>(N));
  for (std::int64_t n = 1; n <= N; ++n) steps[static_cast<std::size_t>(n - 1)] = n;
  Tensor e = step_embedding_table(steps, dim);
  std::set<std::vector<double>> rows;
  for (std::int64_t n = 0; n < N; ++n) {
    std::vector<double> row(e.data().begin() + n * dim,
                            e.data().begin() + (n + 1) * dim);
    REQUIRE(rows.insert(row).second);
  }
}

TEST_CASE("every unet parameter gradient matches finite differences") {
  UNetConfig cfg = tiny_config(3);
  Rng init = Rng::stream(9, 1);
  DenoiserUNet unet(cfg, init);
  Rng data = Rng::stream(9, 2);
  Tensor x = Tensor::randn({2, cfg.layout.dim(), 3}, data);
  Tensor tgt = Tensor::randn({2, cfg.layout.dim(), 3}, data);
  std::vector<std::int64_t> steps{2, 7};

  auto build = [&] { return mse(unet.forward(x, steps), tgt); };
  Tensor loss = build();
  backward(loss);

  for (auto& p : unet.params()) {
    std::vector<double> ad(p.tensor.grad().begin(), p.tensor.grad().end());
    auto fd = oracle::finite_diff_grad([&] { return build().item(); }, p.tensor);
    INFO("parameter " << p.name);
    REQUIRE(oracle::max_rel_err(ad, fd) <= 1e-4);
  }
}
