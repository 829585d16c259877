#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "maskplan/rng.hpp"
#include "maskplan/schedule.hpp"

using namespace maskplan;

TEST_CASE("schedule length and bounds") {
  DiffusionSchedule s = default_schedule(50);
  REQUIRE(s.steps() == 50);
  for (std::int64_t n = 1; n <= 50; ++n) {
    REQUIRE(s.beta_at(n) > 0.0);
    REQUIRE(s.beta_at(n) < 1.0);
  }
  REQUIRE(s.alpha_bar_at(0) == 1.0);
  // scaled endpoints keep the terminal signal level near zero
  REQUIRE(s.alpha_bar_at(50) < 1e-3);
}

TEST_CASE("two-step constant schedule gives exact products") {
  DiffusionSchedule s = make_schedule(2, 0.5, 0.5);
  REQUIRE(s.alpha_bar_at(1) == Catch::Approx(0.5).epsilon(1e-15));
  REQUIRE(s.alpha_bar_at(2) == Catch::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("alpha_bar is strictly decreasing and posterior variance bounded") {
  Rng rng = Rng::stream(11, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t n_steps = 2 + rng.below(60);
    const double bs = 1e-4 + rng.uniform() * 0.1;
    const double be = bs + rng.uniform() * (0.9 - bs);
    DiffusionSchedule s = make_schedule(n_steps, bs, be);
    for (std::int64_t n = 1; n <= n_steps; ++n) {
      REQUIRE(s.alpha_bar_at(n) < s.alpha_bar_at(n - 1));
      const auto p = posterior_params(s, n);
      REQUIRE(p.variance >= 0.0);
      REQUIRE(p.variance <= s.beta_at(n) + 1e-15);
    }
  }
}

TEST_CASE("make_schedule rejects invalid bounds") {
  REQUIRE_THROWS_AS(make_schedule(1, 0.1, 0.2), std::invalid_argument);
  REQUIRE_THROWS_AS(make_schedule(10, 0.0, 0.2), std::invalid_argument);
  REQUIRE_THROWS_AS(make_schedule(10, 0.3, 0.2), std::invalid_argument);
  REQUIRE_THROWS_AS(make_schedule(10, 0.3, 1.0), std::invalid_argument);
}

TEST_CASE("q_sample endpoint identities") {
  DiffusionSchedule s = default_schedule(50);
  const std::int64_t n = 25;
  const double ab = s.alpha_bar_at(n);
  std::vector<double> x0 = {1.0, -0.5, 2.0};
  std::vector<double> zeros(3, 0.0);
  std::vector<double> eps = {0.3, -1.2, 0.8};
  std::vector<double> out(3);

  q_sample(x0, n, zeros, s, out);
  for (int i = 0; i < 3; ++i)
    REQUIRE(out[static_cast<std::size_t>(i)] ==
            Catch::Approx(std::sqrt(ab) * x0[static_cast<std::size_t>(i)]).epsilon(1e-15));

  q_sample(zeros, n, eps, s, out);
  for (int i = 0; i < 3; ++i)
    REQUIRE(out[static_cast<std::size_t>(i)] ==
            Catch::Approx(std::sqrt(1.0 - ab) * eps[static_cast<std::size_t>(i)]).epsilon(1e-15));
}

TEST_CASE("q_sample then analytic inversion recovers x0") {
  DiffusionSchedule s = default_schedule(50);
  Rng rng = Rng::stream(21, 4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t n = 1 + rng.below(50);
    const double x0 = rng.gaussian() * 2.0;
    const double eps = rng.gaussian();
    std::vector<double> xn(1);
    q_sample(std::span<const double>(&x0, 1), n,
             std::span<const double>(&eps, 1), s, xn);
    const double ab = s.alpha_bar_at(n);
    const double rec = (xn[0] - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    REQUIRE(rec == Catch::Approx(x0).margin(1e-12));
  }
}

TEST_CASE("forward marginals match Eq-2 moments over 100k draws") {
  DiffusionSchedule s = default_schedule(50);
  const std::int64_t n = 25;
  const double ab = s.alpha_bar_at(n);
  const int kDraws = 100000;
  Rng rng = Rng::stream(31, 0);
  double sum = 0.0, sq = 0.0;
  std::vector<double> out(1);
  const double x0 = 1.0;
  for (int i = 0; i < kDraws; ++i) {
    const double eps = rng.gaussian();
    q_sample(std::span<const double>(&x0, 1), n,
             std::span<const double>(&eps, 1), s, out);
    sum += out[0];
    sq += out[0] * out[0];
  }
  const double mean = sum / kDraws;
  const double var = sq / kDraws - mean * mean;
  const double se = std::sqrt((1.0 - ab) / kDraws);
  REQUIRE(std::abs(mean - std::sqrt(ab)) <= 3.0 * se);
  REQUIRE(std::abs(var - (1.0 - ab)) <= 0.02 * (1.0 - ab));
}

TEST_CASE("posterior step matches the hand-computed two-step case") {
  // beta = (0.2, 0.4): ab1 = 0.8, ab2 = 0.48. By hand:
  //   coef_x0 = sqrt(0.8)*0.4/0.52, coef_xn = sqrt(0.6)*0.2/0.52,
  //   mean(x2=1, x0hat=2) = 1.673963628169672, variance = 0.08/0.52.
  DiffusionSchedule s = make_schedule(2, 0.2, 0.4);
  const double x2 = 1.0, x0hat = 2.0, zero = 0.0;
  std::vector<double> out(1);
  posterior_step(std::span<const double>(&x2, 1),
                 std::span<const double>(&x0hat, 1), 2,
                 std::span<const double>(&zero, 1), s, out);
  REQUIRE(out[0] == Catch::Approx(1.673963628169672).margin(1e-12));
  const auto p = posterior_params(s, 2);
  REQUIRE(p.variance == Catch::Approx(0.15384615384615383).margin(1e-15));
}

TEST_CASE("posterior mean approaches x0hat as alpha_bar(n-1) -> 1") {
  DiffusionSchedule s = make_schedule(2, 1e-9, 0.5);
  const double v = 1.7, zero = 0.0;
  std::vector<double> out(1);
  posterior_step(std::span<const double>(&v, 1), std::span<const double>(&v, 1),
                 2, std::span<const double>(&zero, 1), s, out);
  REQUIRE(out[0] == Catch::Approx(v).margin(1e-6));
}

TEST_CASE("posterior step at n=1 returns x0hat, no noise") {
  DiffusionSchedule s = default_schedule(10);
  const double xn = 3.0, x0hat = -1.25, noise = 100.0;
  std::vector<double> out(1);
  posterior_step(std::span<const double>(&xn, 1),
                 std::span<const double>(&x0hat, 1), 1,
                 std::span<const double>(&noise, 1), s, out);
  REQUIRE(out[0] == x0hat);
}

TEST_CASE("ddim eta=0 is deterministic") {
  DiffusionSchedule s = default_schedule(20);
  std::vector<double> xn = {0.4, -0.9}, x0 = {0.1, 0.2};
  std::vector<double> a(2), b(2);
  ddim_step(xn, x0, 15, 10, 0.0, {}, s, a);
  ddim_step(xn, x0, 15, 10, 0.0, {}, s, b);
  REQUIRE(a == b);
}

TEST_CASE("ddim with k = N degenerates to the full step set") {
  auto seq = ddim_step_sequence(20, 20);
  REQUIRE(seq.size() == 20);
  for (std::int64_t i = 0; i < 20; ++i)
    REQUIRE(seq[static_cast<std::size_t>(i)] == 20 - i);
  auto one = ddim_step_sequence(50, 1);
  REQUIRE(one == std::vector<std::int64_t>{50});
  auto sub = ddim_step_sequence(50, 10);
  REQUIRE(sub.front() == 50);
  REQUIRE(sub.back() == 1);
  for (std::size_t i = 1; i < sub.size(); ++i) REQUIRE(sub[i] < sub[i - 1]);
}

TEST_CASE("ddim final transition to step 0 returns x0hat") {
  DiffusionSchedule s = default_schedule(10);
  std::vector<double> xn = {0.7}, x0 = {-0.3}, out(1);
  ddim_step(xn, x0, 1, 0, 1.0, {}, s, out);
  REQUIRE(out[0] == Catch::Approx(-0.3).margin(1e-12));
}

TEST_CASE("ddim eta=1 on consecutive steps matches ddpm moments over 50k draws") {
  DiffusionSchedule s = default_schedule(50);
  const std::int64_t n = 30;
  const double xn = 0.8, x0hat = -0.4;
  const int kDraws = 50000;
  Rng rng_a = Rng::stream(41, 0);
  Rng rng_b = Rng::stream(41, 1);
  double sum_a = 0, sq_a = 0, sum_b = 0, sq_b = 0;
  std::vector<double> out(1);
  for (int i = 0; i < kDraws; ++i) {
    double z = rng_a.gaussian();
    posterior_step(std::span<const double>(&xn, 1),
                   std::span<const double>(&x0hat, 1), n,
                   std::span<const double>(&z, 1), s, out);
    sum_a += out[0];
    sq_a += out[0] * out[0];
    z = rng_b.gaussian();
    ddim_step(std::span<const double>(&xn, 1),
              std::span<const double>(&x0hat, 1), n, n - 1, 1.0,
              std::span<const double>(&z, 1), s, out);
    sum_b += out[0];
    sq_b += out[0] * out[0];
  }
  const double mean_a = sum_a / kDraws, mean_b = sum_b / kDraws;
  const double var_a = sq_a / kDraws - mean_a * mean_a;
  const double var_b = sq_b / kDraws - mean_b * mean_b;
  REQUIRE(std::abs(mean_a - mean_b) <= 0.02 * std::max(std::abs(mean_a), 1.0));
  REQUIRE(std::abs(var_a - var_b) <= 0.02 * var_a);
}

TEST_CASE("ddim eta=1 full chain matches ddpm in distribution on a linear toy denoiser") {
  // x0hat(x) = 0.5 x + 0.1; both chains start from the same init law.
  DiffusionSchedule s = default_schedule(5);
  const int kChains = 20000;
  auto run = [&](bool use_ddim, std::uint64_t stream) {
    double sum = 0, sq = 0;
    std::vector<double> x(1), x0(1), out(1);
    for (int c = 0; c < kChains; ++c) {
      Rng rng = Rng::stream(51, stream, static_cast<std::uint64_t>(c));
      x[0] = rng.gaussian();
      for (std::int64_t n = 5; n >= 1; --n) {
        x0[0] = 0.5 * x[0] + 0.1;
        double z = rng.gaussian();
        if (use_ddim) {
          ddim_step(x, x0, n, n - 1, 1.0, std::span<const double>(&z, 1), s, out);
        } else {
          posterior_step(x, x0, n, std::span<const double>(&z, 1), s, out);
        }
        x[0] = out[0];
      }
      sum += x[0];
      sq += x[0] * x[0];
    }
    const double mean = sum / kChains;
    return std::pair<double, double>{mean, sq / kChains - mean * mean};
  };
  auto [mean_ddpm, var_ddpm] = run(false, 0);
  auto [mean_ddim, var_ddim] = run(true, 1);
  REQUIRE(std::abs(mean_ddpm - mean_ddim) <= 0.03);
  REQUIRE(std::abs(var_ddpm - var_ddim) <= 0.03 * std::max(var_ddpm, 1.0));
}
