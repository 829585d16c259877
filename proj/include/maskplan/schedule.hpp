#pragma once

// Noise schedule, forward diffusion, reverse posterior and DDPM/DDIM sampling
// kernels. Everything here is stateless given a schedule and operates on raw
// buffers; callers own masking and RNG streams.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace maskplan {

struct DiffusionSchedule {
  std::vector<double> beta;       // beta[n-1] = beta_n, n = 1..N
  std::vector<double> alpha;      // 1 - beta_n
  std::vector<double> alpha_bar;  // prod_{s<=n} alpha_s

  std::int64_t steps() const { return static_cast<std::int64_t>(beta.size()); }

  // alpha_bar with the convention alpha_bar(0) = 1.
  double alpha_bar_at(std::int64_t n) const {
    if (n < 0 || n > steps()) throw std::invalid_argument("alpha_bar_at: step out of range");
    return n == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(n - 1)];
  }
  double beta_at(std::int64_t n) const {
    if (n < 1 || n > steps()) throw std::invalid_argument("beta_at: step out of range");
    return beta[static_cast<std::size_t>(n - 1)];
  }
  double alpha_at(std::int64_t n) const {
    if (n < 1 || n > steps()) throw std::invalid_argument("alpha_at: step out of range");
    return alpha[static_cast<std::size_t>(n - 1)];
  }
};

// Linear beta interpolation from beta_start to beta_end over N steps.
inline DiffusionSchedule make_schedule(std::int64_t n_steps, double beta_start,
                                       double beta_end) {
  if (n_steps < 2) throw std::invalid_argument("make_schedule: N must be >= 2");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw std::invalid_argument(
        "make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  DiffusionSchedule s;
  s.beta.resize(static_cast<std::size_t>(n_steps));
  s.alpha.resize(static_cast<std::size_t>(n_steps));
  s.alpha_bar.resize(static_cast<std::size_t>(n_steps));
  double prod = 1.0;
  for (std::int64_t n = 0; n < n_steps; ++n) {
    const double t = n_steps == 1 ? 0.0
                                  : static_cast<double>(n) /
                                        static_cast<double>(n_steps - 1);
    const double b = beta_start + t * (beta_end - beta_start);
    s.beta[static_cast<std::size_t>(n)] = b;
    s.alpha[static_cast<std::size_t>(n)] = 1.0 - b;
    prod *= 1.0 - b;
    s.alpha_bar[static_cast<std::size_t>(n)] = prod;
  }
  return s;
}

// Endpoints stretched so that alpha_bar(N) stays near zero for short
// schedules (the classic 1e-4..0.02 pair assumes N = 1000).
inline std::pair<double, double> default_beta_endpoints(std::int64_t n_steps) {
  const double s = 1000.0 / static_cast<double>(n_steps);
  double bs = 1e-4 * s;
  double be = 0.02 * s;
  if (be > 0.95) {
    bs *= 0.95 / be;
    be = 0.95;
  }
  return {bs, be};
}

inline DiffusionSchedule default_schedule(std::int64_t n_steps) {
  auto [bs, be] = default_beta_endpoints(n_steps);
  return make_schedule(n_steps, bs, be);
}

struct PosteriorParams {
  double coef_x0;   // sqrt(ab_{n-1}) beta_n / (1 - ab_n)
  double coef_xn;   // sqrt(alpha_n) (1 - ab_{n-1}) / (1 - ab_n)
  double variance;  // (1 - ab_{n-1}) / (1 - ab_n) * beta_n
};

inline PosteriorParams posterior_params(const DiffusionSchedule& s,
                                        std::int64_t n) {
  if (n < 1 || n > s.steps()) throw std::invalid_argument("posterior_params: step out of range");
  const double ab_n = s.alpha_bar_at(n);
  const double ab_p = s.alpha_bar_at(n - 1);
  const double beta_n = s.beta_at(n);
  const double denom = 1.0 - ab_n;
  PosteriorParams p;
  p.coef_x0 = std::sqrt(ab_p) * beta_n / denom;
  p.coef_xn = std::sqrt(s.alpha_at(n)) * (1.0 - ab_p) / denom;
  p.variance = (1.0 - ab_p) / denom * beta_n;
  return p;
}

// x_n = sqrt(ab_n) x0 + sqrt(1 - ab_n) noise, applied elementwise to whatever
// rows the caller passes.
inline void q_sample(std::span<const double> x0, std::int64_t n,
                     std::span<const double> noise, const DiffusionSchedule& s,
                     std::span<double> out) {
  if (x0.size() != noise.size() || x0.size() != out.size()) {
    throw std::invalid_argument("q_sample: buffer size mismatch");
  }
  const double ab = s.alpha_bar_at(n);
  const double cs = std::sqrt(ab);
  const double cn = std::sqrt(1.0 - ab);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = cs * x0[i] + cn * noise[i];
}

// One reverse step x_n -> x_{n-1}. At n = 1 the chain ends and the model's
// x0 estimate is the answer, so the noise term is never applied there.
inline void posterior_step(std::span<const double> xn,
                           std::span<const double> x0_hat, std::int64_t n,
                           std::span<const double> noise,
                           const DiffusionSchedule& s, std::span<double> out) {
  if (xn.size() != x0_hat.size() || xn.size() != out.size()) {
    throw std::invalid_argument("posterior_step: buffer size mismatch");
  }
  if (n < 1) throw std::invalid_argument("posterior_step: n must be >= 1");
  if (n == 1) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x0_hat[i];
    return;
  }
  if (noise.size() != out.size()) {
    throw std::invalid_argument("posterior_step: buffer size mismatch");
  }
  const PosteriorParams p = posterior_params(s, n);
  const double sd = std::sqrt(p.variance);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = p.coef_x0 * x0_hat[i] + p.coef_xn * xn[i] + sd * noise[i];
  }
}

// DDIM transition from step n to n_prev (n_prev may be 0, meaning the final
// x0). eta = 0 is deterministic; eta = 1 over consecutive steps matches the
// DDPM posterior in distribution.
inline void ddim_step(std::span<const double> xn,
                      std::span<const double> x0_hat, std::int64_t n,
                      std::int64_t n_prev, double eta,
                      std::span<const double> noise,
                      const DiffusionSchedule& s, std::span<double> out) {
  if (xn.size() != x0_hat.size() || xn.size() != out.size()) {
    throw std::invalid_argument("ddim_step: buffer size mismatch");
  }
  if (n_prev >= n || n_prev < 0) {
    throw std::invalid_argument("ddim_step: need 0 <= n_prev < n");
  }
  if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("ddim_step: eta in [0,1]");
  const double ab_n = s.alpha_bar_at(n);
  const double ab_p = s.alpha_bar_at(n_prev);
  const double sigma =
      eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_n)) *
      std::sqrt(1.0 - ab_n / ab_p);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_p - sigma * sigma));
  const double inv = 1.0 / std::sqrt(1.0 - ab_n);
  const double cs = std::sqrt(ab_n);
  const double cp = std::sqrt(ab_p);
  const bool stochastic = sigma > 0.0;
  if (stochastic && noise.size() != out.size()) {
    throw std::invalid_argument("ddim_step: buffer size mismatch");
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double eps_pred = (xn[i] - cs * x0_hat[i]) * inv;
    out[i] = cp * x0_hat[i] + dir * eps_pred +
             (stochastic ? sigma * noise[i] : 0.0);
  }
}

// Descending subsequence of steps for DDIM. k = N degenerates to the full
// schedule; k = 1 yields {N}.
inline std::vector<std::int64_t> ddim_step_sequence(std::int64_t n_steps,
                                                    std::int64_t k) {
  if (k < 1 || k > n_steps) throw std::invalid_argument("ddim_step_sequence: need 1 <= k <= N");
  std::vector<std::int64_t> seq;
  seq.reserve(static_cast<std::size_t>(k));
  if (k == 1) {
    seq.push_back(n_steps);
    return seq;
  }
  std::int64_t prev = -1;
  for (std::int64_t i = k - 1; i >= 0; --i) {
    const double t = static_cast<double>(i) / static_cast<double>(k - 1);
    auto n = static_cast<std::int64_t>(std::llround(1.0 + t * static_cast<double>(n_steps - 1)));
    if (n != prev) seq.push_back(n);
    prev = n;
  }
  return seq;  // descending, starts at N, ends at 1
}

}  // namespace maskplan
