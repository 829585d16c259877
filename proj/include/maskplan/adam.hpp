#pragma once

// Adam with bias correction. Hyperparameter defaults are the standard ones;
// the learning rate is supplied per step so schedules live with the caller.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskplan/tensor.hpp"

namespace maskplan {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;  // first moments, congruent to params
  std::vector<std::vector<double>> v;  // second moments

  static AdamState init(const std::vector<NamedParam>& params,
                        AdamConfig config = {}) {
    AdamState s;
    s.config = config;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& p : params) {
      s.m.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
      s.v.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
    }
    return s;
  }
};

// Optional global-norm clip over all current gradients. Returns the norm.
inline double clip_grad_norm(std::vector<NamedParam>& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params) {
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params) {
      auto node = p.tensor.node();
      for (auto& g : node->grad) g *= s;
    }
  }
  return norm;
}

// One bias-corrected Adam update using the gradients currently stored on the
// parameters. Parameters whose gradient buffer is unset are treated as having
// zero gradient.
inline void adam_step(std::vector<NamedParam>& params, AdamState& state,
                      double lr) {
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adam_step: state does not match parameters");
  }
  state.step += 1;
  const double b1 = state.config.beta1;
  const double b2 = state.config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto node = params[i].tensor.node();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != node->value.size()) {
      throw std::invalid_argument("adam_step: moment shape mismatch for " +
                                  params[i].name);
    }
    const bool has_grad = node->grad.size() == node->value.size();
    for (std::size_t j = 0; j < node->value.size(); ++j) {
      const double g = has_grad ? node->grad[j] : 0.0;
      if (!std::isfinite(g)) {
        throw std::runtime_error("adam_step: non-finite gradient in parameter " +
                                 params[i].name);
      }
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      node->value[j] -= lr * mhat / (std::sqrt(vhat) + state.config.eps);
    }
  }
}

}  // namespace maskplan
