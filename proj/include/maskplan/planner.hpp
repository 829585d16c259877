#pragma once

// Inference: reverse diffusion from masked noise under projected conditions,
// with DDPM, DDIM, deterministic (zero-init, noise-free) and single-step
// noise samplers. Plans decode as per-column argmax over unmasked actions.
// Sampling is batched in lockstep across (instance, sample) pairs and draws
// all noise from per-pair streams, so results do not depend on batching or
// thread count.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <future>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskplan/classifier.hpp"
#include "maskplan/mask.hpp"
#include "maskplan/rng.hpp"
#include "maskplan/schedule.hpp"
#include "maskplan/unet.hpp"
#include "maskplan/world.hpp"

namespace maskplan {

enum class SamplerKind { kDdpm, kDdim, kDeterministic, kNoise };

inline const char* sampler_name(SamplerKind k) {
  switch (k) {
    case SamplerKind::kDdpm: return "ddpm";
    case SamplerKind::kDdim: return "ddim";
    case SamplerKind::kDeterministic: return "det";
    case SamplerKind::kNoise: return "noise";
  }
  return "?";
}

inline SamplerKind sampler_from_name(const std::string& s) {
  if (s == "ddpm") return SamplerKind::kDdpm;
  if (s == "ddim") return SamplerKind::kDdim;
  if (s == "det" || s == "deterministic") return SamplerKind::kDeterministic;
  if (s == "noise") return SamplerKind::kNoise;
  throw std::invalid_argument("unknown sampler: " + s);
}

struct SamplerConfig {
  SamplerKind kind = SamplerKind::kDdpm;
  std::int64_t ddim_steps = 10;
  double eta = 1.0;
};

struct PlanSample {
  std::vector<std::int64_t> actions;  // decoded ids, length T
  std::vector<double> logits;         // final x0 action rows, L_a * T
  MaskKind mask_kind = MaskKind::kNone;
  std::int64_t predicted_task = 0;
  std::int64_t instance_index = 0;
  std::int64_t sample_index = 0;
};

// Hook for auditing the chain state; may be called from several threads.
struct StepObserver {
  virtual ~StepObserver() = default;
  // action_rows is the L_a x T block of one chain at diffusion step n
  // (n = 0 means the final x0 estimate).
  virtual void on_state(std::int64_t n, std::span<const double> action_rows,
                        const ActionMask& mask) = 0;
};

struct PlannerContext {
  const DenoiserUNet* unet = nullptr;
  const TaskClassifier* classifier = nullptr;
  const DiffusionSchedule* schedule = nullptr;
  const std::vector<ActionMask>* task_masks = nullptr;
  MaskKind mask_kind = MaskKind::kHard;
  ProjectionConfig proj{};
};

namespace detail {

struct ChainState {
  std::vector<double> x;  // action rows, L_a * T
  ActionMask mask;
  std::int64_t task = 0;
  std::int64_t instance_index = 0;
  std::int64_t sample_index = 0;
  Rng rng{0};
};

inline void masked_gaussian(std::vector<double>& buf, const ActionMask& mask,
                            std::int64_t horizon, Rng& rng) {
  const auto la = static_cast<std::int64_t>(mask.weights.size());
  for (std::int64_t a = 0; a < la; ++a) {
    const double w = mask.weights[static_cast<std::size_t>(a)];
    for (std::int64_t t = 0; t < horizon; ++t) {
      buf[static_cast<std::size_t>(a * horizon + t)] = w * rng.gaussian();
    }
  }
}

// One model call over all chains in lockstep at (possibly distinct) steps.
inline std::vector<double> predict_x0(const PlannerContext& ctx,
                                      std::span<ChainState> chains,
                                      std::span<const PlanInstance> instances,
                                      std::span<const std::int64_t> steps) {
  const auto& layout = ctx.unet->config().layout;
  const auto B = static_cast<std::int64_t>(chains.size());
  const auto la = layout.num_actions, T = layout.horizon;

  std::vector<double> state(static_cast<std::size_t>(B * layout.dim() * T), 0.0);
  BatchConditions cond;
  cond.batch = B;
  cond.task_onehot.assign(static_cast<std::size_t>(B * layout.num_tasks), 0.0);
  cond.obs_start.resize(static_cast<std::size_t>(B * layout.obs_dim));
  cond.obs_goal.resize(static_cast<std::size_t>(B * layout.obs_dim));
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& ch = chains[static_cast<std::size_t>(b)];
    const auto& ins = instances[static_cast<std::size_t>(ch.instance_index)];
    std::copy(ch.x.begin(), ch.x.end(),
              state.begin() +
                  static_cast<std::ptrdiff_t>((b * layout.dim() + layout.action_row0()) * T));
    cond.task_onehot[static_cast<std::size_t>(b * layout.num_tasks + ch.task)] = 1.0;
    std::copy(ins.obs_start.begin(), ins.obs_start.end(),
              cond.obs_start.begin() + static_cast<std::ptrdiff_t>(b * layout.obs_dim));
    std::copy(ins.obs_goal.begin(), ins.obs_goal.end(),
              cond.obs_goal.begin() + static_cast<std::ptrdiff_t>(b * layout.obs_dim));
  }
  Tensor x = Tensor::from({B, layout.dim(), T}, std::move(state));
  Tensor out = ctx.unet->forward(project(x, layout, cond, ctx.proj), steps);

  // Masked action rows of the prediction, per chain. Rows with zero weight
  // are zeroed exactly; fractional soft weights gate only the noise, never
  // the signal estimate.
  std::vector<double> x0(static_cast<std::size_t>(B * la * T));
  const double* po = out.data().data();
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& mask = chains[static_cast<std::size_t>(b)].mask;
    for (std::int64_t a = 0; a < la; ++a) {
      const double keep = mask.weights[static_cast<std::size_t>(a)] > 0.0 ? 1.0 : 0.0;
      const double* src = po + (b * layout.dim() + layout.action_row0() + a) * T;
      double* dst = x0.data() + (b * la + a) * T;
      for (std::int64_t t = 0; t < T; ++t) dst[t] = keep * src[t];
    }
  }
  return x0;
}

inline std::vector<std::int64_t> decode_plan(std::span<const double> x0,
                                             const ActionMask& mask,
                                             std::int64_t horizon) {
  const auto la = static_cast<std::int64_t>(mask.weights.size());
  std::vector<std::int64_t> plan(static_cast<std::size_t>(horizon));
  for (std::int64_t t = 0; t < horizon; ++t) {
    std::int64_t best = -1;
    double best_v = 0.0;
    for (std::int64_t a = 0; a < la; ++a) {
      if (mask.weights[static_cast<std::size_t>(a)] <= 0.0) continue;
      const double v = x0[static_cast<std::size_t>(a * horizon + t)];
      if (best < 0 || v > best_v) {
        best = a;
        best_v = v;
      }
    }
    if (best < 0) throw std::runtime_error("decode_plan: mask excludes every action");
    plan[static_cast<std::size_t>(t)] = best;
  }
  return plan;
}

inline void run_chunk(const PlannerContext& ctx,
                      std::span<const PlanInstance> instances,
                      std::span<ChainState> chains, const SamplerConfig& sampler,
                      StepObserver* observer, std::vector<PlanSample>& out,
                      std::size_t out_offset) {
  const auto& layout = ctx.unet->config().layout;
  const auto T = layout.horizon;
  const auto la = layout.num_actions;
  const auto n_total = ctx.schedule->steps();
  const auto B = static_cast<std::int64_t>(chains.size());
  const auto chain_len = static_cast<std::size_t>(la * T);

  std::vector<double> noise(chain_len);
  auto observe = [&](std::int64_t n) {
    if (!observer) return;
    for (const auto& ch : chains) observer->on_state(n, ch.x, ch.mask);
  };

  // step list, descending; DDPM and the deterministic baseline walk every
  // step, DDIM walks a subsequence, the noise baseline calls the model once.
  std::vector<std::int64_t> steps;
  if (sampler.kind == SamplerKind::kDdim) {
    steps = ddim_step_sequence(n_total, sampler.ddim_steps);
  } else if (sampler.kind == SamplerKind::kNoise) {
    steps = {n_total};
  } else {
    steps.resize(static_cast<std::size_t>(n_total));
    for (std::int64_t i = 0; i < n_total; ++i) steps[static_cast<std::size_t>(i)] = n_total - i;
  }

  observe(n_total);
  std::vector<double> final_x0(static_cast<std::size_t>(B) * chain_len);
  std::vector<std::int64_t> step_batch(static_cast<std::size_t>(B));
  for (std::size_t si = 0; si < steps.size(); ++si) {
    const std::int64_t n = steps[si];
    std::fill(step_batch.begin(), step_batch.end(), n);
    std::vector<double> x0 = predict_x0(ctx, chains, instances, step_batch);

    const bool last = si + 1 == steps.size();
    const std::int64_t n_prev =
        last ? 0 : steps[si + 1];
    for (std::int64_t b = 0; b < B; ++b) {
      auto& ch = chains[static_cast<std::size_t>(b)];
      std::span<const double> x0_b(x0.data() + static_cast<std::size_t>(b) * chain_len, chain_len);
      if (sampler.kind == SamplerKind::kNoise || (last && sampler.kind != SamplerKind::kDdim)) {
        // the chain ends on the model's x0 estimate
        std::copy(x0_b.begin(), x0_b.end(),
                  final_x0.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(b) * chain_len));
        continue;
      }
      switch (sampler.kind) {
        case SamplerKind::kDdpm:
          masked_gaussian(noise, ch.mask, T, ch.rng);
          posterior_step(ch.x, x0_b, n, noise, *ctx.schedule, ch.x);
          break;
        case SamplerKind::kDeterministic:
          std::fill(noise.begin(), noise.end(), 0.0);
          posterior_step(ch.x, x0_b, n, noise, *ctx.schedule, ch.x);
          break;
        case SamplerKind::kDdim:
          masked_gaussian(noise, ch.mask, T, ch.rng);
          ddim_step(ch.x, x0_b, n, n_prev, sampler.eta, noise, *ctx.schedule,
                    ch.x);
          if (last) {
            std::copy(ch.x.begin(), ch.x.end(),
                      final_x0.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(b) * chain_len));
          }
          break;
        case SamplerKind::kNoise:
          break;  // handled above
      }
    }
    if (!last) observe(n_prev == 0 ? 0 : n_prev);
  }

  for (std::int64_t b = 0; b < B; ++b) {
    auto& ch = chains[static_cast<std::size_t>(b)];
    std::span<const double> x0_b(final_x0.data() + static_cast<std::size_t>(b) * chain_len, chain_len);
    if (observer) observer->on_state(0, x0_b, ch.mask);
    PlanSample s;
    s.actions = decode_plan(x0_b, ch.mask, T);
    s.logits.assign(x0_b.begin(), x0_b.end());
    s.mask_kind = ctx.mask_kind;
    s.predicted_task = ch.task;
    s.instance_index = ch.instance_index;
    s.sample_index = ch.sample_index;
    out[out_offset + static_cast<std::size_t>(b)] = std::move(s);
  }
}

}  // namespace detail

// Batch classifier pass: posterior and argmax label per instance.
inline std::vector<TaskClassifier::Prediction> classify_instances(
    const TaskClassifier& clf, std::span<const PlanInstance> instances) {
  std::vector<TaskClassifier::Prediction> preds;
  preds.reserve(instances.size());
  for (const auto& ins : instances) {
    preds.push_back(clf.classify(ins.obs_start, ins.obs_goal));
  }
  return preds;
}

// Samples `samples_per_instance` plans for every instance. Observations and
// the predicted task drive the conditions; ground-truth actions are never
// read here.
inline std::vector<PlanSample> sample_plans(
    const PlannerContext& ctx, std::span<const PlanInstance> instances,
    const SamplerConfig& sampler, std::uint64_t seed,
    std::int64_t samples_per_instance = 1, StepObserver* observer = nullptr,
    std::int64_t jobs = 1) {
  if (!ctx.unet || !ctx.classifier || !ctx.schedule || !ctx.task_masks) {
    throw std::invalid_argument("sample_plans: incomplete context");
  }
  const auto& layout = ctx.unet->config().layout;
  if (static_cast<std::int64_t>((*ctx.task_masks).size()) != layout.num_tasks) {
    throw std::invalid_argument("sample_plans: classifier/model dim mismatch");
  }
  auto preds = classify_instances(*ctx.classifier, instances);

  const auto n_pairs =
      static_cast<std::int64_t>(instances.size()) * samples_per_instance;
  std::vector<detail::ChainState> chains(static_cast<std::size_t>(n_pairs));
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(instances.size()); ++i) {
    const auto& pred = preds[static_cast<std::size_t>(i)];
    for (std::int64_t s = 0; s < samples_per_instance; ++s) {
      auto& ch = chains[static_cast<std::size_t>(i * samples_per_instance + s)];
      ch.instance_index = i;
      ch.sample_index = s;
      ch.task = pred.label;
      switch (ctx.mask_kind) {
        case MaskKind::kHard:
          ch.mask = (*ctx.task_masks)[static_cast<std::size_t>(pred.label)];
          break;
        case MaskKind::kSoft:
          ch.mask = soft_mask(pred.posterior, *ctx.task_masks);
          break;
        case MaskKind::kNone:
          ch.mask = ones_mask(layout.num_actions);
          break;
      }
      ch.rng = Rng::stream(seed, 0x706c616eull, static_cast<std::uint64_t>(i),
                           static_cast<std::uint64_t>(s));
      ch.x.assign(static_cast<std::size_t>(layout.num_actions * layout.horizon), 0.0);
      if (sampler.kind != SamplerKind::kDeterministic) {
        detail::masked_gaussian(ch.x, ch.mask, layout.horizon, ch.rng);
      }
    }
  }

  std::vector<PlanSample> out(static_cast<std::size_t>(n_pairs));
  const std::int64_t kMaxChunk = 256;
  struct Chunk {
    std::size_t begin, size;
  };
  std::vector<Chunk> chunks;
  for (std::int64_t at = 0; at < n_pairs; at += kMaxChunk) {
    chunks.push_back({static_cast<std::size_t>(at),
                      static_cast<std::size_t>(std::min(kMaxChunk, n_pairs - at))});
  }
  const auto workers = std::max<std::int64_t>(1, jobs);
  std::vector<std::future<void>> futures;
  std::atomic<std::size_t> next{0};
  for (std::int64_t w = 0; w < workers; ++w) {
    futures.push_back(std::async(std::launch::async, [&] {
      while (true) {
        const std::size_t ci = next.fetch_add(1);
        if (ci >= chunks.size()) break;
        const auto& c = chunks[ci];
        detail::run_chunk(ctx, instances,
                          std::span<detail::ChainState>(chains.data() + c.begin, c.size),
                          sampler, observer, out, c.begin);
      }
    }));
  }
  for (auto& f : futures) f.get();
  return out;
}

// Convenience wrapper for a single observation pair.
inline PlanSample infer_plan(const PlannerContext& ctx,
                             const PlanInstance& instance,
                             const SamplerConfig& sampler, std::uint64_t seed,
                             StepObserver* observer = nullptr) {
  auto samples = sample_plans(ctx, std::span<const PlanInstance>(&instance, 1),
                              sampler, seed, 1, observer);
  return samples.front();
}

}  // namespace maskplan
