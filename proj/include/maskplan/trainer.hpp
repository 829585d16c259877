#pragma once

// Two-stage training. Stage 1 fits the task classifier with cross entropy;
// stage 2 runs the masked-diffusion loop: per sample, mask the one-hot action
// rows with the ground-truth task's mask, diffuse to a uniformly drawn step
// with mask-gated noise, predict x0 from the projected state, and take the
// squared error against the boundary-weighted masked target over action rows.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskplan/adam.hpp"
#include "maskplan/checkpoint.hpp"
#include "maskplan/classifier.hpp"
#include "maskplan/mask.hpp"
#include "maskplan/metrics.hpp"
#include "maskplan/planner.hpp"
#include "maskplan/schedule.hpp"
#include "maskplan/train_config.hpp"
#include "maskplan/unet.hpp"
#include "maskplan/world.hpp"

namespace maskplan {

namespace detail {

enum TrainerStream : std::uint64_t {
  kStreamClfInit = 0x636c6601,
  kStreamClfBatch = 0x636c6602,
  kStreamDiffInit = 0x64660001,
  kStreamDiffBatch = 0x64660002,
  kStreamDiffNoise = 0x64660003,
  kStreamEval = 0x64660004,
};

inline void check_train_provenance(std::span<const PlanInstance> batch,
                                   const char* who) {
  for (const auto& ins : batch) {
    if (ins.split == Split::kTest) {
      throw std::invalid_argument(std::string(who) +
                                  ": refusing to train on a test-split instance");
    }
  }
}

}  // namespace detail

inline DiffusionSchedule schedule_from_config(const TrainConfig& cfg) {
  if (cfg.beta_start > 0.0 && cfg.beta_end > 0.0) {
    return make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end);
  }
  return default_schedule(cfg.diffusion_steps);
}

// One Algorithm-1 step over a batch; returns the loss. The per-sample mask is
// the GT task's binary mask (all ones when training the unmasked model).
inline double diffusion_train_step(std::span<const PlanInstance> batch,
                                   DenoiserUNet& unet,
                                   const DiffusionSchedule& schedule,
                                   const std::vector<ActionMask>& task_masks,
                                   const TrainConfig& cfg, AdamState& opt,
                                   std::int64_t step, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("diffusion_train_step: empty batch");
  detail::check_train_provenance(batch, "diffusion_train_step");
  const auto& layout = unet.config().layout;
  const auto B = static_cast<std::int64_t>(batch.size());
  const auto la = layout.num_actions, T = layout.horizon;
  const auto N = schedule.steps();

  std::vector<double> mask_rows(static_cast<std::size_t>(B * la));
  std::vector<double> x0m(static_cast<std::size_t>(B * la * T), 0.0);
  std::vector<double> xn(static_cast<std::size_t>(B * la * T));
  std::vector<double> target(static_cast<std::size_t>(B * la * T));
  std::vector<std::int64_t> steps(static_cast<std::size_t>(B));
  const ActionMask ones = ones_mask(la);

  for (std::int64_t b = 0; b < B; ++b) {
    const auto& ins = batch[static_cast<std::size_t>(b)];
    const ActionMask& mask = cfg.mask_kind == MaskKind::kNone
                                 ? ones
                                 : task_masks[static_cast<std::size_t>(ins.task)];
    std::copy(mask.weights.begin(), mask.weights.end(),
              mask_rows.begin() + static_cast<std::ptrdiff_t>(b * la));

    // masked one-hot action rows
    for (std::int64_t t = 0; t < T; ++t) {
      const auto a = ins.actions[static_cast<std::size_t>(t)];
      x0m[static_cast<std::size_t>((b * la + a) * T + t)] =
          mask.weights[static_cast<std::size_t>(a)];
    }

    const std::int64_t n = 1 + rng.below(N);
    steps[static_cast<std::size_t>(b)] = n;
    const double ab = schedule.alpha_bar_at(n);
    const double cs = std::sqrt(ab), cn = std::sqrt(1.0 - ab);
    for (std::int64_t a = 0; a < la; ++a) {
      const double w = mask.weights[static_cast<std::size_t>(a)];
      for (std::int64_t t = 0; t < T; ++t) {
        const auto idx = static_cast<std::size_t>((b * la + a) * T + t);
        const double eps = w * rng.gaussian();  // noise only where unmasked
        xn[idx] = cs * x0m[idx] + cn * eps;
        // the loss target carries the boundary weight, matching Proj(x0hat)
        const double bw = (t == 0 || t == T - 1) ? cfg.boundary_weight : 1.0;
        target[idx] = bw * x0m[idx];
      }
    }
  }

  std::vector<double> state(static_cast<std::size_t>(B * layout.dim() * T), 0.0);
  for (std::int64_t b = 0; b < B; ++b) {
    std::copy_n(xn.begin() + static_cast<std::ptrdiff_t>(b * la * T),
                la * T,
                state.begin() + static_cast<std::ptrdiff_t>(
                                    (b * layout.dim() + layout.action_row0()) * T));
  }
  BatchConditions cond = conditions_from_instances(batch, layout);
  ProjectionConfig proj{cfg.boundary_weight};

  Tensor x = Tensor::from({B, layout.dim(), T}, std::move(state));
  Tensor pred = unet.forward(project(x, layout, cond, proj), steps);
  Tensor pred_actions = slice(project(pred, layout, cond, proj), 1,
                              layout.action_row0(), la);
  Tensor loss = mse(apply_mask(pred_actions, mask_rows),
                    Tensor::from({B, la, T}, std::move(target)));
  const double loss_value = loss.item();
  if (!std::isfinite(loss_value)) {
    throw std::runtime_error("diffusion_train_step: non-finite loss at step " +
                             std::to_string(step));
  }
  backward(loss);
  if (cfg.max_grad_norm > 0.0) clip_grad_norm(unet.params(), cfg.max_grad_norm);
  adam_step(unet.params(), opt, lr_at(step, cfg));
  return loss_value;
}

// ---------------------------------------------------------------------------
// stage 1

struct ClassifierReport {
  double train_accuracy = 0.0;
  double eval_accuracy = 0.0;
  std::vector<std::pair<std::int64_t, double>> loss_curve;
};

inline double classifier_accuracy(const TaskClassifier& clf,
                                  std::span<const PlanInstance> instances) {
  if (instances.empty()) return 0.0;
  std::int64_t hits = 0;
  for (const auto& ins : instances) {
    if (clf.classify(ins.obs_start, ins.obs_goal).label == ins.task) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(instances.size());
}

inline ClassifierReport train_classifier(std::span<const PlanInstance> train,
                                         std::span<const PlanInstance> heldout,
                                         TaskClassifier& clf,
                                         const TrainConfig& cfg) {
  if (train.empty()) throw std::invalid_argument("train_classifier: empty training set");
  detail::check_train_provenance(train, "train_classifier");
  cfg.validate();
  AdamState opt = AdamState::init(clf.params());
  Rng batch_rng = Rng::stream(cfg.seed, detail::kStreamClfBatch);
  ClassifierReport report;
  const auto B = std::min<std::int64_t>(cfg.batch_size,
                                        static_cast<std::int64_t>(train.size()));
  for (std::int64_t step = 0; step < cfg.total_steps; ++step) {
    std::vector<std::vector<double>> o_s, o_g;
    std::vector<std::int64_t> labels;
    o_s.reserve(static_cast<std::size_t>(B));
    for (std::int64_t b = 0; b < B; ++b) {
      const auto& ins = train[static_cast<std::size_t>(
          batch_rng.below(static_cast<std::int64_t>(train.size())))];
      o_s.push_back(ins.obs_start);
      o_g.push_back(ins.obs_goal);
      labels.push_back(ins.task);
    }
    Tensor input = Tensor::from({B, clf.config().input_dim()},
                                clf.assemble_input(o_s, o_g));
    Tensor loss = cross_entropy(clf.forward(input), labels);
    const double lv = loss.item();
    if (!std::isfinite(lv)) {
      throw std::runtime_error("train_classifier: diverged at step " +
                               std::to_string(step) + " (loss not finite)");
    }
    backward(loss);
    if (cfg.max_grad_norm > 0.0) clip_grad_norm(clf.params(), cfg.max_grad_norm);
    adam_step(clf.params(), opt, lr_at(step, cfg));
    if (step % 50 == 0 || step + 1 == cfg.total_steps) {
      report.loss_curve.emplace_back(step, lv);
    }
  }
  report.train_accuracy = classifier_accuracy(clf, train);
  report.eval_accuracy = heldout.empty() ? report.train_accuracy
                                         : classifier_accuracy(clf, heldout);
  return report;
}

// ---------------------------------------------------------------------------
// stage 2 + orchestration

struct CurvePoint {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double eval_sr = -1.0;  // < 0 when not evaluated
};

struct TrainedPipeline {
  ClassifierConfig clf_config;
  UNetConfig unet_config;
  std::shared_ptr<TaskClassifier> classifier;
  std::shared_ptr<DenoiserUNet> unet;
  std::vector<ActionMask> task_masks;
  DiffusionSchedule schedule;
  ClassifierReport classifier_report;
  std::vector<CurvePoint> diffusion_curve;
};

inline double quick_sr_eval(const TrainedPipeline& pipe,
                            std::span<const PlanInstance> eval_set,
                            MaskKind kind, std::uint64_t seed,
                            std::int64_t jobs = 1) {
  PlannerContext ctx{pipe.unet.get(), pipe.classifier.get(), &pipe.schedule,
                     &pipe.task_masks, kind, ProjectionConfig{}};
  auto samples = sample_plans(ctx, eval_set, SamplerConfig{}, seed, 1, nullptr, jobs);
  std::vector<std::vector<std::int64_t>> pred, gt;
  pred.reserve(samples.size());
  for (const auto& s : samples) pred.push_back(s.actions);
  for (const auto& ins : eval_set) gt.push_back(ins.actions);
  return score_plans(pred, gt).sr;
}

// Trains both stages on the train split. Any eval-SR curve points use the
// held-out set with the trained classifier, matching the inference path.
inline TrainedPipeline run_training(const World& world,
                                    std::span<const PlanInstance> train,
                                    std::span<const PlanInstance> heldout,
                                    const ClassifierConfig& clf_cfg,
                                    const TrainConfig& clf_train,
                                    const UNetConfig& unet_cfg,
                                    const TrainConfig& diff_train) {
  if (train.empty()) throw std::invalid_argument("run_training: empty training set");
  diff_train.validate();

  TrainedPipeline pipe;
  pipe.clf_config = clf_cfg;
  pipe.unet_config = unet_cfg;

  Rng clf_init = Rng::stream(clf_train.seed, detail::kStreamClfInit);
  pipe.classifier = std::make_shared<TaskClassifier>(clf_cfg, clf_init);
  pipe.classifier_report =
      train_classifier(train, heldout, *pipe.classifier, clf_train);

  pipe.task_masks = build_task_masks(train, unet_cfg.layout.num_tasks,
                                     unet_cfg.layout.num_actions);
  pipe.schedule = schedule_from_config(diff_train);

  Rng unet_init = Rng::stream(diff_train.seed, detail::kStreamDiffInit);
  pipe.unet = std::make_shared<DenoiserUNet>(unet_cfg, unet_init);
  AdamState opt = AdamState::init(pipe.unet->params());
  Rng batch_rng = Rng::stream(diff_train.seed, detail::kStreamDiffBatch);
  Rng noise_rng = Rng::stream(diff_train.seed, detail::kStreamDiffNoise);

  const auto B = std::min<std::int64_t>(diff_train.batch_size,
                                        static_cast<std::int64_t>(train.size()));
  std::vector<PlanInstance> batch(static_cast<std::size_t>(B));
  for (std::int64_t step = 0; step < diff_train.total_steps; ++step) {
    for (std::int64_t b = 0; b < B; ++b) {
      batch[static_cast<std::size_t>(b)] = train[static_cast<std::size_t>(
          batch_rng.below(static_cast<std::int64_t>(train.size())))];
    }
    const double loss = diffusion_train_step(batch, *pipe.unet, pipe.schedule,
                                             pipe.task_masks, diff_train, opt,
                                             step, noise_rng);
    const bool record = step % 100 == 0 || step + 1 == diff_train.total_steps;
    const bool eval_now =
        diff_train.eval_every > 0 && !heldout.empty() &&
        ((step + 1) % diff_train.eval_every == 0 || step + 1 == diff_train.total_steps);
    if (record || eval_now) {
      CurvePoint pt;
      pt.step = step;
      pt.loss = loss;
      pt.lr = lr_at(step, diff_train);
      if (eval_now) {
        const auto count = std::min<std::size_t>(
            heldout.size(), static_cast<std::size_t>(diff_train.eval_instances));
        pt.eval_sr = quick_sr_eval(
            pipe, std::span<const PlanInstance>(heldout.data(), count),
            diff_train.mask_kind, diff_train.seed ^ 0x5eedull);
      }
      pipe.diffusion_curve.push_back(pt);
    }
  }
  return pipe;
}

inline void save_curve_csv(const std::filesystem::path& path,
                           const std::vector<CurvePoint>& curve) {
  std::string out = "step,loss,lr,eval_sr\n";
  char buf[128];
  for (const auto& p : curve) {
    if (p.eval_sr >= 0.0) {
      std::snprintf(buf, sizeof buf, "%lld,%.8g,%.8g,%.6g\n",
                    static_cast<long long>(p.step), p.loss, p.lr, p.eval_sr);
    } else {
      std::snprintf(buf, sizeof buf, "%lld,%.8g,%.8g,\n",
                    static_cast<long long>(p.step), p.loss, p.lr);
    }
    out += buf;
  }
  atomic_write(path, out);
}

// ---------------------------------------------------------------------------
// checkpoint helpers

inline void save_denoiser(const std::filesystem::path& path,
                          const DenoiserUNet& unet, const TrainConfig& cfg) {
  nlohmann::json config{{"unet", unet_config_to_json(unet.config())},
                        {"train", train_config_to_json(cfg)}};
  save_checkpoint(path, kDiffusionMagic, config, unet.params());
}

inline DenoiserUNet load_denoiser(const std::filesystem::path& path) {
  CheckpointData ck = load_checkpoint(path, kDiffusionMagic);
  UNetConfig cfg = unet_config_from_json(ck.header.at("config").at("unet"));
  Rng dummy(0);
  DenoiserUNet unet(cfg, dummy);
  restore_params(ck, unet.params());
  return unet;
}

inline TrainConfig train_config_from_denoiser(const std::filesystem::path& path) {
  CheckpointData ck = load_checkpoint(path, kDiffusionMagic);
  TrainConfig cfg;
  const auto& j = ck.header.at("config").at("train");
  cfg.diffusion_steps = j.at("diffusion_steps").get<std::int64_t>();
  cfg.beta_start = j.at("beta_start").get<double>();
  cfg.beta_end = j.at("beta_end").get<double>();
  cfg.boundary_weight = j.at("boundary_weight").get<double>();
  cfg.mask_kind = mask_kind_from_name(j.at("mask_kind").get<std::string>());
  return cfg;
}

inline void save_classifier(const std::filesystem::path& path,
                            const TaskClassifier& clf) {
  save_checkpoint(path, kClassifierMagic,
                  classifier_config_to_json(clf.config()), clf.params());
}

inline TaskClassifier load_classifier(const std::filesystem::path& path) {
  CheckpointData ck = load_checkpoint(path, kClassifierMagic);
  ClassifierConfig cfg = classifier_config_from_json(ck.header.at("config"));
  Rng dummy(0);
  TaskClassifier clf(cfg, dummy);
  restore_params(ck, clf.params());
  return clf;
}

}  // namespace maskplan
