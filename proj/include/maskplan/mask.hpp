#pragma once

// Task-to-action masks and the condition projection operator. The diffusion
// state is a (L_c + L_a + L_o) x T matrix per sample: task rows, action-logit
// rows, observation rows. Projection overwrites the condition rows with their
// known values and weights the boundary action columns.

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "maskplan/artifact.hpp"
#include "maskplan/tensor.hpp"
#include "maskplan/world.hpp"

namespace maskplan {

enum class MaskKind { kHard, kSoft, kNone };

inline const char* mask_kind_name(MaskKind k) {
  switch (k) {
    case MaskKind::kHard: return "hard";
    case MaskKind::kSoft: return "soft";
    case MaskKind::kNone: return "none";
  }
  return "?";
}

inline MaskKind mask_kind_from_name(const std::string& s) {
  if (s == "hard") return MaskKind::kHard;
  if (s == "soft") return MaskKind::kSoft;
  if (s == "none") return MaskKind::kNone;
  throw std::invalid_argument("unknown mask kind: " + s);
}

struct ActionMask {
  std::vector<double> weights;  // length L_a, values in [0,1]
  MaskKind kind = MaskKind::kNone;
};

inline ActionMask ones_mask(std::int64_t num_actions) {
  return {std::vector<double>(static_cast<std::size_t>(num_actions), 1.0),
          MaskKind::kNone};
}

struct StateLayout {
  std::int64_t num_tasks = 0;    // L_c
  std::int64_t num_actions = 0;  // L_a
  std::int64_t obs_dim = 0;      // L_o
  std::int64_t horizon = 0;      // T

  std::int64_t dim() const { return num_tasks + num_actions + obs_dim; }
  std::int64_t task_row0() const { return 0; }
  std::int64_t action_row0() const { return num_tasks; }
  std::int64_t obs_row0() const { return num_tasks + num_actions; }
};

struct ProjectionConfig {
  double boundary_weight = 10.0;  // w >= 1, applied to action columns 1 and T
};

// Binary masks from training data: bit a of task k is set iff action a
// appears in some training plan of task k.
inline std::vector<ActionMask> build_task_masks(
    std::span<const PlanInstance> train, std::int64_t num_tasks,
    std::int64_t num_actions) {
  if (train.empty()) {
    throw std::invalid_argument("build_task_masks: empty training set");
  }
  std::vector<ActionMask> masks(
      static_cast<std::size_t>(num_tasks),
      ActionMask{std::vector<double>(static_cast<std::size_t>(num_actions), 0.0),
                 MaskKind::kHard});
  for (const auto& ins : train) {
    if (ins.split == Split::kTest) {
      throw std::invalid_argument(
          "build_task_masks: refusing to read a test-split instance");
    }
    if (ins.task < 0 || ins.task >= num_tasks) {
      throw std::invalid_argument("build_task_masks: task id out of range");
    }
    for (auto a : ins.actions) {
      if (a < 0 || a >= num_actions) {
        throw std::invalid_argument("build_task_masks: action id out of range");
      }
      masks[static_cast<std::size_t>(ins.task)]
          .weights[static_cast<std::size_t>(a)] = 1.0;
    }
  }
  for (std::int64_t k = 0; k < num_tasks; ++k) {
    const auto& w = masks[static_cast<std::size_t>(k)].weights;
    if (std::all_of(w.begin(), w.end(), [](double v) { return v == 0.0; })) {
      throw std::runtime_error("build_task_masks: task " + std::to_string(k) +
                               " has an empty action set");
    }
  }
  return masks;
}

// Soft retention weights from a task posterior: each action keeps the total
// probability of the tasks that own it, capped at 1.
inline ActionMask soft_mask(std::span<const double> posterior,
                            const std::vector<ActionMask>& task_masks) {
  double total = 0.0;
  for (double p : posterior) total += p;
  if (std::abs(total - 1.0) > 1e-6) {
    throw std::invalid_argument("soft_mask: posterior must sum to 1");
  }
  if (posterior.size() != task_masks.size()) {
    throw std::invalid_argument("soft_mask: posterior/mask count mismatch");
  }
  const auto num_actions = task_masks.front().weights.size();
  ActionMask out{std::vector<double>(num_actions, 0.0), MaskKind::kSoft};
  for (std::size_t k = 0; k < task_masks.size(); ++k) {
    for (std::size_t a = 0; a < num_actions; ++a) {
      if (task_masks[k].weights[a] > 0.0) out.weights[a] += posterior[k];
    }
  }
  for (auto& w : out.weights) w = std::min(1.0, w);
  return out;
}

// ---------------------------------------------------------------------------
// tensor-side helpers

// (B, R) -> constant (B, R, T) by repeating each row value across time.
inline Tensor tile_rows_over_time(std::span<const double> rows,
                                  std::int64_t batch, std::int64_t r,
                                  std::int64_t horizon) {
  std::vector<double> v(static_cast<std::size_t>(batch * r * horizon));
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t i = 0; i < r; ++i) {
      const double x = rows[static_cast<std::size_t>(b * r + i)];
      double* dst = v.data() + (b * r + i) * horizon;
      for (std::int64_t t = 0; t < horizon; ++t) dst[t] = x;
    }
  return Tensor::from({batch, r, horizon}, std::move(v));
}

// Row-wise multiply of action rows (B, L_a, T) by per-sample mask weights
// (B, L_a). Hard-masked rows come out exactly zero.
inline Tensor apply_mask(const Tensor& action_rows,
                         std::span<const double> mask_rows) {
  const auto B = action_rows.dim(0), R = action_rows.dim(1),
             T = action_rows.dim(2);
  if (static_cast<std::int64_t>(mask_rows.size()) != B * R) {
    throw std::invalid_argument("apply_mask: mask size mismatch");
  }
  return mul(action_rows, tile_rows_over_time(mask_rows, B, R, T));
}

// Same mask for every sample in the batch.
inline Tensor apply_mask(const Tensor& action_rows, const ActionMask& mask) {
  const auto B = action_rows.dim(0), R = action_rows.dim(1);
  if (static_cast<std::int64_t>(mask.weights.size()) != R) {
    throw std::invalid_argument("apply_mask: mask length mismatch");
  }
  std::vector<double> rows(static_cast<std::size_t>(B * R));
  for (std::int64_t b = 0; b < B; ++b)
    std::copy(mask.weights.begin(), mask.weights.end(),
              rows.begin() + static_cast<std::ptrdiff_t>(b * R));
  return apply_mask(action_rows, rows);
}

// Multiplies action columns 1 and T by w, leaving the interior untouched.
inline Tensor scale_boundary_columns(const Tensor& action_rows, double w) {
  if (w == 1.0) return action_rows;
  const auto T = action_rows.dim(2);
  std::vector<Tensor> cols;
  cols.push_back(scale(slice(action_rows, 2, 0, 1), w));
  if (T > 2) cols.push_back(slice(action_rows, 2, 1, T - 2));
  cols.push_back(scale(slice(action_rows, 2, T - 1, 1), w));
  return concat(cols, 2);
}

// Per-sample conditioning values, all plain data (never differentiated).
struct BatchConditions {
  std::vector<double> task_onehot;  // (B, L_c)
  std::vector<double> obs_start;    // (B, L_o)
  std::vector<double> obs_goal;     // (B, L_o)
  std::int64_t batch = 0;
};

inline BatchConditions conditions_from_instances(
    std::span<const PlanInstance> batch, const StateLayout& layout,
    std::span<const std::int64_t> task_override = {}) {
  BatchConditions c;
  c.batch = static_cast<std::int64_t>(batch.size());
  c.task_onehot.assign(static_cast<std::size_t>(c.batch * layout.num_tasks), 0.0);
  c.obs_start.resize(static_cast<std::size_t>(c.batch * layout.obs_dim));
  c.obs_goal.resize(static_cast<std::size_t>(c.batch * layout.obs_dim));
  for (std::int64_t b = 0; b < c.batch; ++b) {
    const auto& ins = batch[static_cast<std::size_t>(b)];
    const std::int64_t task =
        task_override.empty() ? ins.task
                              : task_override[static_cast<std::size_t>(b)];
    c.task_onehot[static_cast<std::size_t>(b * layout.num_tasks + task)] = 1.0;
    std::copy(ins.obs_start.begin(), ins.obs_start.end(),
              c.obs_start.begin() + static_cast<std::ptrdiff_t>(b * layout.obs_dim));
    std::copy(ins.obs_goal.begin(), ins.obs_goal.end(),
              c.obs_goal.begin() + static_cast<std::ptrdiff_t>(b * layout.obs_dim));
  }
  return c;
}

// The projection operator: task rows become the one-hot condition in every
// column, observation rows carry o_s in column 1 and o_g in column T with
// zeros between, and action columns 1 and T are scaled by w. Gradients flow
// only through the action rows.
inline Tensor project(const Tensor& x, const StateLayout& layout,
                      const BatchConditions& cond,
                      const ProjectionConfig& cfg) {
  if (x.rank() != 3 || x.dim(1) != layout.dim() || x.dim(2) != layout.horizon ||
      x.dim(0) != cond.batch) {
    throw std::invalid_argument("project: state shape mismatch");
  }
  if (cfg.boundary_weight < 1.0) {
    throw std::invalid_argument("project: boundary weight must be >= 1");
  }
  const auto B = x.dim(0), T = layout.horizon;
  const auto lc = layout.num_tasks, la = layout.num_actions, lo = layout.obs_dim;

  Tensor task_rows = tile_rows_over_time(cond.task_onehot, B, lc, T);

  std::vector<double> obs(static_cast<std::size_t>(B * lo * T), 0.0);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < lo; ++i) {
      obs[static_cast<std::size_t>((b * lo + i) * T)] =
          cond.obs_start[static_cast<std::size_t>(b * lo + i)];
      obs[static_cast<std::size_t>((b * lo + i) * T + T - 1)] =
          cond.obs_goal[static_cast<std::size_t>(b * lo + i)];
    }
  Tensor obs_rows = Tensor::from({B, lo, T}, std::move(obs));

  Tensor action_rows =
      scale_boundary_columns(slice(x, 1, lc, la), cfg.boundary_weight);
  return concat({task_rows, action_rows, obs_rows}, 1);
}

// ---------------------------------------------------------------------------
// mask table file: task id -> sorted list of active action ids

inline nlohmann::json mask_table_to_json(const std::vector<ActionMask>& masks) {
  nlohmann::json table = nlohmann::json::object();
  for (std::size_t k = 0; k < masks.size(); ++k) {
    std::vector<std::int64_t> active;
    for (std::size_t a = 0; a < masks[k].weights.size(); ++a)
      if (masks[k].weights[a] > 0.0) active.push_back(static_cast<std::int64_t>(a));
    table[std::to_string(k)] = active;
  }
  return table;
}

inline void save_mask_table(const std::filesystem::path& path,
                            const std::vector<ActionMask>& masks,
                            std::int64_t num_actions) {
  nlohmann::json j{{"num_tasks", masks.size()},
                   {"num_actions", num_actions},
                   {"table", mask_table_to_json(masks)}};
  stamp_meta(j, j["table"]);
  atomic_write(path, j.dump(2) + "\n");
}

inline std::vector<ActionMask> load_mask_table(
    const std::filesystem::path& path) {
  nlohmann::json j = load_json(path);
  const auto num_tasks = j.at("num_tasks").get<std::int64_t>();
  const auto num_actions = j.at("num_actions").get<std::int64_t>();
  std::vector<ActionMask> masks(
      static_cast<std::size_t>(num_tasks),
      ActionMask{std::vector<double>(static_cast<std::size_t>(num_actions), 0.0),
                 MaskKind::kHard});
  for (const auto& [key, val] : j.at("table").items()) {
    const auto k = static_cast<std::size_t>(std::stoll(key));
    for (auto a : val.get<std::vector<std::int64_t>>())
      masks[k].weights[static_cast<std::size_t>(a)] = 1.0;
  }
  return masks;
}

}  // namespace maskplan
