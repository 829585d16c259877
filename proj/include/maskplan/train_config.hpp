#pragma once

// Training configuration shared by both stages: linear warmup, step decay at
// milestones, optional constant floor. The flat key=value file format is the
// on-disk config interface.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "maskplan/mask.hpp"

namespace maskplan {

struct TrainConfig {
  std::int64_t total_steps = 10000;
  std::int64_t batch_size = 256;
  std::int64_t warmup_steps = 500;
  double base_lr = 5e-4;
  std::vector<std::int64_t> milestones{};
  double decay_factor = 0.5;
  double lr_floor = 0.0;
  std::int64_t diffusion_steps = 50;  // N (diffusion stage only)
  double beta_start = 0.0;            // 0 = derive endpoints from N
  double beta_end = 0.0;
  double boundary_weight = 10.0;      // w
  MaskKind mask_kind = MaskKind::kHard;
  double max_grad_norm = 0.0;         // 0 = no clipping
  std::uint64_t seed = 1;
  std::int64_t eval_every = 0;        // 0 = no in-training SR curve
  std::int64_t eval_instances = 256;

  void validate() const {
    if (total_steps < 1 || batch_size < 1) {
      throw std::invalid_argument("TrainConfig: steps and batch must be >= 1");
    }
    if (warmup_steps > total_steps) {
      throw std::invalid_argument("TrainConfig: warmup exceeds total steps");
    }
    if (boundary_weight < 1.0) {
      throw std::invalid_argument("TrainConfig: boundary weight must be >= 1");
    }
  }
};

// Desk-scale defaults: small batch, short schedule.
inline TrainConfig desk_train_config() {
  TrainConfig c;
  c.total_steps = 10000;
  c.batch_size = 64;
  c.warmup_steps = 500;
  c.base_lr = 5e-4;
  c.milestones = {6000, 8000};
  c.diffusion_steps = 50;
  return c;
}

// Linear ramp to base over warmup, then multiply by the decay factor at each
// milestone passed, never below the configured floor.
inline double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  double lr;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    lr = cfg.base_lr * static_cast<double>(step) /
         static_cast<double>(cfg.warmup_steps);
  } else {
    lr = cfg.base_lr;
    for (auto m : cfg.milestones)
      if (step >= m) lr *= cfg.decay_factor;
  }
  return std::max(lr, cfg.lr_floor);
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return nlohmann::json{{"total_steps", c.total_steps},
                        {"batch_size", c.batch_size},
                        {"warmup_steps", c.warmup_steps},
                        {"base_lr", c.base_lr},
                        {"milestones", c.milestones},
                        {"decay_factor", c.decay_factor},
                        {"lr_floor", c.lr_floor},
                        {"diffusion_steps", c.diffusion_steps},
                        {"beta_start", c.beta_start},
                        {"beta_end", c.beta_end},
                        {"boundary_weight", c.boundary_weight},
                        {"mask_kind", mask_kind_name(c.mask_kind)},
                        {"max_grad_norm", c.max_grad_norm},
                        {"seed", c.seed},
                        {"eval_every", c.eval_every},
                        {"eval_instances", c.eval_instances}};
}

// Flat key=value config file; '#' starts a comment, milestones are
// comma-separated.
inline void apply_config_line(TrainConfig& c, const std::string& key,
                              const std::string& value) {
  if (key == "total_steps") c.total_steps = std::stoll(value);
  else if (key == "batch_size") c.batch_size = std::stoll(value);
  else if (key == "warmup_steps") c.warmup_steps = std::stoll(value);
  else if (key == "base_lr") c.base_lr = std::stod(value);
  else if (key == "milestones") {
    c.milestones.clear();
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) c.milestones.push_back(std::stoll(item));
  } else if (key == "decay_factor") c.decay_factor = std::stod(value);
  else if (key == "lr_floor") c.lr_floor = std::stod(value);
  else if (key == "diffusion_steps") c.diffusion_steps = std::stoll(value);
  else if (key == "beta_start") c.beta_start = std::stod(value);
  else if (key == "beta_end") c.beta_end = std::stod(value);
  else if (key == "boundary_weight") c.boundary_weight = std::stod(value);
  else if (key == "mask_kind") c.mask_kind = mask_kind_from_name(value);
  else if (key == "max_grad_norm") c.max_grad_norm = std::stod(value);
  else if (key == "seed") c.seed = std::stoull(value);
  else if (key == "eval_every") c.eval_every = std::stoll(value);
  else if (key == "eval_instances") c.eval_instances = std::stoll(value);
  else throw std::invalid_argument("unknown config key: " + key);
}

inline TrainConfig load_train_config(const std::filesystem::path& path,
                                     TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path.string());
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!key.empty()) apply_config_line(base, key, value);
  }
  return base;
}

inline void save_train_config(const std::filesystem::path& path,
                              const TrainConfig& c) {
  std::string out;
  out += "total_steps=" + std::to_string(c.total_steps) + "\n";
  out += "batch_size=" + std::to_string(c.batch_size) + "\n";
  out += "warmup_steps=" + std::to_string(c.warmup_steps) + "\n";
  out += "base_lr=" + std::to_string(c.base_lr) + "\n";
  std::string ms;
  for (auto m : c.milestones) ms += (ms.empty() ? "" : ",") + std::to_string(m);
  out += "milestones=" + ms + "\n";
  out += "decay_factor=" + std::to_string(c.decay_factor) + "\n";
  out += "lr_floor=" + std::to_string(c.lr_floor) + "\n";
  out += "diffusion_steps=" + std::to_string(c.diffusion_steps) + "\n";
  out += "beta_start=" + std::to_string(c.beta_start) + "\n";
  out += "beta_end=" + std::to_string(c.beta_end) + "\n";
  out += "boundary_weight=" + std::to_string(c.boundary_weight) + "\n";
  out += "mask_kind=" + std::string(mask_kind_name(c.mask_kind)) + "\n";
  out += "max_grad_norm=" + std::to_string(c.max_grad_norm) + "\n";
  out += "seed=" + std::to_string(c.seed) + "\n";
  out += "eval_every=" + std::to_string(c.eval_every) + "\n";
  out += "eval_instances=" + std::to_string(c.eval_instances) + "\n";
  atomic_write(path, out);
}

}  // namespace maskplan
