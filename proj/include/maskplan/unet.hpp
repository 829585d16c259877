#pragma once

// The x0-prediction network: a three-level 1D U-Net over the horizon axis.
// Downsampling convs (kernel 2, stride 1, padding 0) shorten the horizon by
// one per stage; mirrored transposed convs restore it, so the composed network
// preserves the horizon length. Diffusion-step conditioning enters every block
// through a sinusoidal embedding and per-block projections.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "maskplan/adam.hpp"
#include "maskplan/mask.hpp"
#include "maskplan/rng.hpp"
#include "maskplan/tensor.hpp"

namespace maskplan {

struct UNetConfig {
  StateLayout layout;
  std::vector<std::int64_t> channels = {32, 64, 128};
  std::int64_t kernel_size = 2;     // down/up sampling convs
  std::int64_t step_embed_dim = 32;
  std::int64_t diffusion_steps = 50;  // N

  void validate() const {
    if (channels.size() < 2) {
      throw std::invalid_argument("UNetConfig: need at least two levels");
    }
    if (kernel_size < 2) throw std::invalid_argument("UNetConfig: kernel_size >= 2");
    if (step_embed_dim < 2 || step_embed_dim % 2 != 0) {
      throw std::invalid_argument("UNetConfig: step_embed_dim must be even");
    }
    const auto stages = static_cast<std::int64_t>(channels.size()) - 1;
    if (layout.horizon - stages * (kernel_size - 1) < 1) {
      throw std::invalid_argument(
          "UNetConfig: horizon too short for the down path");
    }
  }
};

inline nlohmann::json unet_config_to_json(const UNetConfig& c) {
  return nlohmann::json{{"num_tasks", c.layout.num_tasks},
                        {"num_actions", c.layout.num_actions},
                        {"obs_dim", c.layout.obs_dim},
                        {"horizon", c.layout.horizon},
                        {"channels", c.channels},
                        {"kernel_size", c.kernel_size},
                        {"step_embed_dim", c.step_embed_dim},
                        {"diffusion_steps", c.diffusion_steps}};
}

inline UNetConfig unet_config_from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.layout.num_tasks = j.at("num_tasks").get<std::int64_t>();
  c.layout.num_actions = j.at("num_actions").get<std::int64_t>();
  c.layout.obs_dim = j.at("obs_dim").get<std::int64_t>();
  c.layout.horizon = j.at("horizon").get<std::int64_t>();
  c.channels = j.at("channels").get<std::vector<std::int64_t>>();
  c.kernel_size = j.at("kernel_size").get<std::int64_t>();
  c.step_embed_dim = j.at("step_embed_dim").get<std::int64_t>();
  c.diffusion_steps = j.at("diffusion_steps").get<std::int64_t>();
  return c;
}

// Sinusoidal embedding of diffusion steps; injective over 1..N.
inline Tensor step_embedding_table(std::span<const std::int64_t> steps,
                                   std::int64_t dim) {
  const auto B = static_cast<std::int64_t>(steps.size());
  std::vector<double> v(static_cast<std::size_t>(B * dim));
  const auto half = dim / 2;
  for (std::int64_t b = 0; b < B; ++b) {
    const double n = static_cast<double>(steps[static_cast<std::size_t>(b)]);
    for (std::int64_t i = 0; i < half; ++i) {
      const double freq =
          std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
      v[static_cast<std::size_t>(b * dim + 2 * i)] = std::sin(n * freq);
      v[static_cast<std::size_t>(b * dim + 2 * i + 1)] = std::cos(n * freq);
    }
  }
  return Tensor::from({B, dim}, std::move(v));
}

class DenoiserUNet {
 public:
  DenoiserUNet(UNetConfig cfg, Rng& init) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto D = cfg_.layout.dim();
    const auto E = cfg_.step_embed_dim;
    const auto& ch = cfg_.channels;
    const auto levels = static_cast<std::int64_t>(ch.size());

    temb_w1_ = add_param("temb.fc1.weight", {E, E}, init);
    temb_b1_ = add_bias("temb.fc1.bias", {E});
    temb_w2_ = add_param("temb.fc2.weight", {E, E}, init);
    temb_b2_ = add_bias("temb.fc2.bias", {E});

    stem_w_ = add_param("stem.weight", {ch[0], D, 1}, init);
    stem_b_ = add_bias("stem.bias", {ch[0]});

    for (std::int64_t i = 0; i < levels; ++i) {
      const std::string tag = "down" + std::to_string(i);
      down_block_w_.push_back(add_param(tag + ".block.weight", {ch[i], ch[i], 1}, init));
      down_block_b_.push_back(add_bias(tag + ".block.bias", {ch[i]}));
      down_step_w_.push_back(add_param(tag + ".step.weight", {ch[i], E}, init));
      down_step_b_.push_back(add_bias(tag + ".step.bias", {ch[i]}));
      if (i + 1 < levels) {
        down_w_.push_back(add_param(tag + ".down.weight",
                                    {ch[i + 1], ch[i], cfg_.kernel_size}, init));
        down_b_.push_back(add_bias(tag + ".down.bias", {ch[i + 1]}));
      }
    }
    for (std::int64_t i = levels - 2; i >= 0; --i) {
      const std::string tag = "up" + std::to_string(i);
      up_w_.push_back(add_param(tag + ".up.weight",
                                {ch[i + 1], ch[i], cfg_.kernel_size}, init));
      up_b_.push_back(add_bias(tag + ".up.bias", {ch[i]}));
      up_block_w_.push_back(add_param(tag + ".block.weight", {ch[i], 2 * ch[i], 1}, init));
      up_block_b_.push_back(add_bias(tag + ".block.bias", {ch[i]}));
      up_step_w_.push_back(add_param(tag + ".step.weight", {ch[i], E}, init));
      up_step_b_.push_back(add_bias(tag + ".step.bias", {ch[i]}));
    }
    head_w_ = add_param("head.weight", {D, ch[0], 1}, init);
    head_b_ = add_bias("head.bias", {D});
  }

  const UNetConfig& config() const { return cfg_; }
  std::vector<NamedParam>& params() { return params_; }
  const std::vector<NamedParam>& params() const { return params_; }

  // x is the projected state (B, L_c+L_a+L_o, T); steps holds one diffusion
  // step index per sample.
  Tensor forward(const Tensor& x, std::span<const std::int64_t> steps) const {
    if (x.rank() != 3 || x.dim(1) != cfg_.layout.dim() ||
        x.dim(2) != cfg_.layout.horizon ||
        x.dim(0) != static_cast<std::int64_t>(steps.size())) {
      throw std::invalid_argument("DenoiserUNet: input shape mismatch, got " +
                                  shape_str(x.shape()));
    }
    const auto levels = static_cast<std::int64_t>(cfg_.channels.size());

    Tensor emb = step_embedding_table(steps, cfg_.step_embed_dim);
    emb = linear(gelu(linear(emb, temb_w1_, temb_b1_)), temb_w2_, temb_b2_);

    Tensor h = conv1d(x, stem_w_, stem_b_);
    std::vector<Tensor> skips;
    for (std::int64_t i = 0; i < levels; ++i) {
      h = block(h, down_block_w_[static_cast<std::size_t>(i)],
                down_block_b_[static_cast<std::size_t>(i)],
                down_step_w_[static_cast<std::size_t>(i)],
                down_step_b_[static_cast<std::size_t>(i)], emb);
      if (i + 1 < levels) {
        skips.push_back(h);
        h = conv1d(h, down_w_[static_cast<std::size_t>(i)],
                   down_b_[static_cast<std::size_t>(i)]);
      }
    }
    for (std::int64_t j = 0; j < levels - 1; ++j) {
      h = conv1d_transpose(h, up_w_[static_cast<std::size_t>(j)],
                           up_b_[static_cast<std::size_t>(j)]);
      h = concat({h, skips[static_cast<std::size_t>(levels - 2 - j)]}, 1);
      h = block(h, up_block_w_[static_cast<std::size_t>(j)],
                up_block_b_[static_cast<std::size_t>(j)],
                up_step_w_[static_cast<std::size_t>(j)],
                up_step_b_[static_cast<std::size_t>(j)], emb);
    }
    return conv1d(h, head_w_, head_b_);
  }

 private:
  Tensor block(const Tensor& h, const Tensor& w, const Tensor& b,
               const Tensor& sw, const Tensor& sb, const Tensor& emb) const {
    Tensor y = conv1d(normalize(h, 1), w, b);
    y = add_channel_bias(y, linear(emb, sw, sb));
    return gelu(y);
  }

  Tensor add_param(const std::string& name, Shape shape, Rng& init) {
    std::int64_t fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    Tensor t = Tensor::randn(shape, init, 1.0 / std::sqrt(static_cast<double>(fan_in)), true);
    t.set_name(name);
    params_.push_back({name, t});
    return t;
  }

  Tensor add_bias(const std::string& name, Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    t.set_name(name);
    params_.push_back({name, t});
    return t;
  }

  UNetConfig cfg_;
  std::vector<NamedParam> params_;
  Tensor temb_w1_, temb_b1_, temb_w2_, temb_b2_;
  Tensor stem_w_, stem_b_;
  std::vector<Tensor> down_block_w_, down_block_b_, down_step_w_, down_step_b_;
  std::vector<Tensor> down_w_, down_b_;
  std::vector<Tensor> up_w_, up_b_, up_block_w_, up_block_b_, up_step_w_, up_step_b_;
  Tensor head_w_, head_b_;
};

}  // namespace maskplan
