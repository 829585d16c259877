#pragma once

// Stage-1 model p(c | o_s, o_g). Two variants: a plain MLP and a small
// transformer that reshapes the concatenated observation pair into tokens
// with a learned classification token.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "maskplan/adam.hpp"
#include "maskplan/rng.hpp"
#include "maskplan/tensor.hpp"

namespace maskplan {

enum class ClassifierVariant { kMlp, kTransformer };

struct ClassifierConfig {
  ClassifierVariant variant = ClassifierVariant::kMlp;
  std::int64_t num_tasks = 0;
  std::int64_t obs_dim = 0;   // L_o per observation
  std::int64_t vis_dim = 0;   // leading visual channels of each observation
  std::int64_t text_dim = 0;  // trailing text channels
  bool use_text = true;       // zero the text channels when false
  std::int64_t hidden = 128;  // mlp
  std::int64_t tokens = 8;    // transformer reshaping
  std::int64_t token_dim = 32;

  std::int64_t input_dim() const { return 2 * obs_dim; }
  void validate() const {
    if (num_tasks <= 0 || obs_dim <= 0) {
      throw std::invalid_argument("ClassifierConfig: bad dimensions");
    }
    if (vis_dim + text_dim != obs_dim) {
      throw std::invalid_argument("ClassifierConfig: vis_dim + text_dim != obs_dim");
    }
    if (variant == ClassifierVariant::kTransformer &&
        (tokens < 1 || token_dim < 1)) {
      throw std::invalid_argument("ClassifierConfig: bad token reshaping");
    }
  }
};

inline nlohmann::json classifier_config_to_json(const ClassifierConfig& c) {
  return nlohmann::json{
      {"variant", c.variant == ClassifierVariant::kMlp ? "mlp" : "transformer"},
      {"num_tasks", c.num_tasks},
      {"obs_dim", c.obs_dim},
      {"vis_dim", c.vis_dim},
      {"text_dim", c.text_dim},
      {"use_text", c.use_text},
      {"hidden", c.hidden},
      {"tokens", c.tokens},
      {"token_dim", c.token_dim}};
}

inline ClassifierConfig classifier_config_from_json(const nlohmann::json& j) {
  ClassifierConfig c;
  c.variant = j.at("variant").get<std::string>() == "mlp"
                  ? ClassifierVariant::kMlp
                  : ClassifierVariant::kTransformer;
  c.num_tasks = j.at("num_tasks").get<std::int64_t>();
  c.obs_dim = j.at("obs_dim").get<std::int64_t>();
  c.vis_dim = j.at("vis_dim").get<std::int64_t>();
  c.text_dim = j.at("text_dim").get<std::int64_t>();
  c.use_text = j.at("use_text").get<bool>();
  c.hidden = j.at("hidden").get<std::int64_t>();
  c.tokens = j.at("tokens").get<std::int64_t>();
  c.token_dim = j.at("token_dim").get<std::int64_t>();
  return c;
}

class TaskClassifier {
 public:
  TaskClassifier(ClassifierConfig cfg, Rng& init) : cfg_(cfg) {
    cfg_.validate();
    const auto in = cfg_.input_dim();
    if (cfg_.variant == ClassifierVariant::kMlp) {
      fc1_w_ = add_param("fc1.weight", {cfg_.hidden, in}, init);
      fc1_b_ = add_bias("fc1.bias", {cfg_.hidden});
      fc2_w_ = add_param("fc2.weight", {cfg_.hidden, cfg_.hidden}, init);
      fc2_b_ = add_bias("fc2.bias", {cfg_.hidden});
      head_w_ = add_param("head.weight", {cfg_.num_tasks, cfg_.hidden}, init);
      head_b_ = add_bias("head.bias", {cfg_.num_tasks});
    } else {
      token_width_ = (in + cfg_.tokens - 1) / cfg_.tokens;
      const auto d = cfg_.token_dim;
      tok_w_ = add_param("tok.weight", {d, token_width_}, init);
      tok_b_ = add_bias("tok.bias", {d});
      cls_ = add_param("cls", {1, d}, init);
      pos_ = add_param("pos", {cfg_.tokens + 1, d}, init);
      wq_ = add_param("attn.q.weight", {d, d}, init);
      bq_ = add_bias("attn.q.bias", {d});
      wk_ = add_param("attn.k.weight", {d, d}, init);
      bk_ = add_bias("attn.k.bias", {d});
      wv_ = add_param("attn.v.weight", {d, d}, init);
      bv_ = add_bias("attn.v.bias", {d});
      wo_ = add_param("attn.out.weight", {d, d}, init);
      bo_ = add_bias("attn.out.bias", {d});
      ffn1_w_ = add_param("ffn.fc1.weight", {2 * d, d}, init);
      ffn1_b_ = add_bias("ffn.fc1.bias", {2 * d});
      ffn2_w_ = add_param("ffn.fc2.weight", {d, 2 * d}, init);
      ffn2_b_ = add_bias("ffn.fc2.bias", {d});
      head_w_ = add_param("head.weight", {cfg_.num_tasks, d}, init);
      head_b_ = add_bias("head.bias", {cfg_.num_tasks});
    }
  }

  const ClassifierConfig& config() const { return cfg_; }
  std::vector<NamedParam>& params() { return params_; }
  const std::vector<NamedParam>& params() const { return params_; }

  // Flattens (o_s, o_g) pairs into (B, 2 L_o), zeroing text channels when
  // configured, and returns raw data for the graph input.
  std::vector<double> assemble_input(
      std::span<const std::vector<double>> obs_start,
      std::span<const std::vector<double>> obs_goal) const {
    const auto B = obs_start.size();
    const auto lo = static_cast<std::size_t>(cfg_.obs_dim);
    std::vector<double> v(B * 2 * lo);
    for (std::size_t b = 0; b < B; ++b) {
      if (obs_start[b].size() != lo || obs_goal[b].size() != lo) {
        throw std::invalid_argument("TaskClassifier: observation dim mismatch");
      }
      std::copy(obs_start[b].begin(), obs_start[b].end(), v.begin() + static_cast<std::ptrdiff_t>(b * 2 * lo));
      std::copy(obs_goal[b].begin(), obs_goal[b].end(),
                v.begin() + static_cast<std::ptrdiff_t>(b * 2 * lo + lo));
    }
    if (!cfg_.use_text) {
      const auto vis = static_cast<std::size_t>(cfg_.vis_dim);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t half = 0; half < 2; ++half)
          for (std::size_t i = vis; i < lo; ++i)
            v[b * 2 * lo + half * lo + i] = 0.0;
    }
    return v;
  }

  // logits (B, num_tasks)
  Tensor forward(const Tensor& input) const {
    if (input.rank() != 2 || input.dim(1) != cfg_.input_dim()) {
      throw std::invalid_argument("TaskClassifier: input shape mismatch, got " +
                                  shape_str(input.shape()));
    }
    if (cfg_.variant == ClassifierVariant::kMlp) {
      Tensor h = gelu(linear(input, fc1_w_, fc1_b_));
      h = gelu(linear(h, fc2_w_, fc2_b_));
      return linear(h, head_w_, head_b_);
    }
    const auto B = input.dim(0);
    const auto K = cfg_.tokens;
    const auto d = cfg_.token_dim;

    // zero-pad to K tokens of equal width, project each token
    std::vector<double> padded(static_cast<std::size_t>(B * K * token_width_), 0.0);
    const double* src = input.data().data();
    for (std::int64_t b = 0; b < B; ++b)
      std::copy_n(src + b * cfg_.input_dim(), cfg_.input_dim(),
                  padded.begin() + static_cast<std::ptrdiff_t>(b * K * token_width_));
    Tensor tokens = Tensor::from({B, K, token_width_}, std::move(padded));
    tokens = linear(tokens, tok_w_, tok_b_);  // (B, K, d)

    std::vector<std::int64_t> cls_ids(static_cast<std::size_t>(B), 0);
    Tensor cls = reshape(embedding(cls_, cls_ids), {B, 1, d});
    Tensor x = concat({cls, tokens}, 1);  // (B, K+1, d)

    std::vector<std::int64_t> pos_ids;
    pos_ids.reserve(static_cast<std::size_t>(B * (K + 1)));
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t t = 0; t <= K; ++t) pos_ids.push_back(t);
    x = add(x, reshape(embedding(pos_, pos_ids), {B, K + 1, d}));

    // one pre-norm attention block
    Tensor ln = normalize(x, 2);
    Tensor q = linear(ln, wq_, bq_);
    Tensor k = linear(ln, wk_, bk_);
    Tensor v = linear(ln, wv_, bv_);
    Tensor scores = scale(bmm(q, transpose12(k)), 1.0 / std::sqrt(static_cast<double>(d)));
    Tensor ctx = bmm(softmax(scores), v);
    x = add(x, linear(ctx, wo_, bo_));
    Tensor y = normalize(x, 2);
    y = linear(gelu(linear(y, ffn1_w_, ffn1_b_)), ffn2_w_, ffn2_b_);
    x = add(x, y);

    Tensor cls_out = reshape(slice(x, 1, 0, 1), {B, d});
    return linear(cls_out, head_w_, head_b_);
  }

  struct Prediction {
    std::vector<double> posterior;
    std::int64_t label = 0;
  };

  // Single-pair posterior + argmax label; ties break to the lowest task id.
  Prediction classify(std::span<const double> obs_start,
                      std::span<const double> obs_goal) const {
    for (double x : obs_start)
      if (!std::isfinite(x)) throw std::invalid_argument("classify: non-finite input");
    for (double x : obs_goal)
      if (!std::isfinite(x)) throw std::invalid_argument("classify: non-finite input");
    std::vector<std::vector<double>> s{
        std::vector<double>(obs_start.begin(), obs_start.end())};
    std::vector<std::vector<double>> g{
        std::vector<double>(obs_goal.begin(), obs_goal.end())};
    Tensor input = Tensor::from({1, cfg_.input_dim()},
                                assemble_input(s, g));
    Tensor logits = forward(input);
    Prediction p;
    p.posterior.resize(static_cast<std::size_t>(cfg_.num_tasks));
    const double* l = logits.data().data();
    double mx = l[0];
    for (std::int64_t c = 1; c < cfg_.num_tasks; ++c) mx = std::max(mx, l[c]);
    double z = 0.0;
    for (std::int64_t c = 0; c < cfg_.num_tasks; ++c) {
      p.posterior[static_cast<std::size_t>(c)] = std::exp(l[c] - mx);
      z += p.posterior[static_cast<std::size_t>(c)];
    }
    for (auto& q : p.posterior) q /= z;
    p.label = 0;
    for (std::int64_t c = 1; c < cfg_.num_tasks; ++c) {
      if (p.posterior[static_cast<std::size_t>(c)] >
          p.posterior[static_cast<std::size_t>(p.label)]) {
        p.label = c;  // strictly greater: ties keep the lowest id
      }
    }
    return p;
  }

 private:
  Tensor add_param(const std::string& name, Shape shape, Rng& init) {
    std::int64_t fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    if (shape.size() == 1) fan_in = shape[0];
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

  ClassifierConfig cfg_;
  std::int64_t token_width_ = 0;
  std::vector<NamedParam> params_;
  Tensor fc1_w_, fc1_b_, fc2_w_, fc2_b_;
  Tensor tok_w_, tok_b_, cls_, pos_;
  Tensor wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
  Tensor ffn1_w_, ffn1_b_, ffn2_w_, ffn2_b_;
  Tensor head_w_, head_b_;
};

}  // namespace maskplan
