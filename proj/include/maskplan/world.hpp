#pragma once

// Synthetic procedure-planning worlds: tasks owning action subsets, several
// admissible plan orderings per task, and noisy start/goal observations built
// from deterministic (action, task) embeddings plus a caption-style text
// channel. Stands in for real instructional-video features.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "maskplan/artifact.hpp"
#include "maskplan/rng.hpp"

namespace maskplan {

enum class PlanStyle { kPermutation, kInteriorVariants };
enum class Protocol { kSlidingWindow, kOnePerVideo };
enum class Split { kNone, kTrain, kTest };

struct WorldSpec {
  std::int64_t num_tasks = 10;
  std::int64_t actions_per_task = 6;
  bool share_actions = false;  // all tasks draw from one common pool
  std::int64_t horizon = 3;    // plan window length T
  std::int64_t video_len = 6;  // length of each synthetic long sequence
  std::int64_t plans_per_task = 3;
  PlanStyle plan_style = PlanStyle::kPermutation;
  std::int64_t vis_dim = 64;
  std::int64_t text_dim = 32;
  double obs_noise = 0.1;      // per-instance observation noise
  double caption_noise = 0.05; // baked into the text embedding per (a, c)
  double task_blend = 0.5;     // task component weight inside embeddings
  std::uint64_t seed = 1;

  std::int64_t obs_dim() const { return vis_dim + text_dim; }
};

struct PlanVariant {
  std::vector<std::int64_t> actions;
  double weight = 1.0;
};

struct TaskDef {
  std::vector<std::int64_t> actions;  // sorted
  std::vector<PlanVariant> plans;
};

struct World {
  WorldSpec spec;
  std::int64_t num_actions = 0;  // L_a
  std::vector<TaskDef> tasks;
};

struct GroupKey {
  std::int64_t task = 0, first = 0, last = 0;
  auto operator<=>(const GroupKey&) const = default;
};

struct PlanInstance {
  std::vector<double> obs_start;       // length L_o
  std::vector<double> obs_goal;        // length L_o
  std::vector<std::int64_t> actions;   // length T
  std::int64_t task = 0;
  std::int64_t video_id = 0;
  std::int64_t window_index = 0;
  Split split = Split::kNone;

  GroupKey group_key() const { return {task, actions.front(), actions.back()}; }
};

struct TextEmbedding {
  std::vector<double> vector;
  std::string verb;
  std::string noun;
};

namespace detail {

inline constexpr std::array<const char*, 16> kVerbs = {
    "pour",  "open",  "close", "cut",   "whisk", "fold",  "attach", "spread",
    "place", "screw", "wipe",  "press", "fill",  "shake", "tighten", "peel"};
inline constexpr std::array<const char*, 24> kNouns = {
    "water",  "milk",   "lid",    "jar",    "board",  "flour",  "panel", "bolt",
    "tire",   "cloth",  "kettle", "wheel",  "frame",  "sugar",  "paint", "wire",
    "filter", "handle", "ribbon", "bottle", "hinge",  "dough",  "strap", "valve"};

// stream ids for the world's derived RNG streams
enum StreamId : std::uint64_t {
  kStreamTasks = 1,
  kStreamPlans = 2,
  kStreamVideo = 3,
  kStreamObsNoise = 4,
  kStreamSplit = 5,
  kStreamVisBase = 6,
  kStreamVisTask = 7,
  kStreamTextBase = 8,
  kStreamTextTask = 9,
  kStreamTextNoise = 10,
  kStreamKeywords = 11,
};

inline std::vector<double> unit_gaussian_vec(std::uint64_t seed,
                                             std::uint64_t kind,
                                             std::uint64_t key,
                                             std::int64_t dim) {
  Rng rng = Rng::stream(seed, kind, key);
  std::vector<double> v(static_cast<std::size_t>(dim));
  for (auto& x : v) x = rng.gaussian();
  return v;
}

}  // namespace detail

// Caption-style text embedding of one action in the context of a task. The
// action keyword component is shared across tasks, the task component is
// smaller, so same-action vectors across tasks stay closer than same-task
// vectors across actions.
inline TextEmbedding caption_embed(std::int64_t action, std::int64_t task,
                                   const WorldSpec& spec) {
  Rng kw = Rng::stream(spec.seed, detail::kStreamKeywords,
                       static_cast<std::uint64_t>(action));
  TextEmbedding e;
  e.verb = detail::kVerbs[static_cast<std::size_t>(
      kw.below(static_cast<std::int64_t>(detail::kVerbs.size())))];
  e.noun = detail::kNouns[static_cast<std::size_t>(
      kw.below(static_cast<std::int64_t>(detail::kNouns.size())))];
  const std::uint64_t kw_key = fnv1a(e.verb + std::string(" ") + e.noun);

  auto base = detail::unit_gaussian_vec(spec.seed, detail::kStreamTextBase,
                                        kw_key, spec.text_dim);
  auto task_vec = detail::unit_gaussian_vec(spec.seed, detail::kStreamTextTask,
                                            static_cast<std::uint64_t>(task),
                                            spec.text_dim);
  Rng noise = Rng::stream(spec.seed, detail::kStreamTextNoise,
                          static_cast<std::uint64_t>(action),
                          static_cast<std::uint64_t>(task));
  e.vector.resize(static_cast<std::size_t>(spec.text_dim));
  for (std::size_t i = 0; i < e.vector.size(); ++i) {
    e.vector[i] = base[i] + spec.task_blend * task_vec[i] +
                  spec.caption_noise * noise.gaussian();
  }
  return e;
}

// Noise-free observation embedding: visual channel followed by the text
// channel. Instance-level noise is added in sample_dataset.
inline std::vector<double> observation_embed(std::int64_t action,
                                             std::int64_t task,
                                             const WorldSpec& spec) {
  auto vis = detail::unit_gaussian_vec(spec.seed, detail::kStreamVisBase,
                                       static_cast<std::uint64_t>(action),
                                       spec.vis_dim);
  auto vis_task = detail::unit_gaussian_vec(spec.seed, detail::kStreamVisTask,
                                            static_cast<std::uint64_t>(task),
                                            spec.vis_dim);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(spec.obs_dim()));
  for (std::size_t i = 0; i < vis.size(); ++i)
    out.push_back(vis[i] + spec.task_blend * vis_task[i]);
  auto text = caption_embed(action, task, spec);
  out.insert(out.end(), text.vector.begin(), text.vector.end());
  return out;
}

inline World generate_world(const WorldSpec& spec) {
  if (spec.num_tasks <= 0 || spec.actions_per_task <= 0 ||
      spec.vis_dim <= 0 || spec.text_dim <= 0 || spec.plans_per_task <= 0) {
    throw std::invalid_argument("generate_world: counts must be positive");
  }
  if (spec.horizon < 2) throw std::invalid_argument("generate_world: horizon must be >= 2");
  if (spec.video_len < spec.horizon) {
    throw std::invalid_argument("generate_world: video_len must be >= horizon");
  }
  if (spec.actions_per_task < spec.video_len) {
    throw std::invalid_argument(
        "generate_world: task has fewer distinct actions than a plan needs");
  }
  World world;
  world.spec = spec;
  world.num_actions = spec.share_actions
                          ? spec.actions_per_task
                          : spec.num_tasks * spec.actions_per_task;
  world.tasks.resize(static_cast<std::size_t>(spec.num_tasks));
  for (std::int64_t k = 0; k < spec.num_tasks; ++k) {
    auto& task = world.tasks[static_cast<std::size_t>(k)];
    task.actions.resize(static_cast<std::size_t>(spec.actions_per_task));
    const std::int64_t base = spec.share_actions ? 0 : k * spec.actions_per_task;
    for (std::int64_t a = 0; a < spec.actions_per_task; ++a)
      task.actions[static_cast<std::size_t>(a)] = base + a;

    Rng rng = Rng::stream(spec.seed, detail::kStreamPlans,
                          static_cast<std::uint64_t>(k));
    std::set<std::vector<std::int64_t>> seen;
    std::vector<std::int64_t> pool = task.actions;
    std::vector<std::int64_t> anchor;  // first/last for interior variants
    if (spec.plan_style == PlanStyle::kInteriorVariants) {
      rng.shuffle(pool.begin(), pool.end());
      anchor.assign(pool.begin(), pool.begin() + spec.video_len);
    }
    int attempts = 0;
    while (static_cast<std::int64_t>(task.plans.size()) < spec.plans_per_task) {
      if (++attempts > 1000) {
        throw std::invalid_argument(
            "generate_world: cannot build enough distinct plans for task " +
            std::to_string(k));
      }
      std::vector<std::int64_t> plan;
      if (spec.plan_style == PlanStyle::kPermutation) {
        std::vector<std::int64_t> p = pool;
        rng.shuffle(p.begin(), p.end());
        plan.assign(p.begin(), p.begin() + spec.video_len);
      } else {
        // keep the anchored first/last, rebuild the interior
        std::vector<std::int64_t> interior;
        for (std::int64_t a : pool)
          if (a != anchor.front() && a != anchor[static_cast<std::size_t>(spec.video_len - 1)])
            interior.push_back(a);
        rng.shuffle(interior.begin(), interior.end());
        plan.push_back(anchor.front());
        plan.insert(plan.end(), interior.begin(),
                    interior.begin() + (spec.video_len - 2));
        plan.push_back(anchor[static_cast<std::size_t>(spec.video_len - 1)]);
      }
      if (seen.insert(plan).second) {
        task.plans.push_back({std::move(plan), 1.0 / static_cast<double>(spec.plans_per_task)});
      }
    }
  }
  return world;
}

inline std::vector<PlanInstance> sample_dataset(const World& world,
                                                std::int64_t n_videos,
                                                Protocol protocol,
                                                std::uint64_t seed) {
  if (n_videos <= 0) throw std::invalid_argument("sample_dataset: n_videos must be positive");
  const auto& spec = world.spec;
  const std::int64_t T = spec.horizon;
  std::vector<PlanInstance> out;
  for (std::int64_t v = 0; v < n_videos; ++v) {
    Rng rng = Rng::stream(seed, detail::kStreamVideo, static_cast<std::uint64_t>(v));
    const std::int64_t task = rng.below(spec.num_tasks);
    const auto& plans = world.tasks[static_cast<std::size_t>(task)].plans;
    double total = 0.0;
    for (const auto& p : plans) total += p.weight;
    double pick = rng.uniform() * total;
    std::size_t vi = 0;
    for (; vi + 1 < plans.size(); ++vi) {
      pick -= plans[vi].weight;
      if (pick < 0.0) break;
    }
    const auto& seq = plans[vi].actions;

    const std::int64_t n_windows = spec.video_len - T + 1;
    std::int64_t w_begin = 0, w_end = n_windows;
    if (protocol == Protocol::kOnePerVideo) {
      w_begin = rng.below(n_windows);
      w_end = w_begin + 1;
    }
    for (std::int64_t w = w_begin; w < w_end; ++w) {
      PlanInstance ins;
      ins.task = task;
      ins.video_id = v;
      ins.window_index = w;
      ins.actions.assign(seq.begin() + w, seq.begin() + w + T);
      ins.obs_start = observation_embed(ins.actions.front(), task, spec);
      ins.obs_goal = observation_embed(ins.actions.back(), task, spec);
      Rng noise = Rng::stream(seed, detail::kStreamObsNoise,
                              static_cast<std::uint64_t>(v),
                              static_cast<std::uint64_t>(w));
      for (auto& x : ins.obs_start) x += spec.obs_noise * noise.gaussian();
      for (auto& x : ins.obs_goal) x += spec.obs_noise * noise.gaussian();
      out.push_back(std::move(ins));
    }
  }
  return out;
}

// Video-granularity split: no window of a test video ever lands in train.
inline std::pair<std::vector<PlanInstance>, std::vector<PlanInstance>>
split_dataset(const std::vector<PlanInstance>& instances, double ratio,
              std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("split_dataset: ratio must be in (0,1)");
  }
  std::vector<std::int64_t> videos;
  for (const auto& ins : instances) {
    if (videos.empty() || videos.back() != ins.video_id) {
      if (std::find(videos.begin(), videos.end(), ins.video_id) == videos.end())
        videos.push_back(ins.video_id);
    }
  }
  const auto n = static_cast<std::int64_t>(videos.size());
  const auto n_train = static_cast<std::int64_t>(
      std::llround(ratio * static_cast<double>(n)));
  if (n_train <= 0 || n_train >= n) {
    throw std::invalid_argument("split_dataset: a side would be empty");
  }
  Rng rng = Rng::stream(seed, detail::kStreamSplit);
  rng.shuffle(videos.begin(), videos.end());
  std::set<std::int64_t> train_videos(videos.begin(), videos.begin() + n_train);
  std::pair<std::vector<PlanInstance>, std::vector<PlanInstance>> result;
  for (const auto& ins : instances) {
    PlanInstance copy = ins;
    if (train_videos.count(ins.video_id)) {
      copy.split = Split::kTrain;
      result.first.push_back(std::move(copy));
    } else {
      copy.split = Split::kTest;
      result.second.push_back(std::move(copy));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// serialization

inline nlohmann::json world_spec_to_json(const WorldSpec& s) {
  return nlohmann::json{
      {"num_tasks", s.num_tasks},
      {"actions_per_task", s.actions_per_task},
      {"share_actions", s.share_actions},
      {"horizon", s.horizon},
      {"video_len", s.video_len},
      {"plans_per_task", s.plans_per_task},
      {"plan_style", s.plan_style == PlanStyle::kPermutation ? "perm" : "interior"},
      {"vis_dim", s.vis_dim},
      {"text_dim", s.text_dim},
      {"obs_noise", s.obs_noise},
      {"caption_noise", s.caption_noise},
      {"task_blend", s.task_blend},
      {"seed", s.seed},
  };
}

inline WorldSpec world_spec_from_json(const nlohmann::json& j) {
  WorldSpec s;
  s.num_tasks = j.at("num_tasks").get<std::int64_t>();
  s.actions_per_task = j.at("actions_per_task").get<std::int64_t>();
  s.share_actions = j.at("share_actions").get<bool>();
  s.horizon = j.at("horizon").get<std::int64_t>();
  s.video_len = j.at("video_len").get<std::int64_t>();
  s.plans_per_task = j.at("plans_per_task").get<std::int64_t>();
  s.plan_style = j.at("plan_style").get<std::string>() == "perm"
                     ? PlanStyle::kPermutation
                     : PlanStyle::kInteriorVariants;
  s.vis_dim = j.at("vis_dim").get<std::int64_t>();
  s.text_dim = j.at("text_dim").get<std::int64_t>();
  s.obs_noise = j.at("obs_noise").get<double>();
  s.caption_noise = j.at("caption_noise").get<double>();
  s.task_blend = j.at("task_blend").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

inline nlohmann::json world_to_json(const World& w) {
  nlohmann::json tasks = nlohmann::json::array();
  for (std::size_t k = 0; k < w.tasks.size(); ++k) {
    nlohmann::json plans = nlohmann::json::array();
    for (const auto& p : w.tasks[k].plans)
      plans.push_back({{"actions", p.actions}, {"weight", p.weight}});
    tasks.push_back({{"id", k},
                     {"actions", w.tasks[k].actions},
                     {"plans", plans}});
  }
  nlohmann::json j{{"spec", world_spec_to_json(w.spec)},
                   {"num_actions", w.num_actions},
                   {"tasks", tasks}};
  stamp_meta(j, world_spec_to_json(w.spec));
  return j;
}

inline World world_from_json(const nlohmann::json& j) {
  World w;
  w.spec = world_spec_from_json(j.at("spec"));
  w.num_actions = j.at("num_actions").get<std::int64_t>();
  for (const auto& tj : j.at("tasks")) {
    TaskDef t;
    t.actions = tj.at("actions").get<std::vector<std::int64_t>>();
    for (const auto& pj : tj.at("plans")) {
      t.plans.push_back({pj.at("actions").get<std::vector<std::int64_t>>(),
                         pj.at("weight").get<double>()});
    }
    w.tasks.push_back(std::move(t));
  }
  return w;
}

inline void save_world(const std::filesystem::path& path, const World& w) {
  atomic_write(path, world_to_json(w).dump(2) + "\n");
}

inline World load_world(const std::filesystem::path& path) {
  return world_from_json(load_json(path));
}

// JSON-lines dataset, one PlanInstance per line; an optional leading _meta
// record carries the tool version and config hash.
inline void save_dataset(const std::filesystem::path& path,
                         const std::vector<PlanInstance>& instances,
                         const nlohmann::json& config) {
  std::string out;
  nlohmann::json meta;
  stamp_meta(meta, config);
  out += nlohmann::json{{"_meta", meta}}.dump() + "\n";
  for (const auto& ins : instances) {
    nlohmann::json j{{"task", ins.task},
                     {"actions", ins.actions},
                     {"obs_start", ins.obs_start},
                     {"obs_goal", ins.obs_goal},
                     {"video_id", ins.video_id},
                     {"window_index", ins.window_index}};
    out += j.dump() + "\n";
  }
  atomic_write(path, out);
}

inline std::vector<PlanInstance> load_dataset(const std::filesystem::path& path,
                                              Split tag = Split::kNone) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset: " + path.string());
  std::vector<PlanInstance> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    if (j.contains("_meta")) continue;
    PlanInstance ins;
    ins.task = j.at("task").get<std::int64_t>();
    ins.actions = j.at("actions").get<std::vector<std::int64_t>>();
    ins.obs_start = j.at("obs_start").get<std::vector<double>>();
    ins.obs_goal = j.at("obs_goal").get<std::vector<double>>();
    ins.video_id = j.at("video_id").get<std::int64_t>();
    ins.window_index = j.at("window_index").get<std::int64_t>();
    ins.split = tag;
    out.push_back(std::move(ins));
  }
  return out;
}

}  // namespace maskplan
