#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <vector>

#include "maskplan/mask.hpp"
#include "maskplan/schedule.hpp"

using namespace maskplan;

namespace {

PlanInstance instance_of(std::int64_t task, std::vector<std::int64_t> actions) {
  PlanInstance ins;
  ins.task = task;
  ins.actions = std::move(actions);
  ins.split = Split::kTrain;
  return ins;
}

}  // namespace

TEST_CASE("mask bits follow set membership of training plans") {
  std::vector<PlanInstance> train{instance_of(0, {2, 5, 7}),
                                  instance_of(0, {5, 2, 7})};
  auto masks = build_task_masks(train, 1, 10);
  const std::vector<double> expected{0, 0, 1, 0, 0, 1, 0, 1, 0, 0};
  REQUIRE(masks[0].weights == expected);
  REQUIRE(masks[0].kind == MaskKind::kHard);
}

TEST_CASE("masks on a disjoint world equal the generator ground truth") {
  WorldSpec s;
  s.num_tasks = 6;
  s.actions_per_task = 5;
  s.horizon = 3;
  s.video_len = 5;
  s.plans_per_task = 4;
  s.seed = 3;
  World w = generate_world(s);
  // enough videos that every ordering of every task shows up
  auto data = sample_dataset(w, 600, Protocol::kSlidingWindow, 4);
  for (auto& i : data) i.split = Split::kTrain;
  auto masks = build_task_masks(data, s.num_tasks, w.num_actions);
  for (std::int64_t k = 0; k < s.num_tasks; ++k) {
    std::vector<double> expected(static_cast<std::size_t>(w.num_actions), 0.0);
    for (auto a : w.tasks[static_cast<std::size_t>(k)].actions)
      expected[static_cast<std::size_t>(a)] = 1.0;
    REQUIRE(masks[static_cast<std::size_t>(k)].weights == expected);
  }
}

TEST_CASE("all tasks sharing all actions degenerates to the no-mask model") {
  WorldSpec s;
  s.num_tasks = 3;
  s.actions_per_task = 4;
  s.share_actions = true;
  s.horizon = 3;
  s.video_len = 4;
  s.plans_per_task = 6;
  World w = generate_world(s);
  auto data = sample_dataset(w, 400, Protocol::kSlidingWindow, 4);
  for (auto& i : data) i.split = Split::kTrain;
  auto masks = build_task_masks(data, s.num_tasks, w.num_actions);
  for (const auto& m : masks)
    for (double v : m.weights) REQUIRE(v == 1.0);
}

TEST_CASE("build_task_masks is monotone in the training set") {
  std::vector<PlanInstance> small{instance_of(0, {1, 2, 3})};
  std::vector<PlanInstance> big = small;
  big.push_back(instance_of(0, {3, 4, 5}));
  big.push_back(instance_of(1, {6, 7, 8}));
  // a task left without actions is an error, not an all-zero mask
  REQUIRE_THROWS_AS(build_task_masks(small, 2, 9), std::runtime_error);
  auto m_big = build_task_masks(big, 2, 9);
  auto m_sub = build_task_masks(std::span<const PlanInstance>(big.data(), 1), 1, 9);
  for (std::size_t a = 0; a < 9; ++a) {
    if (m_sub[0].weights[a] > 0.0) REQUIRE(m_big[0].weights[a] > 0.0);
  }
}

TEST_CASE("build_task_masks rejects test-split instances and empty sets") {
  REQUIRE_THROWS_AS(build_task_masks({}, 1, 4), std::invalid_argument);
  PlanInstance leak = instance_of(0, {1, 2});
  leak.split = Split::kTest;
  std::vector<PlanInstance> bad{leak};
  REQUIRE_THROWS_AS(build_task_masks(bad, 1, 4), std::invalid_argument);
}

TEST_CASE("soft mask degenerates to the hard mask on a one-hot posterior") {
  std::vector<PlanInstance> train{instance_of(0, {0, 1, 2}),
                                  instance_of(1, {3, 4, 5})};
  auto masks = build_task_masks(train, 2, 6);
  std::vector<double> p{1.0, 0.0};
  auto soft = soft_mask(p, masks);
  REQUIRE(soft.kind == MaskKind::kSoft);
  REQUIRE(soft.weights == masks[0].weights);
}

TEST_CASE("uniform posterior over two disjoint tasks gives 0.5 everywhere covered") {
  std::vector<PlanInstance> train{instance_of(0, {0, 1, 2}),
                                  instance_of(1, {3, 4, 5})};
  auto masks = build_task_masks(train, 2, 6);
  std::vector<double> p{0.5, 0.5};
  auto soft = soft_mask(p, masks);
  for (std::size_t a = 0; a < 6; ++a) REQUIRE(soft.weights[a] == 0.5);
}

TEST_CASE("posterior that does not sum to one is rejected") {
  std::vector<PlanInstance> train{instance_of(0, {0, 1}), instance_of(1, {1, 2})};
  auto masks = build_task_masks(train, 2, 3);
  std::vector<double> p{0.6, 0.7};
  REQUIRE_THROWS_AS(soft_mask(p, masks), std::invalid_argument);
}

TEST_CASE("all-ones mask is the identity") {
  Rng rng = Rng::stream(5, 5);
  Tensor rows = Tensor::randn({2, 4, 3}, rng);
  Tensor out = apply_mask(rows, ones_mask(4));
  for (std::int64_t i = 0; i < rows.numel(); ++i)
    REQUIRE(out.data()[static_cast<std::size_t>(i)] ==
            rows.data()[static_cast<std::size_t>(i)]);
}

TEST_CASE("masking off the ground-truth action row erases it for good") {
  // classifier-error scenario: the wrong task's mask zeroes the GT one-hot
  std::vector<double> onehot(4 * 3, 0.0);
  onehot[0 * 3 + 0] = 1.0;  // action 0 at t=0
  onehot[1 * 3 + 1] = 1.0;  // action 1 at t=1
  onehot[2 * 3 + 2] = 1.0;  // action 2 at t=2
  Tensor rows = Tensor::from({1, 4, 3}, onehot);
  ActionMask wrong{{0.0, 0.0, 1.0, 1.0}, MaskKind::kHard};
  Tensor masked = apply_mask(rows, wrong);
  for (std::int64_t t = 0; t < 3; ++t) {
    REQUIRE(masked.data()[static_cast<std::size_t>(0 * 3 + t)] == 0.0);
    REQUIRE(masked.data()[static_cast<std::size_t>(1 * 3 + t)] == 0.0);
  }
  // the surviving rows keep their values
  REQUIRE(masked.data()[static_cast<std::size_t>(2 * 3 + 2)] == 1.0);
}

TEST_CASE("hard-masked rows stay exactly zero through the whole forward chain") {
  DiffusionSchedule sched = default_schedule(50);
  ActionMask mask{{1.0, 0.0, 1.0, 0.0}, MaskKind::kHard};
  Rng rng = Rng::stream(8, 1);
  std::vector<double> x0(4 * 3, 0.5);
  // masked signal
  for (std::int64_t a = 0; a < 4; ++a)
    for (std::int64_t t = 0; t < 3; ++t)
      x0[static_cast<std::size_t>(a * 3 + t)] *= mask.weights[static_cast<std::size_t>(a)];
  std::vector<double> xn(12), noise(12);
  for (std::int64_t n = 1; n <= 50; ++n) {
    for (std::int64_t a = 0; a < 4; ++a)
      for (std::int64_t t = 0; t < 3; ++t)
        noise[static_cast<std::size_t>(a * 3 + t)] =
            rng.gaussian() * mask.weights[static_cast<std::size_t>(a)];
    q_sample(x0, n, noise, sched, xn);
    for (std::int64_t t = 0; t < 3; ++t) {
      REQUIRE(xn[static_cast<std::size_t>(1 * 3 + t)] == 0.0);
      REQUIRE(xn[static_cast<std::size_t>(3 * 3 + t)] == 0.0);
    }
  }
}

TEST_CASE("projection is idempotent at w=1") {
  StateLayout layout{2, 3, 2, 3};
  Rng rng = Rng::stream(6, 2);
  Tensor x = Tensor::randn({1, layout.dim(), 3}, rng);
  BatchConditions cond;
  cond.batch = 1;
  cond.task_onehot = {0.0, 1.0};
  cond.obs_start = {1.0, 2.0};
  cond.obs_goal = {3.0, 4.0};
  ProjectionConfig cfg{1.0};
  Tensor once = project(x, layout, cond, cfg);
  Tensor twice = project(once, layout, cond, cfg);
  for (std::int64_t i = 0; i < once.numel(); ++i)
    REQUIRE(twice.data()[static_cast<std::size_t>(i)] ==
            once.data()[static_cast<std::size_t>(i)]);
}

TEST_CASE("projected observation block is (o_s, 0, o_g)") {
  StateLayout layout{1, 2, 2, 3};
  Tensor x = Tensor::zeros({1, layout.dim(), 3});
  BatchConditions cond;
  cond.batch = 1;
  cond.task_onehot = {1.0};
  cond.obs_start = {1.0, 2.0};
  cond.obs_goal = {3.0, 4.0};
  Tensor y = project(x, layout, cond, ProjectionConfig{1.0});
  const auto row0 = static_cast<std::size_t>(layout.obs_row0() * 3);
  // obs row 0: columns (1, 0, 3); obs row 1: columns (2, 0, 4)
  REQUIRE(y.data()[row0 + 0] == 1.0);
  REQUIRE(y.data()[row0 + 1] == 0.0);
  REQUIRE(y.data()[row0 + 2] == 3.0);
  REQUIRE(y.data()[row0 + 3 + 0] == 2.0);
  REQUIRE(y.data()[row0 + 3 + 1] == 0.0);
  REQUIRE(y.data()[row0 + 3 + 2] == 4.0);
  // task rows replicate the condition over all columns
  for (int t = 0; t < 3; ++t) REQUIRE(y.data()[static_cast<std::size_t>(t)] == 1.0);
}

TEST_CASE("boundary weight 10 turns 0.1 into 1.0 in action column 1") {
  StateLayout layout{1, 2, 1, 3};
  std::vector<double> data(static_cast<std::size_t>(layout.dim() * 3), 0.0);
  for (std::int64_t a = 0; a < 2; ++a)
    for (std::int64_t t = 0; t < 3; ++t)
      data[static_cast<std::size_t>((layout.action_row0() + a) * 3 + t)] = 0.1;
  Tensor x = Tensor::from({1, layout.dim(), 3}, data);
  BatchConditions cond;
  cond.batch = 1;
  cond.task_onehot = {1.0};
  cond.obs_start = {0.0};
  cond.obs_goal = {0.0};
  Tensor y = project(x, layout, cond, ProjectionConfig{10.0});
  for (std::int64_t a = 0; a < 2; ++a) {
    const auto base = static_cast<std::size_t>((layout.action_row0() + a) * 3);
    REQUIRE(y.data()[base + 0] == Catch::Approx(1.0).epsilon(1e-12));
    REQUIRE(y.data()[base + 1] == Catch::Approx(0.1).epsilon(1e-12));
    REQUIRE(y.data()[base + 2] == Catch::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("loss gradient never reaches task or observation output rows") {
  StateLayout layout{2, 3, 2, 3};
  Rng rng = Rng::stream(12, 0);
  Tensor x = Tensor::randn({1, layout.dim(), 3}, rng, 1.0, true);
  BatchConditions cond;
  cond.batch = 1;
  cond.task_onehot = {1.0, 0.0};
  cond.obs_start = {0.5, -0.5};
  cond.obs_goal = {0.25, 0.75};
  Tensor target = Tensor::randn({1, layout.dim(), 3}, rng);
  Tensor loss = mse(project(x, layout, cond, ProjectionConfig{10.0}), target);
  backward(loss);
  auto g = x.grad();
  for (std::int64_t r = 0; r < layout.dim(); ++r)
    for (std::int64_t t = 0; t < 3; ++t) {
      const double gv = g[static_cast<std::size_t>(r * 3 + t)];
      const bool action_row =
          r >= layout.action_row0() && r < layout.obs_row0();
      if (action_row) {
        REQUIRE(gv != 0.0);
      } else {
        REQUIRE(gv == 0.0);  // exactly zero, not approximately
      }
    }
}

TEST_CASE("mask table file round trip") {
  std::vector<PlanInstance> train{instance_of(0, {0, 2}), instance_of(1, {1, 3})};
  auto masks = build_task_masks(train, 2, 4);
  const auto path = std::filesystem::temp_directory_path() / "mp_masks.json";
  save_mask_table(path, masks, 4);
  auto loaded = load_mask_table(path);
  REQUIRE(loaded.size() == masks.size());
  for (std::size_t k = 0; k < masks.size(); ++k)
    REQUIRE(loaded[k].weights == masks[k].weights);
  std::filesystem::remove(path);
}
