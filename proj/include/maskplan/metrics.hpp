#pragma once

// Deterministic plan metrics (SR, mAcc, mIoU) and the probabilistic protocol
// (NLL, KL, mode precision/recall) over (task, first, last) groups.

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <vector>

#include "maskplan/world.hpp"

namespace maskplan {

struct PlanScore {
  double sr = 0.0;    // exact-sequence success rate
  double macc = 0.0;  // per-timestep accuracy
  double miou = 0.0;  // order-free set IoU, averaged per sequence
  std::int64_t count = 0;
};

inline PlanScore score_plans(
    std::span<const std::vector<std::int64_t>> predicted,
    std::span<const std::vector<std::int64_t>> ground_truth) {
  if (predicted.size() != ground_truth.size()) {
    throw std::invalid_argument("score_plans: count mismatch");
  }
  PlanScore out;
  out.count = static_cast<std::int64_t>(predicted.size());
  if (predicted.empty()) return out;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const auto& p = predicted[i];
    const auto& g = ground_truth[i];
    if (p.size() != g.size()) {
      throw std::invalid_argument("score_plans: horizon mismatch at " +
                                  std::to_string(i));
    }
    std::size_t hits = 0;
    for (std::size_t t = 0; t < p.size(); ++t)
      if (p[t] == g[t]) ++hits;
    out.sr += hits == p.size() ? 1.0 : 0.0;
    out.macc += static_cast<double>(hits) / static_cast<double>(p.size());
    std::set<std::int64_t> ps(p.begin(), p.end());
    std::set<std::int64_t> gs(g.begin(), g.end());
    std::size_t inter = 0;
    for (auto a : ps)
      if (gs.count(a)) ++inter;
    const std::size_t uni = ps.size() + gs.size() - inter;
    out.miou += static_cast<double>(inter) / static_cast<double>(uni);
  }
  const auto n = static_cast<double>(out.count);
  out.sr /= n;
  out.macc /= n;
  out.miou /= n;
  return out;
}

// Samples and ground truth plans for one (task, first, last) group.
struct GroupData {
  std::vector<std::vector<std::int64_t>> samples;
  std::vector<std::vector<std::int64_t>> gt_plans;
};

struct GroupScore {
  double nll = 0.0;
  double kl = 0.0;
  double mode_prec = 0.0;
  double mode_rec = 0.0;
  std::int64_t weight = 0;  // number of GT instances in the group
};

struct DistributionScore {
  double nll = 0.0;
  double kl = 0.0;
  double mode_prec = 0.0;
  double mode_rec = 0.0;
  std::int64_t groups_scored = 0;
  std::int64_t groups_skipped = 0;  // no samples
  std::map<GroupKey, GroupScore> per_group;
};

// Per group: empirical predicted distribution P over whole sequences, GT
// distribution G from dataset multiplicities. KL = sum G log(G/(P+eps)),
// NLL = -sum G log(P+eps), ModePrec counts samples falling in the GT mode
// set (per sample, duplicates included), ModeRec counts GT modes hit at
// least once. Group scores aggregate weighted by GT instance count.
inline DistributionScore score_distributions(
    const std::map<GroupKey, GroupData>& groups, double eps = 1e-12) {
  DistributionScore out;
  double total_weight = 0.0;
  for (const auto& [key, data] : groups) {
    if (data.gt_plans.empty()) continue;
    if (data.samples.empty()) {
      out.groups_skipped += 1;
      continue;
    }
    std::map<std::vector<std::int64_t>, double> g_dist;
    for (const auto& p : data.gt_plans) g_dist[p] += 1.0;
    for (auto& [p, v] : g_dist) v /= static_cast<double>(data.gt_plans.size());
    std::map<std::vector<std::int64_t>, double> p_dist;
    for (const auto& p : data.samples) p_dist[p] += 1.0;
    for (auto& [p, v] : p_dist) v /= static_cast<double>(data.samples.size());

    GroupScore gs;
    gs.weight = static_cast<std::int64_t>(data.gt_plans.size());
    std::int64_t modes_hit = 0;
    for (const auto& [plan, g] : g_dist) {
      const auto it = p_dist.find(plan);
      const double p = it == p_dist.end() ? 0.0 : it->second;
      gs.kl += g * std::log(g / (p + eps));
      gs.nll -= g * std::log(p + eps);
      if (p > 0.0) ++modes_hit;
    }
    gs.mode_rec = static_cast<double>(modes_hit) /
                  static_cast<double>(g_dist.size());
    std::int64_t in_mode = 0;
    for (const auto& s : data.samples)
      if (g_dist.count(s)) ++in_mode;
    gs.mode_prec = static_cast<double>(in_mode) /
                   static_cast<double>(data.samples.size());

    const auto w = static_cast<double>(gs.weight);
    out.nll += w * gs.nll;
    out.kl += w * gs.kl;
    out.mode_prec += w * gs.mode_prec;
    out.mode_rec += w * gs.mode_rec;
    total_weight += w;
    out.groups_scored += 1;
    out.per_group.emplace(key, std::move(gs));
  }
  if (total_weight > 0.0) {
    out.nll /= total_weight;
    out.kl /= total_weight;
    out.mode_prec /= total_weight;
    out.mode_rec /= total_weight;
  }
  return out;
}

struct MetricsReport {
  PlanScore plan;                 // from one decoded plan per instance
  DistributionScore distribution; // from all samples per instance group
  std::map<std::int64_t, PlanScore> per_horizon;
  std::int64_t instances = 0;
  std::int64_t samples = 0;
};

// Groups samples by the GT instance's group key and computes both metric
// families. Plan metrics use sample 0 of each instance.
inline MetricsReport evaluate_metrics(
    std::span<const PlanInstance> gt,
    std::span<const std::vector<std::int64_t>> first_sample_plans,
    const std::map<GroupKey, GroupData>& groups) {
  MetricsReport report;
  report.instances = static_cast<std::int64_t>(gt.size());
  std::vector<std::vector<std::int64_t>> gt_plans;
  gt_plans.reserve(gt.size());
  for (const auto& ins : gt) gt_plans.push_back(ins.actions);
  report.plan = score_plans(first_sample_plans, gt_plans);
  if (!gt.empty()) {
    const auto horizon = static_cast<std::int64_t>(gt.front().actions.size());
    report.per_horizon[horizon] = report.plan;
  }
  report.distribution = score_distributions(groups);
  for (const auto& [key, data] : groups)
    report.samples += static_cast<std::int64_t>(data.samples.size());
  return report;
}

}  // namespace maskplan
