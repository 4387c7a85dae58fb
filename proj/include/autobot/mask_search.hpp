#pragma once

#include <cmath>
#include <limits>
#include <set>
#include <vector>

#include <json.hpp>

#include "autobot/error.hpp"
#include "autobot/flops.hpp"
#include "autobot/mask.hpp"

namespace autobot {

/// Keeps channels whose gate is strictly above `threshold`. A group that
/// would lose every channel keeps its largest gate (lowest index on ties).
inline PruningMask threshold_mask(const GateValues& gates, double threshold) {
  PruningMask m;
  for (const auto& g : gates) {
    if (g.empty()) throw ValueError("threshold_mask: empty gate vector");
    std::vector<bool> keep(g.size());
    bool any = false;
    std::size_t best = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      keep[i] = double(g[i]) > threshold;
      any = any || keep[i];
      if (g[i] > g[best]) best = i;
    }
    if (!any) keep[best] = true;
    m.keep.push_back(std::move(keep));
  }
  return m;
}

struct MaskSearchParams {
  double target_flops = 0.0;
  /// Accepted |achieved - target| in FLOPs.
  double epsilon = 0.0;
  int max_iters = 50;
};

struct MaskSearchResult {
  PruningMask mask;
  double achieved_flops = 0.0;
  double target_flops = 0.0;
  double epsilon = 0.0;
  bool met_epsilon = false;
  double threshold = 0.5;
  int iterations = 0;

  nlohmann::json to_json() const {
    return {{"groups", mask.groups_json()},
            {"achieved_flops", achieved_flops},
            {"target_flops", target_flops},
            {"met_epsilon", met_epsilon},
            {"threshold", threshold}};
  }

  static MaskSearchResult from_json(const nlohmann::json& j) {
    MaskSearchResult r;
    try {
      r.mask = PruningMask::from_groups_json(j.at("groups"));
      r.achieved_flops = j.at("achieved_flops").get<double>();
      r.target_flops = j.at("target_flops").get<double>();
      r.met_epsilon = j.at("met_epsilon").get<bool>();
      r.threshold = j.at("threshold").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("mask json: ") + e.what());
    }
    return r;
  }
};

/// Bisection on the gate threshold until the thresholded mask is within
/// epsilon of the FLOPs target. Starting at T = 0.5, step i moves T by
/// 0.25 / 2^i: up when the mask is too expensive, down otherwise. When the
/// budget is not met within max_iters the closest mask seen is returned with
/// met_epsilon = false.
inline MaskSearchResult get_pruning_mask(const GateValues& gates, const FlopsModel& model,
                                         const MaskSearchParams& p) {
  if (!(p.target_flops > 0.0)) throw ValueError("get_pruning_mask: target FLOPs must be positive");
  if (p.epsilon < 0.0) throw ValueError("get_pruning_mask: epsilon must be >= 0");
  if (p.max_iters < 0) throw ValueError("get_pruning_mask: max_iters must be >= 0");

  double t = 0.5;
  PruningMask mask = threshold_mask(gates, t);
  double f = model.weighted(mask);
  MaskSearchResult best{.mask = mask, .achieved_flops = f, .target_flops = p.target_flops,
                        .epsilon = p.epsilon, .threshold = t};
  int i = 0;
  while (std::abs(f - p.target_flops) > p.epsilon && i < p.max_iters) {
    const double step = 0.25 / std::ldexp(1.0, i);
    t += f > p.target_flops ? step : -step;
    mask = threshold_mask(gates, t);
    f = model.weighted(mask);
    ++i;
    if (std::abs(f - p.target_flops) < std::abs(best.achieved_flops - p.target_flops)) {
      best.mask = mask;
      best.achieved_flops = f;
      best.threshold = t;
    }
  }
  best.iterations = i;
  if (std::abs(f - p.target_flops) <= p.epsilon) {
    best.mask = mask;
    best.achieved_flops = f;
    best.threshold = t;
  }
  best.met_epsilon = std::abs(best.achieved_flops - p.target_flops) <= p.epsilon;
  return best;
}

/// Reference search: tries every threshold that yields a distinct mask and
/// reports whether any of them meets the budget, plus the closest one.
inline MaskSearchResult exhaustive_threshold_search(const GateValues& gates, const FlopsModel& model,
                                                    const MaskSearchParams& p) {
  std::set<double> candidates{std::nextafter(0.0, 1.0)};
  for (const auto& g : gates) {
    for (float v : g) {
      if (v > 0.0f && v < 1.0f) candidates.insert(double(v));
    }
  }
  MaskSearchResult best;
  best.target_flops = p.target_flops;
  best.epsilon = p.epsilon;
  double best_dist = std::numeric_limits<double>::infinity();
  for (double t : candidates) {
    auto mask = threshold_mask(gates, t);
    const double f = model.weighted(mask);
    const double dist = std::abs(f - p.target_flops);
    if (dist < best_dist) {
      best_dist = dist;
      best.mask = std::move(mask);
      best.achieved_flops = f;
      best.threshold = t;
    }
    best.iterations++;
  }
  best.met_epsilon = best_dist <= p.epsilon;
  return best;
}

}  // namespace autobot
