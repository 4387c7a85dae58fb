#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "autobot/error.hpp"
#include "autobot/flops.hpp"
#include "autobot/mask.hpp"
#include "autobot/mask_search.hpp"

namespace autobot {

enum class Strategy { AutoBot, Random, Reverse, Spdc, Dpdc };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::AutoBot: return "autobot";
    case Strategy::Random: return "random";
    case Strategy::Reverse: return "reverse";
    case Strategy::Spdc: return "spdc";
    case Strategy::Dpdc: return "dpdc";
  }
  return "?";
}

inline Strategy strategy_from_string(const std::string& s) {
  for (auto k : {Strategy::AutoBot, Strategy::Random, Strategy::Reverse, Strategy::Spdc, Strategy::Dpdc}) {
    if (to_string(k) == s) return k;
  }
  throw ValueError("unknown strategy '" + s + "' (autobot, random, reverse, spdc, dpdc)");
}

/// Per-group keep ratios for the dpdc strategy.
struct PruningProfile {
  std::vector<double> keep_ratios;

  static PruningProfile from_json(const nlohmann::json& j) {
    try {
      return {j.at("keep_ratios").get<std::vector<double>>()};
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("profile json: ") + e.what());
    }
  }
  nlohmann::json to_json() const { return {{"keep_ratios", keep_ratios}}; }
};

namespace detail {

inline MaskSearchResult finish(PruningMask mask, const FlopsModel& model, const MaskSearchParams& p) {
  MaskSearchResult r;
  r.achieved_flops = model.weighted(mask);
  r.mask = std::move(mask);
  r.target_flops = p.target_flops;
  r.epsilon = p.epsilon;
  r.met_epsilon = std::abs(r.achieved_flops - p.target_flops) <= p.epsilon;
  r.threshold = std::nan("");
  return r;
}

// Indices of the `count` largest values (ties: lower index).
inline std::vector<bool> keep_top(const std::vector<float>& v, std::size_t count) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  std::vector<bool> keep(v.size(), false);
  for (std::size_t i = 0; i < count; ++i) keep[order[i]] = true;
  return keep;
}

}  // namespace detail

/// Mask for one ablation strategy, aiming at the same FLOPs target:
/// - autobot: threshold search on the trained gates
/// - random: threshold search on uniformly random scores
/// - reverse: threshold search on 1 - gate
/// - spdc: autobot's per-group keep counts, channels chosen at random
/// - dpdc: per-group keep ratios from `profile`, keeping the largest gates
inline MaskSearchResult ablation_mask(Strategy s, const GateValues& gates, const FlopsModel& model,
                                      const MaskSearchParams& p, std::uint64_t seed,
                                      const PruningProfile* profile = nullptr) {
  std::mt19937_64 rng(seed);
  switch (s) {
    case Strategy::AutoBot: return get_pruning_mask(gates, model, p);
    case Strategy::Random: {
      std::uniform_real_distribution<float> u(0.0f, 1.0f);
      GateValues scores = gates;
      for (auto& g : scores) {
        for (auto& v : g) v = u(rng);
      }
      return get_pruning_mask(scores, model, p);
    }
    case Strategy::Reverse: {
      GateValues inv = gates;
      for (auto& g : inv) {
        for (auto& v : g) v = 1.0f - v;
      }
      return get_pruning_mask(inv, model, p);
    }
    case Strategy::Spdc: {
      const auto ref = get_pruning_mask(gates, model, p);
      PruningMask m;
      for (std::size_t i = 0; i < gates.size(); ++i) {
        std::vector<std::size_t> idx(gates[i].size());
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        std::vector<bool> keep(idx.size(), false);
        for (std::size_t k = 0; k < ref.mask.kept(i); ++k) keep[idx[k]] = true;
        m.keep.push_back(std::move(keep));
      }
      auto r = detail::finish(std::move(m), model, p);
      r.threshold = ref.threshold;
      return r;
    }
    case Strategy::Dpdc: {
      if (!profile) throw ValueError("dpdc: a per-group keep-ratio profile is required");
      if (profile->keep_ratios.size() != gates.size()) {
        throw ValueError("dpdc: profile has " + std::to_string(profile->keep_ratios.size()) +
                         " ratios for " + std::to_string(gates.size()) + " groups");
      }
      PruningMask m;
      for (std::size_t i = 0; i < gates.size(); ++i) {
        const double r = profile->keep_ratios[i];
        if (!(r > 0.0 && r <= 1.0)) throw ValueError("dpdc: keep ratios must lie in (0, 1]");
        const auto count = std::max<std::size_t>(1, std::size_t(std::llround(r * double(gates[i].size()))));
        m.keep.push_back(detail::keep_top(gates[i], count));
      }
      auto r = detail::finish(std::move(m), model, p);
      if (!r.met_epsilon) {
        throw ValueError("dpdc: profile reaches " + std::to_string(r.achieved_flops) + " FLOPs, target " +
                         std::to_string(p.target_flops) + " +- " + std::to_string(p.epsilon));
      }
      return r;
    }
  }
  throw ValueError("ablation_mask: unknown strategy");
}

}  // namespace autobot
