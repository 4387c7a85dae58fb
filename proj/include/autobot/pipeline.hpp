#pragma once

#include <chrono>
#include <map>
#include <optional>
#include <string>
#include <utility>

#include <json.hpp>

#include "autobot/ablation.hpp"
#include "autobot/bottleneck.hpp"
#include "autobot/checkpoint.hpp"
#include "autobot/dataset.hpp"
#include "autobot/flops.hpp"
#include "autobot/groups.hpp"
#include "autobot/mask_search.hpp"
#include "autobot/prune.hpp"
#include "autobot/train.hpp"

namespace autobot {

struct PruneConfig {
  double target_flops_ratio = 0.5;
  /// Accepted FLOPs error as a fraction of the unpruned FLOPs.
  double epsilon_ratio = 0.02;
  int max_iters = 50;
  Strategy strategy = Strategy::AutoBot;
  std::optional<PruningProfile> profile;

  void check() const {
    if (!(target_flops_ratio > 0.0 && target_flops_ratio < 1.0)) {
      throw ValueError("prune config: target FLOPs ratio must lie in (0, 1)");
    }
    if (!(epsilon_ratio > 0.0)) throw ValueError("prune config: epsilon ratio must be positive");
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"target_flops_ratio", target_flops_ratio},
                     {"epsilon_ratio", epsilon_ratio},
                     {"max_iters", max_iters},
                     {"strategy", to_string(strategy)}};
    if (profile) j["profile"] = profile->to_json();
    return j;
  }
};

struct RunReport {
  nlohmann::json config;
  BottleneckTrace trace;
  MaskSearchResult mask;
  double full_flops = 0.0;
  double target_flops = 0.0;
  double achieved_flops = 0.0;  // exact FLOPs of the pruned graph
  double baseline_accuracy = 0.0;
  double accuracy_before_finetune = 0.0;
  double accuracy_after_finetune = 0.0;
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  std::uint64_t weight_hash_before = 0;
  std::uint64_t weight_hash_after = 0;
  TrainResult finetune;
  std::map<std::string, double> stage_seconds;
  double wall_clock_seconds = 0.0;

  nlohmann::json to_json() const {
    return {{"config", config},
            {"full_flops", full_flops},
            {"target_flops", target_flops},
            {"achieved_flops", achieved_flops},
            {"achieved_flops_ratio", achieved_flops / full_flops},
            {"met_epsilon", mask.met_epsilon},
            {"mask", mask.to_json()},
            {"baseline_accuracy", baseline_accuracy},
            {"accuracy_before_finetune", accuracy_before_finetune},
            {"accuracy_after_finetune", accuracy_after_finetune},
            {"params_before", params_before},
            {"params_after", params_after},
            {"weight_hash_before", weight_hash_before},
            {"weight_hash_after", weight_hash_after},
            {"bottleneck_trace", trace.to_json()},
            {"finetune", finetune.to_json()},
            {"stage_seconds", stage_seconds},
            {"wall_clock_seconds", wall_clock_seconds}};
  }
};

struct PipelineResult {
  RunReport report;
  Graph instrumented;
  Bottlenecks bottlenecks;
  Graph pruned;
};

namespace detail {

template <typename F>
auto run_stage(const std::string& name, std::map<std::string, double>& timings, F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  auto record = [&] {
    timings[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  try {
    if constexpr (std::is_void_v<std::invoke_result_t<F>>) {
      f();
      record();
    } else {
      auto r = f();
      record();
      return r;
    }
  } catch (const Error& e) {
    throw Error("stage '" + name + "': " + e.what());
  }
}

}  // namespace detail

/// Splits `d` into (train, validation) with a seeded `fraction` held out.
inline std::pair<Dataset, Dataset> split_validation(const Dataset& d, double fraction, std::uint64_t seed) {
  auto idx = shuffled_indices(d.size(), seed, 0xFA11);
  const auto n_val = static_cast<std::size_t>(std::llround(fraction * double(d.size())));
  std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<long>(n_val));
  std::vector<std::size_t> rest(idx.begin() + static_cast<long>(n_val), idx.end());
  std::sort(val.begin(), val.end());
  std::sort(rest.begin(), rest.end());
  return {d.subset(rest), d.subset(val)};
}

/// The full pruning run on a pretrained model: inject bottlenecks, train
/// them for k batches, search the mask, remove the bottlenecks, prune,
/// evaluate, finetune, evaluate.
inline PipelineResult run_pipeline(const Graph& pretrained, const DataSplits& data, const TrainConfig& cfg,
                                   const PruneConfig& pc) {
  const auto start = std::chrono::steady_clock::now();
  cfg.check();
  pc.check();
  PipelineResult out;
  RunReport& rep = out.report;
  auto& t = rep.stage_seconds;
  rep.config = {{"train", cfg.to_json()}, {"prune", pc.to_json()}, {"model", pretrained.metadata()}};

  const auto groups = detail::run_stage("groups", t, [&] { return identify_groups(pretrained); });
  const auto model = FlopsModel::from_graph(pretrained);
  rep.full_flops = model.total();
  rep.target_flops = pc.target_flops_ratio * rep.full_flops;
  rep.params_before = pretrained.parameter_count();
  rep.baseline_accuracy = detail::run_stage("baseline_eval", t, [&] { return evaluate(pretrained, data.test).accuracy; });

  out.instrumented = detail::run_stage("inject", t, [&] { return inject_bottlenecks(pretrained, groups); });
  out.bottlenecks = Bottlenecks::init(groups);
  rep.weight_hash_before = parameter_hash(out.instrumented);
  rep.trace = detail::run_stage("train_bottlenecks", t, [&] {
    return train_bottlenecks(out.instrumented, out.bottlenecks, model, data.train, rep.target_flops, cfg);
  });
  rep.weight_hash_after = parameter_hash(out.instrumented);

  const MaskSearchParams search{.target_flops = rep.target_flops,
                                .epsilon = pc.epsilon_ratio * rep.full_flops,
                                .max_iters = pc.max_iters};
  rep.mask = detail::run_stage("mask_search", t, [&] {
    return ablation_mask(pc.strategy, out.bottlenecks.gates(), model, search, cfg.seed,
                         pc.profile ? &*pc.profile : nullptr);
  });

  out.pruned = detail::run_stage("prune", t, [&] {
    Graph plain = remove_bottlenecks(out.instrumented);
    Graph p = prune(plain, rep.mask.mask);
    p.metadata()["mask"] = rep.mask.to_json();
    return p;
  });
  rep.achieved_flops = double(exact_flops(out.pruned).total);
  rep.params_after = out.pruned.parameter_count();
  rep.accuracy_before_finetune =
      detail::run_stage("eval_before_finetune", t, [&] { return evaluate(out.pruned, data.test).accuracy; });

  rep.finetune = detail::run_stage("finetune", t, [&] {
    auto [train, val] = split_validation(data.train, 0.1, cfg.seed);
    return train_sgd(out.pruned, train, val, cfg);
  });
  rep.accuracy_after_finetune =
      detail::run_stage("eval_after_finetune", t, [&] { return evaluate(out.pruned, data.test).accuracy; });
  rep.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace autobot
