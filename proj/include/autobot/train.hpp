#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "autobot/bottleneck.hpp"
#include "autobot/dataset.hpp"
#include "autobot/executor.hpp"
#include "autobot/flops.hpp"
#include "autobot/graph.hpp"
#include "autobot/optim.hpp"
#include "autobot/ranking.hpp"

namespace autobot {

struct TrainConfig {
  // bottleneck training
  std::size_t iters = 200;  // k
  std::size_t batch_size = 64;
  double bottleneck_lr = 0.6;
  double beta = 5.5;
  std::size_t snapshot_every = 10;
  // pretraining / finetuning
  std::size_t epochs = 5;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 2e-3;
  std::uint64_t seed = 0;

  void check() const {
    if (iters < 1) throw ValueError("train config: iterations must be >= 1");
    if (beta < 0.0) throw ValueError("train config: beta must be >= 0");
    if (batch_size < 1) throw ValueError("train config: batch size must be >= 1");
    if (snapshot_every < 1) throw ValueError("train config: snapshot interval must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"iters", iters},       {"batch_size", batch_size}, {"bottleneck_lr", bottleneck_lr},
            {"beta", beta},         {"snapshot_every", snapshot_every},
            {"epochs", epochs},     {"lr", lr},                 {"momentum", momentum},
            {"weight_decay", weight_decay}, {"seed", seed}};
  }
};

struct EvalResult {
  double accuracy = 0.0;  // percent
  double loss = 0.0;
};

/// Top-1 accuracy (percent) and mean cross-entropy in inference mode.
inline EvalResult evaluate(const Graph& g, const Dataset& d, const GateValues& gates = {},
                           std::size_t batch = 250) {
  if (d.size() == 0) throw ValueError("evaluate: empty dataset");
  std::size_t correct = 0;
  double loss = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < d.size(); start += batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(d.size(), start + batch); ++i) idx.push_back(i);
    Tape<float> tape;
    Bindings b;
    b.gates = gate_leaves(tape, gates);
    const auto labels = d.batch_labels(idx);
    Var logits = forward(g, tape, tape.leaf(d.batch(idx)), b);
    loss += double(tape.value(ops::cross_entropy(tape, logits, std::span<const int>(labels)))[0]) *
            double(idx.size());
    const auto& lv = tape.value(logits);
    const std::size_t c = lv.dim(1);
    for (std::size_t n = 0; n < idx.size(); ++n) {
      const float* row = lv.ptr() + n * c;
      if (std::size_t(std::max_element(row, row + c) - row) == std::size_t(labels[n])) ++correct;
    }
  }
  return {100.0 * double(correct) / double(d.size()), loss / double(d.size())};
}

/// FNV-1a over every parameter tensor (including batch norm statistics), in
/// node order.
inline std::uint64_t parameter_hash(const Graph& g) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& n : g.nodes()) {
    for (const auto& [name, t] : n.params) {
      mix(n.id.data(), n.id.size());
      mix(name.data(), name.size());
      mix(t.ptr(), t.numel() * sizeof(float));
    }
  }
  return h;
}

/// Names "<node>.<param>" of the parameters trained by SGD.
inline std::vector<std::string> trainable_parameters(const Graph& g) {
  std::vector<std::string> out;
  for (const auto& n : g.nodes()) {
    for (const auto& [name, t] : n.params) {
      if (name == "running_mean" || name == "running_var") continue;
      out.push_back(n.id + "." + name);
    }
  }
  return out;
}

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> curve;
  double best_val_accuracy = 0.0;
  std::size_t best_epoch = 0;  // 0: the starting weights

  nlohmann::json to_json() const {
    nlohmann::json c = nlohmann::json::array();
    for (const auto& e : curve) {
      c.push_back({{"epoch", e.epoch}, {"lr", e.lr}, {"train_loss", e.train_loss}, {"val_accuracy", e.val_accuracy}});
    }
    return {{"curve", c}, {"best_val_accuracy", best_val_accuracy}, {"best_epoch", best_epoch}};
  }
};

/// SGD with momentum, weight decay and a cosine learning rate from cfg.lr
/// to 0 over cfg.epochs. Keeps the weights with the best validation accuracy
/// (the starting weights count as epoch 0). Aborts when the epoch loss stays
/// above 10x the first batch loss for 3 consecutive epochs.
inline TrainResult train_sgd(Graph& g, const Dataset& train, const Dataset& val, const TrainConfig& cfg) {
  if (g.has_bottlenecks() || g.frozen()) throw GraphError("train_sgd: graph is instrumented / frozen");
  if (train.size() == 0) throw ValueError("train_sgd: empty training set");
  const auto names = trainable_parameters(g);
  std::vector<Tensor*> params;
  for (const auto& full : names) {
    const auto dot = full.rfind('.');
    params.push_back(&g.node_mut(full.substr(0, dot)).params.at(full.substr(dot + 1)));
  }
  Sgd sgd({.momentum = cfg.momentum, .weight_decay = cfg.weight_decay});
  TrainResult result;
  result.best_val_accuracy = evaluate(g, val).accuracy;
  Graph best = g;
  std::optional<double> initial_loss;
  int diverged_epochs = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
    const auto order = shuffled_indices(train.size(), cfg.seed, epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start,
                                             std::min(cfg.batch_size, order.size() - start));
      if (idx.size() < 2) continue;  // batch norm needs two samples
      Tape<float> tape;
      Bindings b;
      std::vector<Var> leaves;
      for (std::size_t i = 0; i < params.size(); ++i) {
        leaves.push_back(tape.leaf(*params[i], true));
        b.params[names[i]] = leaves.back();
      }
      const auto labels = train.batch_labels(idx);
      Var logits = forward_train(g, tape, tape.leaf(train.batch(idx)), b);
      Var loss = ops::cross_entropy(tape, logits, std::span<const int>(labels));
      const double lv = tape.value(loss)[0];
      if (!std::isfinite(lv)) {
        throw Error("train_sgd: non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                    std::to_string(batches + 1));
      }
      if (!initial_loss) initial_loss = lv;
      tape.backward(loss);
      std::vector<Tensor> grads;
      for (Var v : leaves) grads.push_back(tape.grad(v));
      sgd.step(params, grads, lr);
      loss_sum += lv;
      ++batches;
    }
    EpochStats s{epoch + 1, lr, batches ? loss_sum / double(batches) : 0.0, evaluate(g, val).accuracy};
    result.curve.push_back(s);
    if (s.val_accuracy > result.best_val_accuracy) {
      result.best_val_accuracy = s.val_accuracy;
      result.best_epoch = epoch + 1;
      best = g;
    }
    diverged_epochs = initial_loss && s.train_loss > 10.0 * *initial_loss ? diverged_epochs + 1 : 0;
    if (diverged_epochs >= 3) {
      throw Error("train_sgd: diverged, epoch loss " + std::to_string(s.train_loss) + " > 10x initial " +
                  std::to_string(*initial_loss) + " for 3 epochs (last epoch " + std::to_string(epoch + 1) +
                  ", lr " + std::to_string(lr) + ")");
    }
  }
  g = best;
  return result;
}

struct BottleneckIteration {
  double ce = 0.0;
  double flops_loss = 0.0;
  double flops = 0.0;  // g(Lambda) before the update
};

struct RankingSnapshot {
  std::size_t iteration = 0;  // iterations completed
  std::vector<std::size_t> ranking;
};

struct BottleneckTrace {
  std::vector<BottleneckIteration> iterations;
  std::vector<RankingSnapshot> snapshots;

  /// Kendall tau distance between consecutive snapshots; entry i compares
  /// snapshots i and i + 1.
  std::vector<double> kendall() const {
    std::vector<double> d;
    for (std::size_t i = 1; i < snapshots.size(); ++i) {
      d.push_back(kendall_tau_distance(snapshots[i - 1].ranking, snapshots[i].ranking));
    }
    return d;
  }

  nlohmann::json to_json() const {
    nlohmann::json it = nlohmann::json::array();
    for (const auto& r : iterations) it.push_back({{"ce", r.ce}, {"flops_loss", r.flops_loss}, {"flops", r.flops}});
    nlohmann::json k = nlohmann::json::array();
    const auto d = kendall();
    for (std::size_t i = 0; i < d.size(); ++i) k.push_back({{"iteration", snapshots[i + 1].iteration}, {"distance", d[i]}});
    return {{"iterations", it}, {"kendall", k}};
  }
};

/// Trains only the bottleneck parameters on the first k batches of a seeded
/// pass over `train`, minimizing CE + beta * L_g with Adam. Model weights
/// and batch norm statistics stay untouched (inference-mode batch norm).
inline BottleneckTrace train_bottlenecks(const Graph& instrumented, Bottlenecks& b, const FlopsModel& model,
                                         const Dataset& train, double target_flops, const TrainConfig& cfg) {
  cfg.check();
  if (!instrumented.has_bottlenecks()) throw GraphError("train_bottlenecks: graph has no bottlenecks");
  if (b.psi.size() != model.group_channels().size()) {
    throw ValueError("train_bottlenecks: bottleneck set does not match the FLOPs model");
  }
  const double full = model.total();
  flops_loss(target_flops, target_flops, full);  // validates the target
  Adam adam({.lr = cfg.bottleneck_lr});
  BottleneckTrace trace;
  std::vector<Tensor*> psi;
  for (auto& p : b.psi) psi.push_back(&p);
  std::size_t epoch = 0, cursor = 0;
  auto order = shuffled_indices(train.size(), cfg.seed, epoch);
  for (std::size_t it = 0; it < cfg.iters; ++it) {
    if (cursor + cfg.batch_size > order.size()) {
      order = shuffled_indices(train.size(), cfg.seed, ++epoch);
      cursor = 0;
    }
    const std::span<const std::size_t> idx(order.data() + cursor, std::min(cfg.batch_size, order.size()));
    cursor += idx.size();
    Tape<float> tape;
    auto vars = gate_vars(tape, b);
    const auto labels = train.batch_labels(idx);
    Var logits = forward(instrumented, tape, tape.leaf(train.batch(idx)), {.gates = vars.gates});
    Var ce = ops::cross_entropy(tape, logits, std::span<const int>(labels));
    Var lg = flops_loss_var(tape, model, vars.gates, target_flops);
    BottleneckIteration rec{tape.value(ce)[0], tape.value(lg)[0], model.weighted(b.gates())};
    if (!std::isfinite(rec.ce) || !std::isfinite(rec.flops_loss)) {
      throw Error("train_bottlenecks: non-finite loss at iteration " + std::to_string(it) + " (CE " +
                  std::to_string(rec.ce) + ", L_g " + std::to_string(rec.flops_loss) + ")");
    }
    Var loss = cfg.beta > 0.0 ? ops::add(tape, ce, ops::scale(tape, lg, float(cfg.beta))) : ce;
    tape.backward(loss);
    std::vector<Tensor> grads;
    for (Var v : vars.psi) grads.push_back(tape.grad(v));
    adam.step(psi, grads);
    trace.iterations.push_back(rec);
    if ((it + 1) % cfg.snapshot_every == 0 || it + 1 == cfg.iters) {
      trace.snapshots.push_back({it + 1, channel_ranking(b.gates())});
    }
  }
  return trace;
}

}  // namespace autobot
