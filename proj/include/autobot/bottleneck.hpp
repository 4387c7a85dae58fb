#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "autobot/autodiff.hpp"
#include "autobot/error.hpp"
#include "autobot/graph.hpp"
#include "autobot/groups.hpp"
#include "autobot/mask.hpp"
#include "autobot/ops.hpp"

namespace autobot {

/// Gate value every bottleneck starts from.
inline constexpr float kInitialGate = 0.99f;

/// Trainable bottleneck parameters: one psi vector per pruning group, with
/// gates lambda = sigmoid(psi).
struct Bottlenecks {
  std::vector<PruningGroup> groups;
  std::vector<Tensor> psi;

  static Bottlenecks init(const std::vector<PruningGroup>& groups, float gate = kInitialGate) {
    if (!(gate > 0.0f && gate < 1.0f)) throw ValueError("bottleneck: initial gate must lie in (0, 1)");
    Bottlenecks b;
    b.groups = groups;
    const float logit = std::log(gate / (1.0f - gate));
    for (const auto& g : groups) b.psi.emplace_back(Shape{g.channels}, logit);
    return b;
  }

  GateValues gates() const {
    GateValues out;
    for (const auto& p : psi) {
      std::vector<float> v(p.numel());
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = ops::sigmoid_value(p[i]);
      out.push_back(std::move(v));
    }
    return out;
  }

  /// Tensor name used in checkpoints.
  static std::string psi_name(std::size_t group_index) {
    return "bottleneck.psi." + std::to_string(group_index);
  }
};

inline std::string bottleneck_id(const std::string& site) { return site + ".gate"; }

/// Inserts one bottleneck after every gate site of every group. The returned
/// graph is marked frozen: only the bottleneck parameters train.
inline Graph inject_bottlenecks(const Graph& g, const std::vector<PruningGroup>& groups) {
  if (g.has_bottlenecks()) throw GraphError("inject_bottlenecks: graph is already instrumented");
  const auto problems = validate_groups(g, groups);
  if (!problems.empty()) throw GraphError("inject_bottlenecks: invalid groups: " + problems.front());
  Graph out = g;
  for (const auto& grp : groups) {
    if (grp.sites.empty()) {
      throw GraphError("inject_bottlenecks: group " + std::to_string(grp.index) + " has no gate site");
    }
    for (const auto& site : grp.sites) {
      NodeSpec n{.id = bottleneck_id(site), .op = OpKind::Bottleneck, .inputs = {site}};
      n.attrs.group = grp.index;
      out.insert_after(site, n);
      out.redirect_consumers(site, n.id, n.id);
    }
  }
  out.set_frozen(true);
  out.validate();
  return out;
}

/// Removes every bottleneck node and unfreezes the graph.
inline Graph remove_bottlenecks(const Graph& g) {
  if (!g.has_bottlenecks()) throw GraphError("remove_bottlenecks: graph has no bottlenecks");
  Graph out = g;
  std::vector<std::string> ids;
  for (const auto& n : out.nodes()) {
    if (n.op == OpKind::Bottleneck) ids.push_back(n.id);
  }
  for (const auto& id : ids) out.splice_out(id);
  out.set_frozen(false);
  return out;
}

/// Gate leaves for training: psi leaves requiring gradients and their
/// sigmoid outputs.
struct GateVars {
  std::vector<Var> psi;
  std::vector<Var> gates;
};

inline GateVars gate_vars(Tape<float>& tape, const Bottlenecks& b) {
  GateVars v;
  for (const auto& p : b.psi) {
    v.psi.push_back(tape.leaf(p, true));
    v.gates.push_back(ops::sigmoid(tape, v.psi.back()));
  }
  return v;
}

/// Gates that reproduce a pruning mask exactly on the instrumented graph.
inline GateValues pseudo_prune_gates(const PruningMask& mask, const std::vector<PruningGroup>& groups) {
  mask.check(groups);
  return mask.as_gates();
}

}  // namespace autobot
