#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "autobot/error.hpp"
#include "autobot/graph.hpp"

namespace autobot {

/// Contiguous run of channels belonging to one pruning group. Group 0 marks
/// channels that can never be pruned (model input, logits).
struct ChannelSegment {
  std::size_t group = 0;
  std::size_t count = 0;
  friend bool operator==(const ChannelSegment&, const ChannelSegment&) = default;
};

/// Channel axis of a node output as an ordered list of segments.
using ChannelLayout = std::vector<ChannelSegment>;

inline std::size_t layout_channels(const ChannelLayout& l) {
  std::size_t n = 0;
  for (const auto& s : l) n += s.count;
  return n;
}

/// A set of coupled output-channel dimensions sharing one pruning mask.
struct PruningGroup {
  std::size_t index = 0;  // 1-based
  /// Channel producers (conv2d / linear) whose outputs are coupled.
  std::vector<std::string> members;
  std::size_t channels = 0;
  /// conv2d / linear nodes reading these channels.
  std::vector<std::string> consumers;
  /// Nodes whose output gets multiplied by the group's gate. One for plain
  /// and concatenated blocks; a block merged through identity shortcuts is
  /// read by convolutions at several points and needs one site per point.
  std::vector<std::string> sites;

  friend bool operator==(const PruningGroup&, const PruningGroup&) = default;
};

struct ChannelAnalysis {
  std::vector<PruningGroup> groups;
  std::map<std::string, ChannelLayout> layouts;
};

namespace detail {

class UnionFind {
 public:
  std::size_t make() {
    parent_.push_back(parent_.size());
    return parent_.size() - 1;
  }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a > b) std::swap(a, b);
    parent_[b] = a;  // lowest id wins, so the fixed sentinel 0 stays a root
  }

 private:
  std::vector<std::size_t> parent_;
};

inline bool is_channel_consumer(OpKind k) {
  return k == OpKind::Conv2d || k == OpKind::Linear || k == OpKind::Concat;
}

}  // namespace detail

/// Channel coupling analysis.
///
/// A block starts at a conv2d/linear and extends through channel-preserving
/// operators (batch norm, relu, pooling, bottleneck). An elementwise add
/// merges the blocks it sums into one group; a concat keeps its inputs'
/// groups distinct and records their order. The input image and the logits
/// are never prunable.
inline ChannelAnalysis analyze_channels(const Graph& g) {
  const auto shapes = g.infer_shapes();
  detail::UnionFind uf;
  const std::size_t fixed = uf.make();
  std::map<std::string, ChannelLayout> prov;  // provisional ids
  std::vector<std::pair<std::size_t, std::string>> producers;

  auto ambiguous = [](const NodeSpec& n, const std::string& why) {
    throw GraphError("ambiguous channel semantics at " + to_string(n.op) + " '" + n.id +
                     "': " + why);
  };

  for (const auto& n : g.nodes()) {
    ChannelLayout out;
    switch (n.op) {
      case OpKind::Input: out = {{fixed, shapes.at(n.id)[0]}}; break;
      case OpKind::Conv2d:
      case OpKind::Linear: {
        if (n.attrs.groups != 1) ambiguous(n, "grouped/depthwise convolution is not supported");
        const std::size_t id = uf.make();
        producers.emplace_back(id, n.id);
        out = {{id, n.attrs.out_channels}};
        break;
      }
      case OpKind::BatchNorm:
      case OpKind::Relu:
      case OpKind::MaxPool:
      case OpKind::GlobalAvgPool:
      case OpKind::Bottleneck: out = prov.at(n.inputs[0]); break;
      case OpKind::Add: {
        out = prov.at(n.inputs[0]);
        for (std::size_t k = 1; k < n.inputs.size(); ++k) {
          const auto& other = prov.at(n.inputs[k]);
          if (other.size() != out.size()) ambiguous(n, "operands have different channel segmentation");
          for (std::size_t s = 0; s < out.size(); ++s) {
            if (other[s].count != out[s].count) {
              ambiguous(n, "operands have different channel segmentation");
            }
            uf.unite(out[s].group, other[s].group);
          }
        }
        break;
      }
      case OpKind::Concat:
        for (const auto& in : n.inputs) {
          const auto& l = prov.at(in);
          out.insert(out.end(), l.begin(), l.end());
        }
        break;
    }
    prov[n.id] = std::move(out);
  }
  for (const auto& s : prov.at(g.output_id())) uf.unite(s.group, fixed);

  // Final 1-based group numbering in order of first producer.
  std::map<std::size_t, std::size_t> root_to_group;
  ChannelAnalysis result;
  for (const auto& [id, node_id] : producers) {
    const std::size_t root = uf.find(id);
    if (root == uf.find(fixed)) continue;
    auto [it, inserted] = root_to_group.emplace(root, result.groups.size() + 1);
    if (inserted) {
      PruningGroup grp;
      grp.index = it->second;
      grp.channels = g.node(node_id).attrs.out_channels;
      result.groups.push_back(grp);
    }
    result.groups[it->second - 1].members.push_back(node_id);
  }
  for (auto& [node_id, layout] : prov) {
    ChannelLayout resolved;
    for (const auto& s : layout) {
      const std::size_t root = uf.find(s.group);
      const auto it = root_to_group.find(root);
      resolved.push_back({it == root_to_group.end() ? 0 : it->second, s.count});
    }
    result.layouts[node_id] = std::move(resolved);
  }

  // Consumers and gate sites, in topological order.
  std::map<std::string, bool> zero_safe;
  for (const auto& n : g.nodes()) {
    const auto& layout = result.layouts.at(n.id);
    if (detail::is_channel_consumer(n.op) && n.op != OpKind::Concat) {
      std::set<std::size_t> seen;
      for (const auto& s : result.layouts.at(n.inputs[0])) {
        if (s.group != 0 && seen.insert(s.group).second) {
          result.groups[s.group - 1].consumers.push_back(n.id);
        }
      }
    }
    const bool prunable = std::any_of(layout.begin(), layout.end(),
                                      [](const ChannelSegment& s) { return s.group != 0; });
    bool safe = !prunable;
    switch (n.op) {
      case OpKind::Bottleneck: safe = true; break;
      case OpKind::Relu:
      case OpKind::MaxPool:
      case OpKind::GlobalAvgPool: safe = safe || zero_safe.at(n.inputs[0]); break;
      case OpKind::Add:
      case OpKind::Concat:
        safe = safe || std::all_of(n.inputs.begin(), n.inputs.end(),
                                   [&](const std::string& i) { return zero_safe.at(i); });
        break;
      default: break;
    }
    if (!safe) {
      const auto consumers = g.consumers(n.id);
      const bool read_by_consumer = std::any_of(
          consumers.begin(), consumers.end(),
          [&](const std::string& c) { return detail::is_channel_consumer(g.node(c).op); });
      if (read_by_consumer) {
        if (layout.size() != 1) {
          ambiguous(n, "channels of several groups reach a consumer without a common gate site");
        }
        result.groups[layout[0].group - 1].sites.push_back(n.id);
        safe = true;
      }
    }
    zero_safe[n.id] = safe;
  }
  return result;
}

/// Ordered pruning groups of `g`.
inline std::vector<PruningGroup> identify_groups(const Graph& g) { return analyze_channels(g).groups; }

/// Re-derives channel coupling by tracing symbolic channel ids (producer,
/// channel) through the graph, independently of analyze_channels, and lists
/// every way `groups` fails to partition the prunable channels. Empty means
/// valid.
inline std::vector<std::string> validate_groups(const Graph& g, const std::vector<PruningGroup>& groups) {
  using Symbol = std::pair<std::string, std::size_t>;
  std::vector<std::string> violations;
  std::map<std::string, std::vector<std::set<Symbol>>> trace;
  std::map<Symbol, Symbol> parent;  // union-find over symbols
  std::function<Symbol(const Symbol&)> find = [&](const Symbol& s) -> Symbol {
    auto it = parent.find(s);
    if (it == parent.end() || it->second == s) return s;
    Symbol r = find(it->second);
    parent[s] = r;
    return r;
  };
  auto unite = [&](const Symbol& a, const Symbol& b) {
    Symbol ra = find(a), rb = find(b);
    if (ra != rb) parent[std::max(ra, rb)] = std::min(ra, rb);
  };
  std::set<Symbol> fixed_symbols;

  for (const auto& n : g.nodes()) {
    std::vector<std::set<Symbol>> out;
    switch (n.op) {
      case OpKind::Input:
        for (std::size_t c = 0; c < g.input_shape()[0]; ++c) {
          out.push_back({{n.id, c}});
          fixed_symbols.insert({n.id, c});
        }
        break;
      case OpKind::Conv2d:
      case OpKind::Linear:
        for (std::size_t c = 0; c < n.attrs.out_channels; ++c) out.push_back({{n.id, c}});
        break;
      case OpKind::Add: {
        out = trace.at(n.inputs[0]);
        for (std::size_t k = 1; k < n.inputs.size(); ++k) {
          const auto& other = trace.at(n.inputs[k]);
          for (std::size_t c = 0; c < out.size() && c < other.size(); ++c) {
            out[c].insert(other[c].begin(), other[c].end());
          }
        }
        break;
      }
      case OpKind::Concat:
        for (const auto& in : n.inputs) {
          const auto& t = trace.at(in);
          out.insert(out.end(), t.begin(), t.end());
        }
        break;
      default: out = trace.at(n.inputs[0]); break;
    }
    for (const auto& position : out) {
      for (const auto& s : position) unite(*position.begin(), s);
    }
    trace[n.id] = std::move(out);
  }
  for (const auto& position : trace.at(g.output_id())) {
    for (const auto& s : position) fixed_symbols.insert(s);
  }
  std::set<Symbol> fixed_roots;
  for (const auto& s : fixed_symbols) fixed_roots.insert(find(s));

  std::map<Symbol, std::vector<std::size_t>> assigned;
  for (const auto& grp : groups) {
    for (const auto& m : grp.members) {
      if (!g.contains(m) || !produces_channels(g.node(m).op)) {
        violations.push_back("group " + std::to_string(grp.index) + ": member '" + m +
                             "' is not a channel producer");
        continue;
      }
      if (g.node(m).attrs.out_channels != grp.channels) {
        violations.push_back("group " + std::to_string(grp.index) + ": member '" + m + "' has " +
                             std::to_string(g.node(m).attrs.out_channels) + " channels, group has " +
                             std::to_string(grp.channels));
      }
      for (std::size_t c = 0; c < grp.channels; ++c) assigned[{m, c}].push_back(grp.index);
    }
  }

  std::map<Symbol, std::set<std::size_t>> class_groups;
  std::map<Symbol, std::set<std::size_t>> class_channels;
  for (const auto& n : g.nodes()) {
    if (!produces_channels(n.op)) continue;
    for (std::size_t c = 0; c < n.attrs.out_channels; ++c) {
      const Symbol s{n.id, c};
      const Symbol root = find(s);
      const auto it = assigned.find(s);
      const std::size_t count = it == assigned.end() ? 0 : it->second.size();
      const std::string name = "channel " + std::to_string(c) + " of '" + n.id + "'";
      if (fixed_roots.count(root)) {
        if (count) violations.push_back(name + " is not prunable but assigned to a group");
        continue;
      }
      if (count == 0) violations.push_back(name + " belongs to no group");
      if (count > 1) violations.push_back(name + " belongs to " + std::to_string(count) + " groups");
      if (count >= 1) {
        class_groups[root].insert(it->second.front());
        class_channels[root].insert(c);
      }
    }
  }
  for (const auto& [root, grps] : class_groups) {
    if (grps.size() > 1 || class_channels[root].size() > 1) {
      violations.push_back("coupled channels of '" + root.first + "' (channel " +
                           std::to_string(root.second) + ") are split across groups");
    }
  }
  return violations;
}

}  // namespace autobot
