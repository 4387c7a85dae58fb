#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "autobot/autodiff.hpp"
#include "autobot/error.hpp"
#include "autobot/graph.hpp"
#include "autobot/groups.hpp"
#include "autobot/mask.hpp"

namespace autobot {

// FLOPs convention (one multiply-accumulate = one FLOP, per sample):
//   conv2d      s_out * s_in * h_out * w_out * k^2  (+ s_out * h_out * w_out with bias)
//   linear      s_out * s_in                         (+ s_out with bias)
//   batch_norm  2 * s * h * w
//   relu        s * h * w
//   max_pool2d  s * h_out * w_out * k^2
//   global pool s * h_in * w_in
//   add         s * h * w * (inputs - 1)
//   input, concat, bottleneck: 0

/// Channel count of a tensor as a sum of a fixed part and whole groups.
struct ChannelSum {
  double fixed = 0.0;
  std::vector<std::size_t> groups;  // 1-based, with repetition

  double eval(const std::vector<double>& s) const {
    double v = fixed;
    for (auto g : groups) v += s.at(g - 1);
    return v;
  }
};

/// FLOPs of one operator as a * S_out * S_in + b * S_out.
struct FlopsTerm {
  std::string node;
  OpKind op = OpKind::Input;
  double per_in_out = 0.0;
  double per_out = 0.0;
  ChannelSum out;
  ChannelSum in;

  double eval(const std::vector<double>& s) const {
    const double so = out.eval(s);
    return per_in_out * so * in.eval(s) + per_out * so;
  }
};

/// Per-operator FLOPs from channel sums. Channel sums must be >= 0.
inline double weighted_op_flops(const FlopsTerm& t, double s_out, double s_in) {
  if (s_out < 0.0 || s_in < 0.0) {
    throw ValueError("weighted_op_flops: negative channel sum at '" + t.node + "'");
  }
  return t.per_in_out * s_out * s_in + t.per_out * s_out;
}

/// Differentiable FLOPs model of a graph whose only free quantities are the
/// per-group channel sums s_i = sum of the group's gates.
class FlopsModel {
 public:
  FlopsModel() = default;

  static FlopsModel from_graph(const Graph& g) {
    const auto analysis = analyze_channels(g);
    const auto shapes = g.infer_shapes();
    FlopsModel m;
    for (const auto& grp : analysis.groups) m.group_channels_.push_back(grp.channels);
    auto sum_of = [&](const std::string& id) {
      ChannelSum s;
      for (const auto& seg : analysis.layouts.at(id)) {
        if (seg.group == 0) {
          s.fixed += double(seg.count);
        } else {
          s.groups.push_back(seg.group);
        }
      }
      return s;
    };
    auto spatial = [](const Shape& s) { return s.size() == 3 ? double(s[1] * s[2]) : 1.0; };
    for (const auto& n : g.nodes()) {
      FlopsTerm t{.node = n.id, .op = n.op};
      const Shape& out = shapes.at(n.id);
      const double k2 = double(n.attrs.kernel * n.attrs.kernel);
      switch (n.op) {
        case OpKind::Input:
        case OpKind::Concat:
        case OpKind::Bottleneck: continue;
        case OpKind::Conv2d:
          t.per_in_out = spatial(out) * k2;
          t.per_out = n.attrs.bias ? spatial(out) : 0.0;
          break;
        case OpKind::Linear:
          t.per_in_out = 1.0;
          t.per_out = n.attrs.bias ? 1.0 : 0.0;
          break;
        case OpKind::BatchNorm: t.per_out = 2.0 * spatial(out); break;
        case OpKind::Relu: t.per_out = spatial(out); break;
        case OpKind::MaxPool: t.per_out = spatial(out) * k2; break;
        case OpKind::GlobalAvgPool: t.per_out = spatial(shapes.at(n.inputs[0])); break;
        case OpKind::Add: t.per_out = spatial(out) * double(n.inputs.size() - 1); break;
      }
      t.out = sum_of(n.id);
      if (!n.inputs.empty()) t.in = sum_of(n.inputs[0]);
      m.terms_.push_back(std::move(t));
    }
    return m;
  }

  const std::vector<FlopsTerm>& terms() const noexcept { return terms_; }
  const std::vector<std::size_t>& group_channels() const noexcept { return group_channels_; }

  /// FLOPs of the unpruned model (M_F).
  double total() const {
    std::vector<double> s(group_channels_.begin(), group_channels_.end());
    return weighted(s);
  }

  /// g(s): weighted FLOPs for per-group channel sums.
  double weighted(const std::vector<double>& s) const {
    check_sums(s);
    double f = 0.0;
    for (const auto& t : terms_) f += weighted_op_flops(t, t.out.eval(s), t.in.eval(s));
    return f;
  }

  double weighted(const GateValues& gates) const { return weighted(sums(gates)); }
  double weighted(const PruningMask& mask) const { return weighted(mask.as_gates()); }

  /// dg/ds_i.
  std::vector<double> gradient(const std::vector<double>& s) const {
    check_sums(s);
    std::vector<double> d(s.size(), 0.0);
    for (const auto& t : terms_) {
      const double so = t.out.eval(s);
      const double si = t.in.eval(s);
      const double d_out = t.per_in_out * si + t.per_out;
      const double d_in = t.per_in_out * so;
      for (auto g : t.out.groups) d[g - 1] += d_out;
      for (auto g : t.in.groups) d[g - 1] += d_in;
    }
    return d;
  }

  std::vector<double> sums(const GateValues& gates) const {
    if (gates.size() != group_channels_.size()) {
      throw ValueError("flops: " + std::to_string(gates.size()) + " gate vectors for " +
                       std::to_string(group_channels_.size()) + " groups");
    }
    std::vector<double> s;
    for (std::size_t i = 0; i < gates.size(); ++i) {
      if (gates[i].size() != group_channels_[i]) {
        throw ValueError("flops: group " + std::to_string(i + 1) + " has " +
                         std::to_string(group_channels_[i]) + " channels, got " +
                         std::to_string(gates[i].size()) + " gates");
      }
      double acc = 0.0;
      for (float v : gates[i]) acc += v;
      s.push_back(acc);
    }
    return s;
  }

 private:
  void check_sums(const std::vector<double>& s) const {
    if (s.size() != group_channels_.size()) {
      throw ValueError("flops: expected " + std::to_string(group_channels_.size()) +
                       " channel sums, got " + std::to_string(s.size()));
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] < 0.0) throw ValueError("flops: negative channel sum for group " + std::to_string(i + 1));
    }
  }

  std::vector<FlopsTerm> terms_;
  std::vector<std::size_t> group_channels_;
};

struct OpFlops {
  std::string node;
  OpKind op = OpKind::Input;
  std::uint64_t flops = 0;
};

struct FlopsReport {
  std::vector<OpFlops> ops;
  std::uint64_t total = 0;

  std::map<std::string, std::uint64_t> by_kind() const {
    std::map<std::string, std::uint64_t> out;
    for (const auto& o : ops) out[to_string(o.op)] += o.flops;
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["total"] = total;
    j["by_kind"] = by_kind();
    for (const auto& o : ops) j["ops"].push_back({{"node", o.node}, {"op", to_string(o.op)}, {"flops", o.flops}});
    return j;
  }
};

/// Integer FLOPs of a physical graph, counted from its actual tensor shapes.
inline FlopsReport exact_flops(const Graph& g) {
  const auto shapes = g.infer_shapes();
  FlopsReport r;
  auto spatial = [](const Shape& s) -> std::uint64_t { return s.size() == 3 ? s[1] * s[2] : 1; };
  for (const auto& n : g.nodes()) {
    const Shape& out = shapes.at(n.id);
    const std::uint64_t c = out[0];
    std::uint64_t f = 0;
    switch (n.op) {
      case OpKind::Input:
      case OpKind::Concat:
      case OpKind::Bottleneck: break;
      case OpKind::Conv2d: {
        const auto& w = n.params.at("weight");
        f = w.dim(0) * w.dim(1) * w.dim(2) * w.dim(3) * spatial(out);
        if (n.params.count("bias")) f += c * spatial(out);
        break;
      }
      case OpKind::Linear: {
        const auto& w = n.params.at("weight");
        f = w.dim(0) * w.dim(1);
        if (n.params.count("bias")) f += c;
        break;
      }
      case OpKind::BatchNorm: f = 2 * c * spatial(out); break;
      case OpKind::Relu: f = c * spatial(out); break;
      case OpKind::MaxPool: f = c * spatial(out) * n.attrs.kernel * n.attrs.kernel; break;
      case OpKind::GlobalAvgPool: f = c * spatial(shapes.at(n.inputs[0])); break;
      case OpKind::Add: f = c * spatial(out) * (n.inputs.size() - 1); break;
    }
    if (n.op == OpKind::Input || n.op == OpKind::Concat || n.op == OpKind::Bottleneck) continue;
    r.ops.push_back({n.id, n.op, f});
    r.total += f;
  }
  return r;
}

/// Piecewise FLOPs loss: (g - T_F) / (M_F - T_F) above the target,
/// 1 - g / T_F below it.
inline double flops_loss(double g, double target, double full) {
  if (!(target > 0.0 && target < full)) {
    throw ValueError("flops_loss: target must lie in (0, M_F), got " + std::to_string(target) +
                     " with M_F = " + std::to_string(full));
  }
  return g >= target ? (g - target) / (full - target) : 1.0 - g / target;
}

inline double flops_loss_derivative(double g, double target, double full) {
  flops_loss(g, target, full);
  return g >= target ? 1.0 / (full - target) : -1.0 / target;
}

/// Records L_f(g(lambda)) on the tape from per-group gate variables.
inline Var flops_loss_var(Tape<float>& tape, const FlopsModel& model, const std::vector<Var>& gates,
                          double target) {
  GateValues values;
  for (Var v : gates) {
    const auto d = tape.value(v).data();
    values.emplace_back(d.begin(), d.end());
  }
  const auto s = model.sums(values);
  const double full = model.total();
  const double g = model.weighted(s);
  const double loss = flops_loss(g, target, full);
  const double dl = flops_loss_derivative(g, target, full);
  const auto ds = model.gradient(s);
  return tape.record("flops_loss", Tensor::scalar(static_cast<float>(loss)), gates,
                     [=](const Tensor& go, Tape<float>& t) {
                       for (std::size_t i = 0; i < gates.size(); ++i) {
                         auto* gx = t.grad_buffer(gates[i]);
                         if (!gx) continue;
                         const float d = static_cast<float>(go[0] * dl * ds[i]);
                         for (auto& v : gx->data()) v += d;
                       }
                     });
}

}  // namespace autobot
