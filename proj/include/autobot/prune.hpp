#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "autobot/error.hpp"
#include "autobot/executor.hpp"
#include "autobot/graph.hpp"
#include "autobot/groups.hpp"
#include "autobot/mask.hpp"

namespace autobot {

namespace detail {

// Copies rows `rows` of axis 0 and `cols` of axis 1; other axes are kept.
inline Tensor slice01(const Tensor& t, const std::vector<std::size_t>& rows,
                      const std::vector<std::size_t>* cols) {
  Shape s = t.shape();
  const std::size_t d1 = t.rank() > 1 ? s[1] : 1;
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  s[0] = rows.size();
  if (cols && t.rank() > 1) s[1] = cols->size();
  Tensor out(s);
  std::size_t o = 0;
  for (auto r : rows) {
    if (cols && t.rank() > 1) {
      for (auto c : *cols) {
        const float* src = t.ptr() + (r * d1 + c) * inner;
        std::copy(src, src + inner, out.ptr() + o);
        o += inner;
      }
    } else {
      const float* src = t.ptr() + r * d1 * inner;
      std::copy(src, src + d1 * inner, out.ptr() + o);
      o += d1 * inner;
    }
  }
  return out;
}

}  // namespace detail

/// Physically removes the channels a mask prunes. Every conv2d / linear /
/// batch norm is rebuilt with the surviving slices of its parameters; the
/// result is a smaller ordinary graph whose logits match the pseudo-pruned
/// instrumented graph.
inline Graph prune(const Graph& g, const PruningMask& mask) {
  if (g.has_bottlenecks()) throw GraphError("prune: remove the bottlenecks first");
  const auto analysis = analyze_channels(g);
  mask.check(analysis.groups);

  std::vector<std::vector<std::size_t>> kept_idx;
  for (const auto& k : mask.keep) {
    std::vector<std::size_t> v;
    for (std::size_t i = 0; i < k.size(); ++i) {
      if (k[i]) v.push_back(i);
    }
    kept_idx.push_back(std::move(v));
  }
  auto kept_channels = [&](const std::string& id) {
    std::vector<std::size_t> out;
    std::size_t offset = 0;
    for (const auto& seg : analysis.layouts.at(id)) {
      if (seg.group == 0) {
        for (std::size_t i = 0; i < seg.count; ++i) out.push_back(offset + i);
      } else {
        for (auto i : kept_idx[seg.group - 1]) out.push_back(offset + i);
      }
      offset += seg.count;
    }
    return out;
  };

  Graph out(g.name(), g.input_shape(), g.num_classes());
  out.metadata() = g.metadata();
  for (const auto& src : g.nodes()) {
    NodeSpec n = src;
    switch (n.op) {
      case OpKind::Conv2d:
      case OpKind::Linear: {
        const auto rows = kept_channels(n.id);
        const auto cols = kept_channels(n.inputs[0]);
        n.attrs.out_channels = rows.size();
        n.params["weight"] = detail::slice01(src.params.at("weight"), rows, &cols);
        if (n.params.count("bias")) n.params["bias"] = detail::slice01(src.params.at("bias"), rows, nullptr);
        break;
      }
      case OpKind::BatchNorm: {
        const auto rows = kept_channels(n.id);
        for (auto& [name, t] : n.params) t = detail::slice01(src.params.at(name), rows, nullptr);
        break;
      }
      default: break;
    }
    out.add(std::move(n));
  }
  out.set_output(g.output_id());
  out.validate();
  return out;
}

struct EquivalenceResult {
  double max_abs_diff = 0.0;
  /// max over logits of |a - b| / max(|a|, 1e-6).
  double max_rel_diff = 0.0;
  bool exact = false;
};

/// Compares logits of the pseudo-pruned instrumented graph against the
/// physically pruned graph on random inputs.
inline EquivalenceResult equivalence_check(const Graph& instrumented, const GateValues& gates,
                                           const Graph& pruned, std::size_t samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Shape s{samples};
  for (auto d : instrumented.input_shape()) s.push_back(d);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  Tensor x(s);
  for (auto& v : x.data()) v = nd(rng);
  const Tensor a = predict(instrumented, x, gates);
  const Tensor b = predict(pruned, x);
  if (a.shape() != b.shape()) {
    throw ShapeError("equivalence_check: logits " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  EquivalenceResult r;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = std::abs(double(a[i]) - double(b[i]));
    r.max_abs_diff = std::max(r.max_abs_diff, d);
    r.max_rel_diff = std::max(r.max_rel_diff, d / std::max(std::abs(double(a[i])), 1e-6));
  }
  r.exact = a == b;
  return r;
}

}  // namespace autobot
