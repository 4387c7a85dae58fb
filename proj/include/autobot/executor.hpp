#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "autobot/autodiff.hpp"
#include "autobot/graph.hpp"
#include "autobot/ops.hpp"

namespace autobot {

/// Variables to use instead of constant leaves while running a graph.
struct Bindings {
  /// "<node>.<param>" -> variable (typically trainable leaves).
  std::map<std::string, Var> params;
  /// Gate vector per pruning group, indexed by group index - 1.
  std::vector<Var> gates;
};

namespace detail {

inline Var run_graph(const Graph& g, Graph* mutable_graph, Tape<float>& tape, Var input,
                     const Bindings& bindings) {
  const bool training = mutable_graph != nullptr;
  std::map<std::string, Var> out;
  auto param_var = [&](const NodeSpec& n, const std::string& name) -> Var {
    auto it = n.params.find(name);
    if (it == n.params.end()) return Var{};
    auto bound = bindings.params.find(n.id + "." + name);
    if (bound != bindings.params.end()) return bound->second;
    return tape.leaf(it->second, false);
  };
  for (const auto& n : g.nodes()) {
    std::vector<Var> in;
    for (const auto& i : n.inputs) in.push_back(out.at(i));
    Var y;
    switch (n.op) {
      case OpKind::Input: {
        const auto& s = tape.value(input).shape();
        if (s.size() != 4 || !std::equal(s.begin() + 1, s.end(), g.input_shape().begin())) {
          throw ShapeError("graph input: expected (N," + shape_str(g.input_shape()).substr(1) +
                           ", got " + shape_str(s));
        }
        y = input;
        break;
      }
      case OpKind::Conv2d:
        y = ops::conv2d(tape, in[0], param_var(n, "weight"), param_var(n, "bias"),
                        {.stride = n.attrs.stride, .padding = n.attrs.padding});
        break;
      case OpKind::Linear:
        y = ops::linear(tape, in[0], param_var(n, "weight"), param_var(n, "bias"));
        break;
      case OpKind::BatchNorm: {
        ops::BatchNormAttrs attrs{.training = training, .momentum = n.attrs.momentum,
                                  .eps = n.attrs.eps};
        if (training) {
          auto& m = mutable_graph->node_mut(n.id);
          y = ops::batch_norm(tape, in[0], param_var(n, "weight"), param_var(n, "bias"),
                              {&m.params.at("running_mean"), &m.params.at("running_var")}, attrs);
        } else {
          Tensor mean = n.params.at("running_mean");
          Tensor var = n.params.at("running_var");
          y = ops::batch_norm(tape, in[0], param_var(n, "weight"), param_var(n, "bias"),
                              {&mean, &var}, attrs);
        }
        break;
      }
      case OpKind::Relu: y = ops::relu(tape, in[0]); break;
      case OpKind::MaxPool:
        y = ops::max_pool2d(tape, in[0],
                            {.kernel = n.attrs.kernel, .stride = n.attrs.stride,
                             .padding = n.attrs.padding});
        break;
      case OpKind::GlobalAvgPool: y = ops::global_avg_pool(tape, in[0]); break;
      case OpKind::Add: {
        y = in[0];
        for (std::size_t k = 1; k < in.size(); ++k) y = ops::add(tape, y, in[k]);
        break;
      }
      case OpKind::Concat: y = ops::concat_channels(tape, in); break;
      case OpKind::Bottleneck: {
        const std::size_t gi = n.attrs.group;
        if (gi == 0 || gi > bindings.gates.size()) {
          throw GraphError("bottleneck '" + n.id + "': no gate bound for group " +
                           std::to_string(gi));
        }
        y = ops::channel_mul(tape, in[0], bindings.gates[gi - 1]);
        break;
      }
    }
    out[n.id] = y;
  }
  return out.at(g.output_id());
}

}  // namespace detail

/// Records an inference-mode forward pass (batch norm uses running
/// statistics) and returns the logits variable.
inline Var forward(const Graph& g, Tape<float>& tape, Var input, const Bindings& bindings = {}) {
  return detail::run_graph(g, nullptr, tape, input, bindings);
}

/// Training-mode forward pass: batch norm normalizes with batch statistics
/// and updates the running statistics stored in `g`.
inline Var forward_train(Graph& g, Tape<float>& tape, Var input, const Bindings& bindings = {}) {
  return detail::run_graph(g, &g, tape, input, bindings);
}

/// Constant gate leaves from per-group values.
inline std::vector<Var> gate_leaves(Tape<float>& tape, const std::vector<std::vector<float>>& gates) {
  std::vector<Var> out;
  for (const auto& v : gates) out.push_back(tape.leaf(Tensor({v.size()}, v)));
  return out;
}

/// Inference logits for a batch [N, C, H, W].
inline Tensor predict(const Graph& g, const Tensor& batch,
                      const std::vector<std::vector<float>>& gates = {}) {
  Tape<float> tape;
  Bindings b;
  b.gates = gate_leaves(tape, gates);
  return tape.value(forward(g, tape, tape.leaf(batch), b));
}

}  // namespace autobot
