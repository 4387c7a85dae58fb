#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "autobot/error.hpp"
#include "autobot/ops.hpp"
#include "autobot/tensor.hpp"

namespace autobot {

enum class OpKind {
  Input,
  Conv2d,
  Linear,
  BatchNorm,
  Relu,
  MaxPool,
  GlobalAvgPool,
  Add,
  Concat,
  Bottleneck,
};

inline std::string to_string(OpKind k) {
  switch (k) {
    case OpKind::Input: return "input";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Linear: return "linear";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::Relu: return "relu";
    case OpKind::MaxPool: return "max_pool2d";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::Add: return "add";
    case OpKind::Concat: return "concat";
    case OpKind::Bottleneck: return "bottleneck";
  }
  return "?";
}

inline OpKind op_kind_from_string(const std::string& s) {
  for (OpKind k : {OpKind::Input, OpKind::Conv2d, OpKind::Linear, OpKind::BatchNorm, OpKind::Relu,
                   OpKind::MaxPool, OpKind::GlobalAvgPool, OpKind::Add, OpKind::Concat,
                   OpKind::Bottleneck}) {
    if (to_string(k) == s) return k;
  }
  throw GraphError("unknown operator kind '" + s + "'");
}

/// Operators that produce a fresh set of output channels.
inline bool produces_channels(OpKind k) { return k == OpKind::Conv2d || k == OpKind::Linear; }

struct NodeAttrs {
  std::size_t out_channels = 0;  // conv2d, linear
  std::size_t kernel = 1;        // conv2d, max_pool2d
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool bias = false;
  std::size_t groups = 1;  // conv2d channel grouping; only 1 is supported
  std::size_t group = 0;   // bottleneck: 1-based pruning group index
  double eps = 1e-5;       // batch_norm
  double momentum = 0.1;

  friend bool operator==(const NodeAttrs&, const NodeAttrs&) = default;
};

struct NodeSpec {
  std::string id;
  OpKind op = OpKind::Input;
  NodeAttrs attrs;
  std::vector<std::string> inputs;
  std::map<std::string, Tensor> params;

  friend bool operator==(const NodeSpec&, const NodeSpec&) = default;
};

/// Directed acyclic compute graph with one input node and one output
/// (logits) node. Nodes are stored in topological order: a node may only
/// reference inputs added before it.
class Graph {
 public:
  Graph() = default;
  Graph(std::string name, Shape input_shape, std::size_t num_classes)
      : name_(std::move(name)), input_shape_(std::move(input_shape)), num_classes_(num_classes) {
    if (input_shape_.size() != 3) {
      throw ShapeError("graph: input shape must be (C, H, W), got " + shape_str(input_shape_));
    }
  }

  const std::string& name() const noexcept { return name_; }
  const Shape& input_shape() const noexcept { return input_shape_; }
  std::size_t num_classes() const noexcept { return num_classes_; }
  const std::vector<NodeSpec>& nodes() const noexcept { return nodes_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  nlohmann::json& metadata() noexcept { return metadata_; }
  const nlohmann::json& metadata() const noexcept { return metadata_; }

  /// Parameters frozen: set while bottlenecks are injected.
  bool frozen() const noexcept { return frozen_; }
  void set_frozen(bool f) noexcept { frozen_ = f; }

  const NodeSpec& add(NodeSpec node) {
    if (node.id.empty()) throw GraphError("graph: node id must not be empty");
    if (contains(node.id)) throw GraphError("graph: duplicate node id '" + node.id + "'");
    if (node.op == OpKind::Input) {
      if (!input_id_.empty()) throw GraphError("graph: second input node '" + node.id + "'");
      if (!node.inputs.empty()) throw GraphError("graph: input node takes no inputs");
      input_id_ = node.id;
    }
    for (const auto& in : node.inputs) {
      if (!contains(in)) {
        throw GraphError("graph: node '" + node.id + "' references unknown or later node '" + in +
                         "'");
      }
    }
    index_[node.id] = nodes_.size();
    nodes_.push_back(std::move(node));
    return nodes_.back();
  }

  /// Inserts `node` directly after `after` in topological order.
  void insert_after(const std::string& after, NodeSpec node) {
    const std::size_t pos = index(after) + 1;
    if (contains(node.id)) throw GraphError("graph: duplicate node id '" + node.id + "'");
    nodes_.insert(nodes_.begin() + static_cast<long>(pos), std::move(node));
    reindex();
  }

  /// Removes a single-input node, rewiring its consumers to its input.
  void splice_out(const std::string& id) {
    const std::size_t pos = index(id);
    const NodeSpec& n = nodes_[pos];
    if (n.inputs.size() != 1) throw GraphError("graph: cannot splice out '" + id + "'");
    const std::string source = n.inputs[0];
    for (auto& other : nodes_) {
      for (auto& in : other.inputs) {
        if (in == id) in = source;
      }
    }
    if (output_id_ == id) output_id_ = source;
    nodes_.erase(nodes_.begin() + static_cast<long>(pos));
    reindex();
  }

  /// Rewires every consumer of `from` (other than `except`) to read `to`.
  void redirect_consumers(const std::string& from, const std::string& to,
                          const std::string& except) {
    for (auto& n : nodes_) {
      if (n.id == except) continue;
      for (auto& in : n.inputs) {
        if (in == from) in = to;
      }
    }
    if (output_id_ == from) output_id_ = to;
  }

  bool contains(const std::string& id) const { return index_.count(id) != 0; }

  std::size_t index(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw GraphError("graph: unknown node '" + id + "'");
    return it->second;
  }

  const NodeSpec& node(const std::string& id) const { return nodes_[index(id)]; }
  NodeSpec& node_mut(const std::string& id) { return nodes_[index(id)]; }

  std::vector<std::string> consumers(const std::string& id) const {
    std::vector<std::string> out;
    for (const auto& n : nodes_) {
      if (std::find(n.inputs.begin(), n.inputs.end(), id) != n.inputs.end()) out.push_back(n.id);
    }
    return out;
  }

  const std::string& input_id() const noexcept { return input_id_; }
  const std::string& output_id() const noexcept { return output_id_; }
  void set_output(const std::string& id) {
    index(id);
    output_id_ = id;
  }

  bool has_bottlenecks() const {
    return std::any_of(nodes_.begin(), nodes_.end(),
                       [](const NodeSpec& n) { return n.op == OpKind::Bottleneck; });
  }

  /// Per-sample output shape of every node: (C, H, W) or (C,).
  std::map<std::string, Shape> infer_shapes() const {
    validate_structure();
    std::map<std::string, Shape> shapes;
    auto fail = [](const NodeSpec& n, const std::string& what) {
      throw ShapeError(to_string(n.op) + " '" + n.id + "': " + what);
    };
    for (const auto& n : nodes_) {
      std::vector<Shape> in;
      for (const auto& i : n.inputs) in.push_back(shapes.at(i));
      Shape out;
      switch (n.op) {
        case OpKind::Input: out = input_shape_; break;
        case OpKind::Conv2d: {
          if (in.size() != 1 || in[0].size() != 3) fail(n, "expects one (C,H,W) input");
          if (n.attrs.groups != 1) throw GraphError("conv2d '" + n.id + "': grouped/depthwise convolution is not supported");
          const auto& w = param(n, "weight");
          if (w.rank() != 4 || w.dim(0) != n.attrs.out_channels || w.dim(1) != in[0][0] ||
              w.dim(2) != n.attrs.kernel || w.dim(3) != n.attrs.kernel) {
            fail(n, "weight " + shape_str(w.shape()) + " inconsistent with input " +
                        shape_str(in[0]));
          }
          const auto oh = ops::conv_out_size(in[0][1], n.attrs.kernel, n.attrs.stride, n.attrs.padding);
          const auto ow = ops::conv_out_size(in[0][2], n.attrs.kernel, n.attrs.stride, n.attrs.padding);
          if (oh == 0 || ow == 0) fail(n, "kernel larger than input");
          out = {n.attrs.out_channels, oh, ow};
          break;
        }
        case OpKind::Linear: {
          if (in.size() != 1 || in[0].size() != 1) fail(n, "expects one (C,) input");
          const auto& w = param(n, "weight");
          if (w.rank() != 2 || w.dim(0) != n.attrs.out_channels || w.dim(1) != in[0][0]) {
            fail(n, "weight " + shape_str(w.shape()) + " inconsistent with input " +
                        shape_str(in[0]));
          }
          out = {n.attrs.out_channels};
          break;
        }
        case OpKind::BatchNorm:
        case OpKind::Relu:
        case OpKind::Bottleneck:
          if (in.size() != 1) fail(n, "expects one input");
          out = in[0];
          if (n.op == OpKind::BatchNorm) {
            for (const char* p : {"weight", "bias", "running_mean", "running_var"}) {
              if (param(n, p).numel() != out[0]) fail(n, std::string(p) + " size != channels");
            }
          }
          break;
        case OpKind::MaxPool: {
          if (in.size() != 1 || in[0].size() != 3) fail(n, "expects one (C,H,W) input");
          const auto oh = ops::conv_out_size(in[0][1], n.attrs.kernel, n.attrs.stride, n.attrs.padding);
          const auto ow = ops::conv_out_size(in[0][2], n.attrs.kernel, n.attrs.stride, n.attrs.padding);
          if (oh == 0 || ow == 0) fail(n, "kernel larger than input");
          out = {in[0][0], oh, ow};
          break;
        }
        case OpKind::GlobalAvgPool:
          if (in.size() != 1 || in[0].size() != 3) fail(n, "expects one (C,H,W) input");
          out = {in[0][0]};
          break;
        case OpKind::Add:
          if (in.size() < 2) fail(n, "expects at least two inputs");
          for (const auto& s : in) {
            if (s != in[0]) fail(n, "operand shapes " + shape_str(in[0]) + " and " + shape_str(s) + " differ");
          }
          out = in[0];
          break;
        case OpKind::Concat: {
          if (in.empty()) fail(n, "expects inputs");
          out = in[0];
          for (std::size_t k = 1; k < in.size(); ++k) {
            if (in[k].size() != out.size() ||
                !std::equal(in[k].begin() + 1, in[k].end(), out.begin() + 1)) {
              fail(n, "input " + shape_str(in[k]) + " incompatible with " + shape_str(in[0]));
            }
            out[0] += in[k][0];
          }
          break;
        }
      }
      shapes[n.id] = std::move(out);
    }
    const auto& logits = shapes.at(output_id_);
    if (logits != Shape{num_classes_}) {
      throw ShapeError("graph: output '" + output_id_ + "' has shape " + shape_str(logits) +
                       ", expected (" + std::to_string(num_classes_) + ")");
    }
    return shapes;
  }

  /// Structural and shape validation.
  void validate() const { infer_shapes(); }

  /// Learnable parameter count (weights, biases, batch-norm affine terms).
  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& n : nodes_) {
      for (const auto& [name, t] : n.params) {
        if (name == "running_mean" || name == "running_var") continue;
        total += t.numel();
      }
    }
    return total;
  }

  /// Canonical JSON description of structure and attributes (no tensor data).
  nlohmann::json spec_json() const {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : nodes_) {
      nlohmann::json params = nlohmann::json::object();
      for (const auto& [name, t] : n.params) params[name] = t.shape();
      nodes.push_back({{"id", n.id},
                       {"op", to_string(n.op)},
                       {"inputs", n.inputs},
                       {"attrs",
                        {{"out_channels", n.attrs.out_channels},
                         {"kernel", n.attrs.kernel},
                         {"stride", n.attrs.stride},
                         {"padding", n.attrs.padding},
                         {"bias", n.attrs.bias},
                         {"groups", n.attrs.groups},
                         {"group", n.attrs.group},
                         {"eps", n.attrs.eps},
                         {"momentum", n.attrs.momentum}}},
                       {"params", params}});
    }
    return {{"format", "autobot-graph"},
            {"name", name_},
            {"input_shape", input_shape_},
            {"num_classes", num_classes_},
            {"output", output_id_},
            {"frozen", frozen_},
            {"metadata", metadata_.is_null() ? nlohmann::json::object() : metadata_},
            {"nodes", nodes}};
  }

  /// Rebuilds a graph from spec_json() output and named tensors
  /// ("<node>.<param>").
  static Graph from_spec_json(const nlohmann::json& j, std::map<std::string, Tensor>& tensors) {
    try {
      if (j.at("format") != "autobot-graph") throw FormatError("graph spec: unknown format tag");
      Graph g(j.at("name").get<std::string>(), j.at("input_shape").get<Shape>(),
              j.at("num_classes").get<std::size_t>());
      g.metadata_ = j.value("metadata", nlohmann::json::object());
      g.frozen_ = j.value("frozen", false);
      for (const auto& jn : j.at("nodes")) {
        NodeSpec n;
        n.id = jn.at("id").get<std::string>();
        n.op = op_kind_from_string(jn.at("op").get<std::string>());
        n.inputs = jn.at("inputs").get<std::vector<std::string>>();
        const auto& a = jn.at("attrs");
        n.attrs.out_channels = a.at("out_channels");
        n.attrs.kernel = a.at("kernel");
        n.attrs.stride = a.at("stride");
        n.attrs.padding = a.at("padding");
        n.attrs.bias = a.at("bias");
        n.attrs.groups = a.at("groups");
        n.attrs.group = a.at("group");
        n.attrs.eps = a.at("eps");
        n.attrs.momentum = a.at("momentum");
        for (const auto& [pname, pshape] : jn.at("params").items()) {
          const std::string key = n.id + "." + pname;
          auto it = tensors.find(key);
          if (it == tensors.end()) throw FormatError("graph spec: missing tensor '" + key + "'");
          if (it->second.shape() != pshape.get<Shape>()) {
            throw FormatError("graph spec: tensor '" + key + "' has shape " +
                              shape_str(it->second.shape()) + ", spec says " + pshape.dump());
          }
          n.params[pname] = std::move(it->second);
          tensors.erase(it);
        }
        g.add(std::move(n));
      }
      g.set_output(j.at("output").get<std::string>());
      return g;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("graph spec: ") + e.what());
    }
  }

  /// Same nodes, attributes, wiring and bit-equal parameters.
  friend bool operator==(const Graph& a, const Graph& b) {
    return a.name_ == b.name_ && a.input_shape_ == b.input_shape_ &&
           a.num_classes_ == b.num_classes_ && a.nodes_ == b.nodes_ &&
           a.output_id_ == b.output_id_;
  }

 private:
  static const Tensor& param(const NodeSpec& n, const std::string& name) {
    auto it = n.params.find(name);
    if (it == n.params.end()) {
      throw GraphError(to_string(n.op) + " '" + n.id + "': missing parameter '" + name + "'");
    }
    return it->second;
  }

  void validate_structure() const {
    if (input_id_.empty()) throw GraphError("graph: no input node");
    if (output_id_.empty()) throw GraphError("graph: output node not set");
  }

  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < nodes_.size(); ++i) index_[nodes_[i].id] = i;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      for (const auto& in : nodes_[i].inputs) {
        if (index_.at(in) >= i) throw GraphError("graph: node order broken at '" + nodes_[i].id + "'");
      }
    }
  }

  std::string name_;
  Shape input_shape_;
  std::size_t num_classes_ = 0;
  std::vector<NodeSpec> nodes_;
  std::map<std::string, std::size_t> index_;
  std::string input_id_;
  std::string output_id_;
  bool frozen_ = false;
  nlohmann::json metadata_ = nlohmann::json::object();
};

}  // namespace autobot
