#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "autobot/error.hpp"
#include "autobot/graph.hpp"

namespace autobot {

struct ModelConfig {
  /// vgg_tiny | res_tiny | branch_tiny | vgg16_cifar
  std::string arch = "vgg_tiny";
  /// Per-layer widths; empty selects the architecture default.
  std::vector<std::size_t> widths;
  std::size_t num_classes = 10;
  Shape input_shape{1, 28, 28};
  std::uint64_t seed = 0;
};

inline std::vector<std::size_t> default_widths(const std::string& arch) {
  if (arch == "vgg_tiny") return {8, 16, 32};
  if (arch == "res_tiny") return {8, 16};
  if (arch == "branch_tiny") return {8, 4, 6, 16};
  if (arch == "vgg16_cifar") return {64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512};
  throw ValueError("unknown architecture '" + arch + "'");
}

inline std::vector<std::string> zoo_architectures() {
  return {"vgg_tiny", "res_tiny", "branch_tiny", "vgg16_cifar"};
}

namespace detail {

// Appends layers to a graph, initializing weights He-uniform under one RNG.
class GraphBuilder {
 public:
  GraphBuilder(Graph& g, std::uint64_t seed) : g_(g), rng_(seed) {}

  std::string input() {
    g_.add({.id = "input", .op = OpKind::Input});
    return "input";
  }

  std::string conv(const std::string& id, const std::string& in, std::size_t out,
                   std::size_t kernel, std::size_t stride, std::size_t padding, bool bias) {
    const std::size_t cin = channels(in);
    NodeSpec n{.id = id, .op = OpKind::Conv2d, .inputs = {in}};
    n.attrs.out_channels = out;
    n.attrs.kernel = kernel;
    n.attrs.stride = stride;
    n.attrs.padding = padding;
    n.attrs.bias = bias;
    n.params["weight"] = he_uniform({out, cin, kernel, kernel}, cin * kernel * kernel);
    if (bias) n.params["bias"] = Tensor({out});
    add(std::move(n), out);
    return id;
  }

  std::string linear(const std::string& id, const std::string& in, std::size_t out, bool bias) {
    const std::size_t cin = channels(in);
    NodeSpec n{.id = id, .op = OpKind::Linear, .inputs = {in}};
    n.attrs.out_channels = out;
    n.attrs.bias = bias;
    n.params["weight"] = he_uniform({out, cin}, cin);
    if (bias) n.params["bias"] = Tensor({out});
    add(std::move(n), out);
    return id;
  }

  std::string bn(const std::string& id, const std::string& in) {
    const std::size_t c = channels(in);
    NodeSpec n{.id = id, .op = OpKind::BatchNorm, .inputs = {in}};
    n.params["weight"] = Tensor({c}, 1.0f);
    n.params["bias"] = Tensor({c});
    n.params["running_mean"] = Tensor({c});
    n.params["running_var"] = Tensor({c}, 1.0f);
    add(std::move(n), c);
    return id;
  }

  std::string relu(const std::string& id, const std::string& in) {
    add({.id = id, .op = OpKind::Relu, .inputs = {in}}, channels(in));
    return id;
  }

  std::string max_pool(const std::string& id, const std::string& in, std::size_t kernel,
                       std::size_t stride, std::size_t padding = 0) {
    NodeSpec n{.id = id, .op = OpKind::MaxPool, .inputs = {in}};
    n.attrs.kernel = kernel;
    n.attrs.stride = stride;
    n.attrs.padding = padding;
    add(std::move(n), channels(in));
    return id;
  }

  std::string gap(const std::string& id, const std::string& in) {
    add({.id = id, .op = OpKind::GlobalAvgPool, .inputs = {in}}, channels(in));
    return id;
  }

  std::string add_op(const std::string& id, std::vector<std::string> ins) {
    const std::size_t c = channels(ins[0]);
    add({.id = id, .op = OpKind::Add, .inputs = std::move(ins)}, c);
    return id;
  }

  std::string concat(const std::string& id, std::vector<std::string> ins) {
    std::size_t c = 0;
    for (const auto& i : ins) c += channels(i);
    add({.id = id, .op = OpKind::Concat, .inputs = std::move(ins)}, c);
    return id;
  }

  std::string conv_bn_relu(const std::string& prefix, const std::string& in, std::size_t out,
                           std::size_t kernel, std::size_t stride) {
    auto c = conv(prefix + ".conv", in, out, kernel, stride, kernel / 2, false);
    return relu(prefix + ".relu", bn(prefix + ".bn", c));
  }

  std::size_t channels(const std::string& id) const {
    if (id == "input") return g_.input_shape()[0];
    return channels_.at(id);
  }

 private:
  void add(NodeSpec n, std::size_t out_channels) {
    channels_[n.id] = out_channels;
    g_.add(std::move(n));
  }

  Tensor he_uniform(Shape shape, std::size_t fan_in) {
    const float bound = static_cast<float>(std::sqrt(6.0 / double(fan_in)));
    return Tensor::uniform(std::move(shape), -bound, bound, rng_);
  }

  Graph& g_;
  std::mt19937_64 rng_;
  std::map<std::string, std::size_t> channels_;
};

}  // namespace detail

/// Builds a randomly initialized model from the zoo.
///
/// - vgg_tiny: one conv-bn-relu-maxpool stage per width, then global average
///   pooling and a linear classifier.
/// - res_tiny: a stem conv, then one residual block per width; the first
///   block uses an identity shortcut, later blocks a strided 1x1 projection.
/// - branch_tiny: widths {stem, branch1, branch2, head}; an inception-style
///   module concatenates a 1x1 branch and a 1x1 -> 3x3 branch.
/// - vgg16_cifar: the 13-conv CIFAR VGG-16 with a 512-512-classes head.
inline Graph build_model(const ModelConfig& cfg) {
  const auto widths = cfg.widths.empty() ? default_widths(cfg.arch) : cfg.widths;
  for (auto w : widths) {
    if (w < 2) throw ValueError("build_model: widths must be >= 2 channels");
  }
  if (cfg.num_classes < 2) throw ValueError("build_model: need at least two classes");
  Graph g(cfg.arch, cfg.input_shape, cfg.num_classes);
  g.metadata()["arch"] = cfg.arch;
  g.metadata()["widths"] = widths;
  g.metadata()["seed"] = cfg.seed;
  detail::GraphBuilder b(g, cfg.seed);
  std::string x = b.input();

  if (cfg.arch == "vgg_tiny") {
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::string p = "stage" + std::to_string(i + 1);
      x = b.conv_bn_relu(p, x, widths[i], 3, 1);
      x = b.max_pool(p + ".pool", x, 2, 2);
    }
  } else if (cfg.arch == "res_tiny") {
    x = b.conv_bn_relu("stem", x, widths[0], 3, 1);
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::string p = "block" + std::to_string(i + 1);
      const bool project = i > 0;
      const std::size_t stride = project ? 2 : 1;
      auto r = b.conv_bn_relu(p + ".a", x, widths[i], 3, stride);
      r = b.bn(p + ".b.bn", b.conv(p + ".b.conv", r, widths[i], 3, 1, 1, false));
      std::string shortcut = x;
      if (project) {
        shortcut = b.bn(p + ".proj.bn", b.conv(p + ".proj.conv", x, widths[i], 1, 2, 0, false));
      }
      x = b.relu(p + ".relu", b.add_op(p + ".add", {shortcut, r}));
    }
  } else if (cfg.arch == "branch_tiny") {
    if (widths.size() != 4) throw ValueError("branch_tiny: widths must be {stem, branch1, branch2, head}");
    x = b.conv_bn_relu("stem", x, widths[0], 3, 1);
    x = b.max_pool("stem.pool", x, 2, 2);
    auto b1 = b.conv_bn_relu("branch1", x, widths[1], 1, 1);
    auto b2 = b.conv_bn_relu("branch2.reduce", x, widths[2], 1, 1);
    b2 = b.conv_bn_relu("branch2", b2, widths[2], 3, 1);
    x = b.concat("mix", {b1, b2});
    x = b.conv_bn_relu("head", x, widths[3], 3, 1);
    x = b.max_pool("head.pool", x, 2, 2);
  } else if (cfg.arch == "vgg16_cifar") {
    if (widths.size() != 13) throw ValueError("vgg16_cifar: needs 13 conv widths");
    const std::vector<std::size_t> pool_after{1, 3, 6, 9};
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::string p = "conv" + std::to_string(i + 1);
      auto c = b.conv(p, x, widths[i], 3, 1, 1, true);
      x = b.relu(p + ".relu", b.bn(p + ".bn", c));
      if (std::find(pool_after.begin(), pool_after.end(), i) != pool_after.end()) {
        x = b.max_pool(p + ".pool", x, 2, 2);
      }
    }
    x = b.gap("gap", x);
    x = b.linear("fc1", x, 512, true);
    x = b.relu("fc1.relu", b.bn("fc1.bn", x));
    x = b.linear("fc2", x, cfg.num_classes, true);
    g.set_output(x);
    g.validate();
    return g;
  } else {
    throw ValueError("unknown architecture '" + cfg.arch + "'");
  }
  x = b.gap("gap", x);
  x = b.linear("fc", x, cfg.num_classes, true);
  g.set_output(x);
  g.validate();
  return g;
}

}  // namespace autobot
