#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "autobot/autodiff.hpp"
#include "autobot/ops.hpp"

namespace autobot {

enum class GradOp {
  Identity,
  Conv2d,
  Conv2dStrided,
  Linear,
  Relu,
  MaxPool,
  GlobalAvgPool,
  BatchNormTrain,
  BatchNormInfer,
  Add,
  Concat,
  ChannelMul,
  Softmax,
  CrossEntropy,
  Sigmoid,
};

inline std::string to_string(GradOp op) {
  switch (op) {
    case GradOp::Identity: return "identity";
    case GradOp::Conv2d: return "conv2d";
    case GradOp::Conv2dStrided: return "conv2d_strided";
    case GradOp::Linear: return "linear";
    case GradOp::Relu: return "relu";
    case GradOp::MaxPool: return "max_pool2d";
    case GradOp::GlobalAvgPool: return "global_avg_pool";
    case GradOp::BatchNormTrain: return "batch_norm_train";
    case GradOp::BatchNormInfer: return "batch_norm_infer";
    case GradOp::Add: return "add";
    case GradOp::Concat: return "concat";
    case GradOp::ChannelMul: return "channel_mul";
    case GradOp::Softmax: return "softmax";
    case GradOp::CrossEntropy: return "cross_entropy";
    case GradOp::Sigmoid: return "sigmoid";
  }
  return "?";
}

inline std::vector<GradOp> all_grad_ops() {
  return {GradOp::Identity,      GradOp::Conv2d,         GradOp::Conv2dStrided,
          GradOp::Linear,        GradOp::Relu,           GradOp::MaxPool,
          GradOp::GlobalAvgPool, GradOp::BatchNormTrain, GradOp::BatchNormInfer,
          GradOp::Add,           GradOp::Concat,         GradOp::ChannelMul,
          GradOp::Softmax,       GradOp::CrossEntropy,   GradOp::Sigmoid};
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  int resamples = 0;
  /// False when every resample still hit a non-differentiable point.
  bool differentiable = true;
};

/// |a - n| / max(|a|, |n|, 1e-8)
inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {

using DTensor = BasicTensor<double>;

// One sampled instance of an operator: its differentiable inputs and a
// function building the output on a tape from leaf variables.
struct GradCase {
  std::vector<DTensor> inputs;
  std::function<Var(Tape<double>&, const std::vector<Var>&)> build;
};

inline Shape with_default(const Shape& s, Shape fallback) { return s.empty() ? fallback : s; }

inline GradCase make_case(GradOp op, const Shape& requested, std::mt19937_64& rng) {
  auto rnd = [&](Shape s, double lo = -1.0, double hi = 1.0) {
    return DTensor::uniform(std::move(s), lo, hi, rng);
  };
  GradCase gc;
  switch (op) {
    case GradOp::Identity:
    case GradOp::Relu:
    case GradOp::Sigmoid: {
      gc.inputs = {rnd(with_default(requested, {2, 3, 4}), -2.0, 2.0)};
      gc.build = [op](Tape<double>& t, const std::vector<Var>& v) {
        if (op == GradOp::Identity) return ops::identity(t, v[0]);
        if (op == GradOp::Relu) return ops::relu(t, v[0]);
        return ops::sigmoid(t, v[0]);
      };
      break;
    }
    case GradOp::Conv2d:
    case GradOp::Conv2dStrided: {
      Shape xs = with_default(requested, {2, 3, 5, 5});
      const bool strided = op == GradOp::Conv2dStrided;
      gc.inputs = {rnd(xs), rnd({4, xs[1], 3, 3}), rnd({4})};
      gc.build = [strided](Tape<double>& t, const std::vector<Var>& v) {
        return ops::conv2d(t, v[0], v[1], v[2],
                           {.stride = strided ? 2u : 1u, .padding = 1});
      };
      break;
    }
    case GradOp::Linear: {
      Shape xs = with_default(requested, {3, 5});
      gc.inputs = {rnd(xs), rnd({4, xs[1]}), rnd({4})};
      gc.build = [](Tape<double>& t, const std::vector<Var>& v) {
        return ops::linear(t, v[0], v[1], v[2]);
      };
      break;
    }
    case GradOp::MaxPool: {
      // Well separated values so no window holds a near-tie.
      DTensor x(with_default(requested, {2, 2, 5, 5}));
      std::vector<std::size_t> perm(x.numel());
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      std::uniform_real_distribution<double> jitter(-0.005, 0.005);
      for (std::size_t i = 0; i < x.numel(); ++i) {
        x[i] = (double(perm[i]) - double(x.numel()) / 2) * 0.05 + jitter(rng);
      }
      gc.inputs = {std::move(x)};
      gc.build = [](Tape<double>& t, const std::vector<Var>& v) {
        return ops::max_pool2d(t, v[0], {.kernel = 3, .stride = 2, .padding = 1});
      };
      break;
    }
    case GradOp::GlobalAvgPool: {
      gc.inputs = {rnd(with_default(requested, {2, 3, 4, 4}))};
      gc.build = [](Tape<double>& t, const std::vector<Var>& v) {
        return ops::global_avg_pool(t, v[0]);
      };
      break;
    }
    case GradOp::BatchNormTrain:
    case GradOp::BatchNormInfer: {
      Shape xs = with_default(requested, {4, 3, 3, 3});
      const std::size_t c = xs[1];
      const bool training = op == GradOp::BatchNormTrain;
      auto mean = std::make_shared<DTensor>(rnd({c}, -0.5, 0.5));
      auto var = std::make_shared<DTensor>(rnd({c}, 0.5, 1.5));
      gc.inputs = {rnd(xs, -2.0, 2.0), rnd({c}, 0.5, 1.5), rnd({c})};
      gc.build = [training, mean, var](Tape<double>& t, const std::vector<Var>& v) {
        // Running statistics are copied so finite-difference evaluations do
        // not see updates from previous evaluations.
        auto m = *mean;
        auto s = *var;
        return ops::batch_norm(t, v[0], v[1], v[2], {&m, &s},
                               {.training = training, .momentum = 0.1, .eps = 1e-5});
      };
      break;
    }
    case GradOp::Add: {
      Shape xs = with_default(requested, {2, 3, 4});
      gc.inputs = {rnd(xs), rnd(xs)};
      gc.build = [](Tape<double>& t, const std::vector<Var>& v) { return ops::add(t, v[0], v[1]); };
      break;
    }
    case GradOp::Concat: {
      Shape a = with_default(requested, {2, 2, 3, 3});
      Shape b = a;
      b[1] = a[1] + 1;
      gc.inputs = {rnd(a), rnd(b)};
      gc.build = [](Tape<double>& t, const std::vector<Var>& v) {
        return ops::concat_channels(t, {v[0], v[1]});
      };
      break;
    }
    case GradOp::ChannelMul: {
      Shape xs = with_default(requested, {2, 3, 4, 4});
      gc.inputs = {rnd(xs), rnd({xs[1]}, 0.0, 1.0)};
      gc.build = [](Tape<double>& t, const std::vector<Var>& v) {
        return ops::channel_mul(t, v[0], v[1]);
      };
      break;
    }
    case GradOp::Softmax: {
      gc.inputs = {rnd(with_default(requested, {3, 4}), -2.0, 2.0)};
      gc.build = [](Tape<double>& t, const std::vector<Var>& v) { return ops::softmax(t, v[0]); };
      break;
    }
    case GradOp::CrossEntropy: {
      Shape xs = with_default(requested, {4, 3});
      std::vector<int> labels(xs[0]);
      std::uniform_int_distribution<int> pick(0, int(xs[1]) - 1);
      for (auto& l : labels) l = pick(rng);
      gc.inputs = {rnd(xs, -2.0, 2.0)};
      gc.build = [labels](Tape<double>& t, const std::vector<Var>& v) {
        return ops::cross_entropy(t, v[0], std::span<const int>(labels));
      };
      break;
    }
  }
  return gc;
}

// Relu inputs within `margin` of zero are not differentiable at
// finite-difference resolution. Max-pool cases are sampled tie-free.
inline bool near_kink(GradOp op, const GradCase& gc, double margin) {
  if (op != GradOp::Relu) return false;
  for (double v : gc.inputs[0].data()) {
    if (std::abs(v) < margin) return true;
  }
  return false;
}

}  // namespace detail

/// Compares reverse-mode gradients of `op` against central finite
/// differences (step h) on randomly sampled inputs. The scalar objective is
/// a random projection of the operator output. Evaluated in double
/// precision, so the comparison isolates the backward formulas from f32
/// rounding.
inline GradCheckResult grad_check(GradOp op, const Shape& shape, std::uint64_t seed,
                                  double h = 1e-3, int max_resamples = 20) {
  std::mt19937_64 rng(seed);
  GradCheckResult result;
  detail::GradCase gc = detail::make_case(op, shape, rng);
  while (detail::near_kink(op, gc, 4 * h)) {
    if (result.resamples == max_resamples) {
      result.differentiable = false;
      break;
    }
    ++result.resamples;
    gc = detail::make_case(op, shape, rng);
  }

  auto evaluate = [&](const std::vector<detail::DTensor>& inputs, bool grads,
                      const detail::DTensor* projection,
                      std::vector<detail::DTensor>* out_grads) -> std::pair<double, detail::DTensor> {
    Tape<double> tape;
    std::vector<Var> leaves;
    for (const auto& in : inputs) leaves.push_back(tape.leaf(in, grads));
    Var out = gc.build(tape, leaves);
    detail::DTensor w = projection ? *projection : detail::DTensor(tape.value(out).shape(), 1.0);
    Var loss = ops::dot_const(tape, out, w);
    if (grads) {
      tape.backward(loss);
      for (Var v : leaves) out_grads->push_back(tape.grad(v));
    }
    return {tape.value(loss).item(), tape.value(out)};
  };

  // Output shape first, then the projection weights.
  auto [unused, out_value] = evaluate(gc.inputs, false, nullptr, nullptr);
  (void)unused;
  const auto projection = detail::DTensor::uniform(out_value.shape(), -1.0, 1.0, rng);

  std::vector<detail::DTensor> analytic;
  evaluate(gc.inputs, true, &projection, &analytic);

  for (std::size_t k = 0; k < gc.inputs.size(); ++k) {
    for (std::size_t i = 0; i < gc.inputs[k].numel(); ++i) {
      auto plus = gc.inputs;
      auto minus = gc.inputs;
      plus[k][i] += h;
      minus[k][i] -= h;
      const double fp = evaluate(plus, false, &projection, nullptr).first;
      const double fm = evaluate(minus, false, &projection, nullptr).first;
      const double numeric = (fp - fm) / (2 * h);
      result.max_relative_error =
          std::max(result.max_relative_error, relative_error(analytic[k][i], numeric));
    }
  }
  return result;
}

}  // namespace autobot
