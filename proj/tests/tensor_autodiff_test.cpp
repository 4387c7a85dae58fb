#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "autobot/autodiff.hpp"
#include "autobot/gradcheck.hpp"
#include "autobot/ops.hpp"
#include "autobot/tensor.hpp"

using namespace autobot;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor::uniform(std::move(shape), -1.0f, 1.0f, rng);
}

}  // namespace

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  Tensor t({2, 3}, 1.5f);
  EXPECT_EQ(t.numel(), 6u);
}

TEST(Ops, ReluDefinition) {
  Tape<float> tape;
  Var x = tape.leaf(Tensor({3}, std::vector<float>{-1, 0, 2}));
  Var y = ops::relu(tape, x);
  EXPECT_EQ(tape.value(y), Tensor({3}, std::vector<float>{0, 0, 2}));
}

TEST(Ops, IdentityKernelConvLeavesMapUnchanged) {
  Tape<float> tape;
  Tensor img = random_tensor({1, 1, 3, 3}, 3);
  Var x = tape.leaf(img);
  Var w = tape.leaf(Tensor({1, 1, 1, 1}, 1.0f));
  Var y = ops::conv2d(tape, x, w, Var{}, {.stride = 1, .padding = 0});
  EXPECT_EQ(tape.value(y), img);
}

TEST(Ops, ConvOutputShapeConvention) {
  Tape<float> tape;
  Var x = tape.leaf(random_tensor({2, 3, 7, 6}, 1));
  Var w = tape.leaf(random_tensor({5, 3, 3, 3}, 2));
  Var y = ops::conv2d(tape, x, w, Var{}, {.stride = 2, .padding = 1});
  // floor((in + 2p - k) / s) + 1
  EXPECT_EQ(tape.value(y).shape(), (Shape{2, 5, 4, 3}));
}

TEST(Ops, ConvShapeMismatchNamesOperator) {
  Tape<float> tape;
  Var x = tape.leaf(random_tensor({1, 3, 5, 5}, 1));
  Var w = tape.leaf(random_tensor({4, 2, 3, 3}, 2));
  try {
    ops::conv2d(tape, x, w, Var{}, {});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("conv2d"), std::string::npos);
    EXPECT_NE(msg.find("3"), std::string::npos);
    EXPECT_NE(msg.find("2"), std::string::npos);
  }
  EXPECT_THROW(ops::conv2d(tape, x, tape.leaf(random_tensor({4, 3, 3, 3}, 5)), Var{},
                           {.stride = 0, .padding = 0}),
               ShapeError);
}

TEST(Ops, NonFiniteInputRejected) {
  Tape<float> tape;
  Var x = tape.leaf(Tensor({2}, std::vector<float>{1.0f, std::numeric_limits<float>::quiet_NaN()}));
  EXPECT_THROW(ops::relu(tape, x), ValueError);
}

TEST(Ops, ConcatChannelShape) {
  Tape<float> tape;
  Var a = tape.leaf(Tensor({1, 2, 4, 4}));
  Var b = tape.leaf(Tensor({1, 3, 4, 4}));
  EXPECT_EQ(tape.value(ops::concat_channels(tape, {a, b})).shape(), (Shape{1, 5, 4, 4}));
  Var c = tape.leaf(Tensor({1, 3, 5, 4}));
  EXPECT_THROW(ops::concat_channels(tape, {a, c}), ShapeError);
}

TEST(Ops, MaxPoolTiesTakeFirstIndex) {
  Tape<float> tape;
  Var x = tape.leaf(Tensor({1, 1, 2, 2}, 1.0f), true);
  Var y = ops::max_pool2d(tape, x, {.kernel = 2, .stride = 2, .padding = 0});
  tape.backward(ops::sum(tape, y));
  EXPECT_EQ(tape.grad(x), Tensor({1, 1, 2, 2}, std::vector<float>{1, 0, 0, 0}));
}

TEST(Ops, ChannelMulWithOnesIsExactIdentity) {
  Tape<float> tape;
  Tensor act = random_tensor({2, 4, 3, 3}, 9);
  Var x = tape.leaf(act);
  Var lam = tape.leaf(Tensor({4}, 1.0f));
  EXPECT_EQ(tape.value(ops::channel_mul(tape, x, lam)), act);
  EXPECT_THROW(ops::channel_mul(tape, x, tape.leaf(Tensor({3}, 1.0f))), ShapeError);
}

TEST(Ops, ChannelMulHalvesValues) {
  Tape<float> tape;
  Var x = tape.leaf(Tensor({1, 1, 2}, std::vector<float>{2, 4}));
  Var lam = tape.leaf(Tensor({1}, 0.5f));
  EXPECT_EQ(tape.value(ops::channel_mul(tape, x, lam)), Tensor({1, 1, 2}, std::vector<float>{1, 2}));
}

TEST(Ops, CrossEntropyUniformLogits) {
  Tape<float> tape;
  Var x = tape.leaf(Tensor({3, 10}, 0.25f));
  std::vector<int> labels{0, 4, 9};
  Var l = ops::cross_entropy(tape, x, std::span<const int>(labels));
  EXPECT_NEAR(tape.value(l).item(), std::log(10.0), 1e-6);
}

TEST(Ops, CrossEntropySaturated) {
  Tape<float> tape;
  Var x = tape.leaf(Tensor({1, 2}, std::vector<float>{1000, 0}));
  std::vector<int> labels{0};
  EXPECT_NEAR(tape.value(ops::cross_entropy(tape, x, std::span<const int>(labels))).item(), 0.0,
              1e-12);
}

TEST(Ops, CrossEntropyMatchesLogSumExpOracle) {
  Tensor logits = random_tensor({4, 3}, 21);
  for (auto& v : logits.data()) v *= 3.0f;
  std::vector<int> labels{2, 0, 1, 1};
  long double expected = 0.0L;
  for (std::size_t n = 0; n < 4; ++n) {
    long double z = 0.0L;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(static_cast<long double>(logits[n * 3 + c]));
    expected += std::log(z) - static_cast<long double>(logits[n * 3 + labels[n]]);
  }
  expected /= 4.0L;
  Tape<float> tape;
  Var l = ops::cross_entropy(tape, tape.leaf(logits), std::span<const int>(labels));
  EXPECT_NEAR(tape.value(l).item(), static_cast<double>(expected), 1e-6);
}

TEST(Ops, CrossEntropyLabelOutOfRange) {
  Tape<float> tape;
  Var x = tape.leaf(Tensor({1, 3}));
  std::vector<int> labels{3};
  EXPECT_THROW(ops::cross_entropy(tape, x, std::span<const int>(labels)), ValueError);
  std::vector<int> negative{-1};
  EXPECT_THROW(ops::cross_entropy(tape, x, std::span<const int>(negative)), ValueError);
}

TEST(Autodiff, FrozenTensorGetsNoGradient) {
  Tape<float> tape;
  Tensor act({1, 3, 1, 1}, std::vector<float>{0.5f, -2.0f, 3.0f});
  Var x = tape.leaf(act, false);
  Var lam = tape.leaf(Tensor({3}, 0.3f), true);
  Var loss = ops::sum(tape, ops::channel_mul(tape, x, lam));
  tape.backward(loss);
  EXPECT_EQ(tape.grad(lam), Tensor({3}, std::vector<float>{0.5f, -2.0f, 3.0f}));
  EXPECT_FALSE(tape.has_grad(x));
}

TEST(Autodiff, SigmoidDerivativeAtZero) {
  Tape<float> tape;
  Var psi = tape.leaf(Tensor({1}, 0.0f), true);
  Var loss = ops::sigmoid(tape, psi);
  tape.backward(loss);
  EXPECT_FLOAT_EQ(tape.grad(psi)[0], 0.25f);
}

TEST(Autodiff, BackwardWithoutRecordedTapeFails) {
  Tape<float> tape;
  EXPECT_THROW(tape.backward(Var{}), ValueError);
  Var leaf = tape.leaf(Tensor({1}, 2.0f), true);
  EXPECT_THROW(tape.backward(leaf), ValueError);
  Var v = ops::relu(tape, tape.leaf(Tensor({2}, 1.0f), true));
  EXPECT_THROW(tape.backward(v), ShapeError);
}

TEST(Autodiff, ForwardIsDeterministic) {
  auto run = [] {
    Tape<float> tape;
    Var x = tape.leaf(random_tensor({2, 3, 6, 6}, 4));
    Var w = tape.leaf(random_tensor({4, 3, 3, 3}, 5));
    Var y = ops::relu(tape, ops::conv2d(tape, x, w, Var{}, {.stride = 1, .padding = 1}));
    return tape.value(ops::global_avg_pool(tape, y));
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, LinearSeedZero) {
  EXPECT_LT(grad_check(GradOp::Linear, {}, 0).max_relative_error, 1e-3);
}

TEST(GradCheck, ConvSeedOne) {
  EXPECT_LT(grad_check(GradOp::Conv2d, {2, 3, 5, 5}, 1).max_relative_error, 1e-3);
}

TEST(GradCheck, IdentityIsExact) {
  EXPECT_LT(grad_check(GradOp::Identity, {}, 0).max_relative_error, 1e-9);
}

TEST(GradCheck, EveryPrimitiveFewSeeds) {
  for (GradOp op : all_grad_ops()) {
    for (std::uint64_t seed = 100; seed < 103; ++seed) {
      auto r = grad_check(op, {}, seed);
      EXPECT_TRUE(r.differentiable) << to_string(op);
      EXPECT_LT(r.max_relative_error, 1e-3) << to_string(op) << " seed " << seed;
    }
  }
}

TEST(GradCheck, BatchNormRankTwo) {
  EXPECT_LT(grad_check(GradOp::BatchNormTrain, {6, 4}, 3).max_relative_error, 1e-3);
}
