#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "autobot/bottleneck.hpp"
#include "autobot/flops.hpp"
#include "autobot/mask_search.hpp"
#include "autobot/prune.hpp"
#include "autobot/zoo.hpp"

namespace autobot {
namespace {

Graph model(const std::string& arch) {
  ModelConfig cfg;
  cfg.arch = arch;
  return build_model(cfg);
}

// One group of 4 channels where every channel costs the same.
Graph four_channel_model() {
  Graph g("four", {1, 1, 1}, 2);
  detail::GraphBuilder b(g, 0);
  auto x = b.conv("c", b.input(), 4, 1, 1, 0, false);
  b.linear("fc", b.gap("gap", x), 2, false);
  g.set_output("fc");
  return g;
}

GateValues random_gates(const FlopsModel& m, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.001f, 0.999f);
  GateValues gates;
  for (auto c : m.group_channels()) {
    std::vector<float> v(c);
    for (auto& x : v) x = u(rng);
    gates.push_back(v);
  }
  return gates;
}

PruningMask random_mask(const std::vector<PruningGroup>& groups, std::mt19937_64& rng, double keep_p) {
  std::bernoulli_distribution keep(keep_p);
  PruningMask m;
  for (const auto& g : groups) {
    std::vector<bool> k(g.channels);
    for (std::size_t i = 0; i < k.size(); ++i) k[i] = keep(rng);
    k[rng() % k.size()] = true;
    m.keep.push_back(k);
  }
  return m;
}

TEST(Flops, AllOnesEqualsExactTotal) {
  for (const auto& arch : {"vgg_tiny", "res_tiny", "branch_tiny"}) {
    auto g = model(arch);
    auto m = FlopsModel::from_graph(g);
    auto groups = identify_groups(g);
    EXPECT_EQ(m.weighted(PruningMask::all_ones(groups)), double(exact_flops(g).total)) << arch;
    EXPECT_EQ(m.total(), double(exact_flops(g).total)) << arch;
  }
}

TEST(Flops, SingleConvByHand) {
  // 1 -> 4 channels, 3x3 kernel on 5x5 with padding 1, no bias: 4*1*25*9
  Graph g("c", {1, 5, 5}, 2);
  detail::GraphBuilder b(g, 0);
  auto x = b.conv("c", b.input(), 4, 3, 1, 1, false);
  b.linear("fc", b.gap("gap", x), 2, true);
  g.set_output("fc");
  auto r = exact_flops(g);
  EXPECT_EQ(r.ops[0].flops, 4u * 25 * 9);
  EXPECT_EQ(r.ops[1].flops, 4u * 25);       // gap
  EXPECT_EQ(r.ops[2].flops, 4u * 2 + 2);    // linear with bias
  auto m = FlopsModel::from_graph(g);
  EXPECT_EQ(m.weighted(std::vector<double>{2.0}), 2.0 * 25 * 9 + 2.0 * 25 + 2.0 * 2 + 2);
}

TEST(Flops, RandomMasksMatchPrunedGraph) {
  std::mt19937_64 rng(11);
  for (const auto& arch : {"vgg_tiny", "res_tiny", "branch_tiny"}) {
    auto g = model(arch);
    auto m = FlopsModel::from_graph(g);
    auto groups = identify_groups(g);
    for (int i = 0; i < 10; ++i) {
      auto mask = random_mask(groups, rng, 0.5);
      const double w = m.weighted(mask);
      const double e = double(exact_flops(prune(g, mask)).total);
      EXPECT_NEAR(w, e, 1e-9 * e) << arch;
    }
  }
}

TEST(Flops, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (const auto& arch : {"vgg_tiny", "res_tiny", "branch_tiny"}) {
    auto m = FlopsModel::from_graph(model(arch));
    auto s = m.sums(random_gates(m, rng));
    auto d = m.gradient(s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      auto hi = s, lo = s;
      hi[i] += 1e-3;
      lo[i] -= 1e-3;
      const double fd = (m.weighted(hi) - m.weighted(lo)) / 2e-3;
      EXPECT_NEAR(d[i], fd, 1e-6 * std::abs(fd)) << arch << " group " << i + 1;
    }
  }
}

TEST(Flops, NegativeSumsRejected) {
  auto m = FlopsModel::from_graph(model("vgg_tiny"));
  EXPECT_THROW(m.weighted(std::vector<double>{-1.0, 1.0, 1.0}), ValueError);
}

TEST(Flops, LossAnchors) {
  const double full = 1000.0, target = 400.0;
  EXPECT_EQ(flops_loss(target, target, full), 0.0);
  EXPECT_EQ(flops_loss(full, target, full), 1.0);
  EXPECT_EQ(flops_loss(target / 2, target, full), 0.5);
  EXPECT_THROW(flops_loss(1.0, full, full), ValueError);
  EXPECT_THROW(flops_loss(1.0, 0.0, full), ValueError);
}

TEST(Flops, LossTapeGradientThroughSigmoid) {
  auto g = model("vgg_tiny");
  auto m = FlopsModel::from_graph(g);
  auto b = Bottlenecks::init(identify_groups(g));
  Tape<float> tape;
  auto vars = gate_vars(tape, b);
  const double target = 0.5 * m.total();
  tape.backward(flops_loss_var(tape, m, vars.gates, target));
  const auto ds = m.gradient(m.sums(b.gates()));
  const double lam = kInitialGate;
  for (std::size_t i = 0; i < b.psi.size(); ++i) {
    const double expect = ds[i] / (m.total() - target) * lam * (1 - lam);
    EXPECT_NEAR(tape.grad(vars.psi[i])[0], expect, 1e-4 * std::abs(expect));
  }
}

TEST(Flops, Vgg16CifarNearReference) {
  ModelConfig cfg{.arch = "vgg16_cifar", .input_shape = {3, 32, 32}};
  const double total = double(exact_flops(build_model(cfg)).total);
  EXPECT_LT(std::abs(total - 314.29e6) / 314.29e6, 0.02);
}

TEST(MaskSearch, StrictThreshold) {
  auto m = threshold_mask({{0.5f, 0.6f, 0.5f}}, 0.5);
  EXPECT_EQ(m.keep[0], (std::vector<bool>{false, true, false}));
}

TEST(MaskSearch, EmptyGroupKeepsLargestGate) {
  auto m = threshold_mask({{0.2f, 0.3f, 0.3f, 0.1f}}, 0.9);
  EXPECT_EQ(m.keep[0], (std::vector<bool>{false, true, false, false}));
}

TEST(MaskSearch, FourChannelExample) {
  auto g = four_channel_model();
  auto m = FlopsModel::from_graph(g);
  const GateValues gates{{0.9f, 0.6f, 0.4f, 0.1f}};
  MaskSearchParams p{.target_flops = 0.5 * m.total(), .epsilon = 1e-9};
  auto r = get_pruning_mask(gates, m, p);
  EXPECT_EQ(r.mask.keep[0], (std::vector<bool>{true, true, false, false}));
  EXPECT_TRUE(r.met_epsilon);
  auto oracle = exhaustive_threshold_search(gates, m, p);
  EXPECT_EQ(oracle.mask, r.mask);
}

TEST(MaskSearch, NearFullTargetExitsImmediately) {
  auto g = model("vgg_tiny");
  auto m = FlopsModel::from_graph(g);
  auto b = Bottlenecks::init(identify_groups(g));
  const double eps = 0.02 * m.total();
  auto r = get_pruning_mask(b.gates(), m, {.target_flops = m.total() - eps / 2, .epsilon = eps});
  EXPECT_EQ(r.iterations, 0);
  EXPECT_EQ(r.mask, PruningMask::all_ones(identify_groups(g)));
}

TEST(MaskSearch, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(21);
  for (const auto& arch : {"vgg_tiny", "res_tiny", "branch_tiny"}) {
    auto m = FlopsModel::from_graph(model(arch));
    for (int i = 0; i < 20; ++i) {
      auto gates = random_gates(m, rng);
      const double ratio = std::uniform_real_distribution<double>(0.2, 0.9)(rng);
      MaskSearchParams p{.target_flops = ratio * m.total(), .epsilon = 0.01 * m.total()};
      auto r = get_pruning_mask(gates, m, p);
      auto oracle = exhaustive_threshold_search(gates, m, p);
      EXPECT_LE(r.iterations, 50);
      if (!r.met_epsilon) {
        EXPECT_FALSE(oracle.met_epsilon) << arch;
        EXPECT_LE(std::abs(r.achieved_flops - p.target_flops),
                  std::abs(oracle.achieved_flops - p.target_flops) * (1 + 1e-12));
      }
      EXPECT_EQ(r.achieved_flops, m.weighted(r.mask));
    }
  }
}

TEST(MaskSearch, UnreachableTargetFlagged) {
  auto g = four_channel_model();
  auto m = FlopsModel::from_graph(g);
  auto r = get_pruning_mask({{0.9f, 0.6f, 0.4f, 0.1f}}, m,
                            {.target_flops = 0.6 * m.total(), .epsilon = 1e-6});
  EXPECT_FALSE(r.met_epsilon);
  EXPECT_EQ(r.iterations, 50);
  EXPECT_EQ(r.mask.kept(0), 2u);
}

TEST(MaskSearch, JsonRoundTrip) {
  MaskSearchResult r{.mask = {{{true, false}, {false, true, true}}}, .achieved_flops = 12,
                     .target_flops = 10, .met_epsilon = true, .threshold = 0.625};
  auto j = r.to_json();
  EXPECT_EQ(j["groups"][1]["index"], 2);
  auto back = MaskSearchResult::from_json(j);
  EXPECT_EQ(back.mask, r.mask);
  EXPECT_EQ(back.threshold, 0.625);
}

TEST(Bottleneck, InjectAndRemove) {
  auto g = model("res_tiny");
  auto groups = identify_groups(g);
  auto inst = inject_bottlenecks(g, groups);
  EXPECT_TRUE(inst.frozen());
  EXPECT_TRUE(inst.contains("stem.relu.gate"));
  EXPECT_TRUE(inst.contains("block1.relu.gate"));
  EXPECT_THROW(inject_bottlenecks(inst, groups), GraphError);
  EXPECT_TRUE(remove_bottlenecks(inst) == g);
  EXPECT_THROW(remove_bottlenecks(g), GraphError);
}

TEST(Bottleneck, InitialGatesNearOneKeepLogitsClose) {
  auto g = model("vgg_tiny");
  auto groups = identify_groups(g);
  auto inst = inject_bottlenecks(g, groups);
  auto b = Bottlenecks::init(groups);
  EXPECT_NEAR(b.gates()[0][0], 0.99f, 1e-6f);
  std::mt19937_64 rng(1);
  auto x = Tensor::uniform({2, 1, 28, 28}, 0.0f, 1.0f, rng);
  auto ones = PruningMask::all_ones(groups).as_gates();
  EXPECT_TRUE(predict(inst, x, ones) == predict(g, x));
}

class Equivalence : public ::testing::TestWithParam<std::string> {};

TEST_P(Equivalence, PseudoMatchesPhysical) {
  auto g = model(GetParam());
  auto groups = identify_groups(g);
  auto inst = inject_bottlenecks(g, groups);
  std::mt19937_64 rng(9);
  for (int i = 0; i < 5; ++i) {
    auto mask = random_mask(groups, rng, 0.5);
    auto pruned = prune(g, mask);
    auto r = equivalence_check(inst, pseudo_prune_gates(mask, groups), pruned, 4, i);
    EXPECT_LT(r.max_rel_diff, 1e-5);
    EXPECT_TRUE(validate_groups(pruned, identify_groups(pruned)).empty());
  }
}

INSTANTIATE_TEST_SUITE_P(Zoo, Equivalence, ::testing::Values("vgg_tiny", "res_tiny", "branch_tiny"));

TEST(Prune, AllOnesIsIdentity) {
  for (const auto& arch : {"vgg_tiny", "res_tiny", "branch_tiny"}) {
    auto g = model(arch);
    EXPECT_TRUE(prune(g, PruningMask::all_ones(identify_groups(g))) == g) << arch;
  }
}

TEST(Prune, SharedShortcutChannelDropsEverywhere) {
  auto g = model("res_tiny");
  auto groups = identify_groups(g);
  auto mask = PruningMask::all_ones(groups);
  mask.keep[0][2] = false;
  auto p = prune(g, mask);
  EXPECT_EQ(p.node("stem.conv").params.at("weight").dim(0), 7u);
  EXPECT_EQ(p.node("block1.b.conv").params.at("weight").dim(0), 7u);
  EXPECT_EQ(p.node("block1.a.conv").params.at("weight").dim(1), 7u);
  EXPECT_EQ(p.node("block2.a.conv").params.at("weight").dim(1), 7u);
  EXPECT_EQ(p.node("block2.proj.conv").params.at("weight").dim(1), 7u);
  // surviving slices keep their original order
  const auto& w0 = g.node("block2.proj.conv").params.at("weight");
  const auto& w1 = p.node("block2.proj.conv").params.at("weight");
  EXPECT_EQ(w1[2], w0[3]);
}

TEST(Prune, ParameterCountMatchesAnalyticCount) {
  auto g = model("vgg_tiny");
  auto groups = identify_groups(g);
  auto mask = PruningMask::all_ones(groups);
  mask.keep[0] = {true, false, true, false, true, false, true, false};
  mask.keep[2][0] = false;
  auto p = prune(g, mask);
  const std::size_t c1 = 4, c2 = 16, c3 = 31;
  const std::size_t expect = (c1 * 9 + 2 * c1) + (c2 * c1 * 9 + 2 * c2) + (c3 * c2 * 9 + 2 * c3) + (10 * c3 + 10);
  EXPECT_EQ(p.parameter_count(), expect);
}

TEST(Prune, EmptyGroupRejected) {
  auto g = model("vgg_tiny");
  auto mask = PruningMask::all_ones(identify_groups(g));
  mask.keep[1].assign(mask.keep[1].size(), false);
  EXPECT_THROW(prune(g, mask), ValueError);
}

}  // namespace
}  // namespace autobot
