#include <gtest/gtest.h>

#include <random>

#include "autobot/executor.hpp"
#include "autobot/groups.hpp"
#include "autobot/zoo.hpp"

namespace autobot {
namespace {

Graph model(const std::string& arch, std::vector<std::size_t> widths = {}) {
  ModelConfig cfg;
  cfg.arch = arch;
  cfg.widths = std::move(widths);
  return build_model(cfg);
}

TEST(Zoo, VggTinyHasOneGroupPerConv) {
  auto g = model("vgg_tiny", {4, 6});
  auto groups = identify_groups(g);
  ASSERT_EQ(groups.size(), 2u);
  EXPECT_EQ(groups[0].index, 1u);
  EXPECT_EQ(groups[0].members, std::vector<std::string>{"stage1.conv"});
  EXPECT_EQ(groups[0].channels, 4u);
  EXPECT_EQ(groups[1].members, std::vector<std::string>{"stage2.conv"});
  EXPECT_EQ(groups[1].consumers, std::vector<std::string>{"fc"});
  EXPECT_EQ(groups[0].sites, std::vector<std::string>{"stage1.pool"});
  EXPECT_TRUE(validate_groups(g, groups).empty());
}

TEST(Zoo, ResidualAddCouplesBothOperands) {
  auto g = model("res_tiny");
  auto groups = identify_groups(g);
  ASSERT_EQ(groups.size(), 4u);
  // stem and both sides of block1.add share one mask
  EXPECT_EQ(groups[0].members, (std::vector<std::string>{"stem.conv", "block1.b.conv"}));
  EXPECT_EQ(groups[1].members, std::vector<std::string>{"block1.a.conv"});
  EXPECT_EQ(groups[2].members, std::vector<std::string>{"block2.a.conv"});
  EXPECT_EQ(groups[3].members, (std::vector<std::string>{"block2.b.conv", "block2.proj.conv"}));
  EXPECT_EQ(groups[0].sites, (std::vector<std::string>{"stem.relu", "block1.relu"}));
  EXPECT_TRUE(validate_groups(g, groups).empty());
}

TEST(Zoo, ConcatKeepsBranchesSeparate) {
  auto g = model("branch_tiny", {8, 4, 6, 16});
  auto a = analyze_channels(g);
  ASSERT_EQ(a.groups.size(), 5u);
  const auto& mix = a.layouts.at("mix");
  ASSERT_EQ(mix.size(), 2u);
  EXPECT_EQ(layout_channels(mix), 10u);
  EXPECT_EQ(mix[0].group, 2u);
  EXPECT_EQ(mix[1].group, 4u);
  EXPECT_EQ(a.groups[4].members, std::vector<std::string>{"head.conv"});
  EXPECT_EQ(a.groups[1].consumers, std::vector<std::string>{"head.conv"});
  EXPECT_TRUE(validate_groups(g, a.groups).empty());
}

TEST(Zoo, Vgg16CifarShape) {
  ModelConfig cfg{.arch = "vgg16_cifar", .input_shape = {3, 32, 32}};
  auto g = build_model(cfg);
  EXPECT_EQ(identify_groups(g).size(), 14u);
  EXPECT_EQ(g.infer_shapes().at(g.output_id()), Shape{10});
}

TEST(Zoo, UnknownArchitecture) { EXPECT_THROW(model("mobilenet"), ValueError); }

TEST(Groups, IdentificationIsDeterministic) {
  auto g = model("res_tiny");
  EXPECT_EQ(identify_groups(g), identify_groups(g));
  EXPECT_EQ(identify_groups(g), identify_groups(model("res_tiny")));
}

TEST(Groups, SplitShortcutIsReported) {
  auto g = model("res_tiny");
  auto groups = identify_groups(g);
  PruningGroup extra = groups[0];
  extra.index = groups.size() + 1;
  extra.members = {"block1.b.conv"};
  groups[0].members = {"stem.conv"};
  groups.push_back(extra);
  auto v = validate_groups(g, groups);
  ASSERT_FALSE(v.empty());
  bool split = false;
  for (const auto& s : v) split = split || s.find("split across groups") != std::string::npos;
  EXPECT_TRUE(split);
}

TEST(Groups, MissingAndFixedChannelsAreReported) {
  auto g = model("vgg_tiny", {4, 6});
  auto groups = identify_groups(g);
  auto missing = groups;
  missing.pop_back();
  EXPECT_FALSE(validate_groups(g, missing).empty());
  auto logits = groups;
  logits[1].members.push_back("fc");
  EXPECT_FALSE(validate_groups(g, logits).empty());
}

TEST(Groups, GroupedConvolutionRejected) {
  auto g = model("vgg_tiny", {4, 6});
  g.node_mut("stage2.conv").attrs.groups = 2;
  EXPECT_THROW(identify_groups(g), GraphError);
}

TEST(Groups, MisalignedAddIsAmbiguous) {
  Graph g("odd", {2, 4, 4}, 3);
  detail::GraphBuilder b(g, 1);
  auto x = b.input();
  auto c1 = b.conv("c1", x, 2, 1, 1, 0, false);
  auto c2 = b.conv("c2", x, 2, 1, 1, 0, false);
  auto c3 = b.conv("c3", x, 4, 1, 1, 0, false);
  auto cat = b.concat("cat", {c1, c2});
  auto s = b.add_op("sum", {cat, c3});
  b.linear("fc", b.gap("gap", s), 3, true);
  g.set_output("fc");
  // concat(2+2) + conv(4) has no consistent channel pairing per segment
  EXPECT_THROW(identify_groups(g), GraphError);
}

// Random DAGs over conv / bn / relu / pool / add / concat.
Graph random_dag(std::mt19937_64& rng) {
  Graph g("fuzz", {3, 8, 8}, 4);
  detail::GraphBuilder b(g, rng());
  std::vector<std::string> live{b.input()};
  std::map<std::string, std::size_t> spatial{{"input", 8}};
  const int steps = 4 + int(rng() % 8);
  for (int s = 0; s < steps; ++s) {
    const std::string id = "n" + std::to_string(s);
    const auto& src = live[rng() % live.size()];
    switch (rng() % 6) {
      case 0:
      case 1:
        b.conv(id, src, 2 + rng() % 4, 1 + 2 * (rng() % 2), 1, 0, false);
        if (g.node(id).attrs.kernel == 3) g.node_mut(id).attrs.padding = 1;
        spatial[id] = spatial[src];
        break;
      case 2:
        if (src == "input") continue;
        (rng() % 2) ? b.bn(id, src) : b.relu(id, src);
        spatial[id] = spatial[src];
        break;
      case 3:
        if (spatial[src] < 4) continue;
        b.max_pool(id, src, 2, 2);
        spatial[id] = spatial[src] / 2;
        break;
      case 4: {
        std::vector<std::string> same;
        for (const auto& o : live) {
          if (o != src && spatial[o] == spatial[src] && b.channels(o) == b.channels(src)) same.push_back(o);
        }
        if (same.empty()) continue;
        b.add_op(id, {src, same[rng() % same.size()]});
        spatial[id] = spatial[src];
        break;
      }
      default: {
        std::vector<std::string> same;
        for (const auto& o : live) {
          if (o != src && spatial[o] == spatial[src]) same.push_back(o);
        }
        if (same.empty()) continue;
        b.concat(id, {src, same[rng() % same.size()]});
        spatial[id] = spatial[src];
        break;
      }
    }
    live.push_back(id);
  }
  b.linear("fc", b.gap("gap", live.back()), 4, true);
  g.set_output("fc");
  return g;
}

TEST(Groups, RandomGraphsAlwaysValidate) {
  std::mt19937_64 rng(7);
  int analyzed = 0;
  for (int i = 0; i < 300; ++i) {
    Graph g = random_dag(rng);
    std::vector<PruningGroup> groups;
    try {
      groups = identify_groups(g);
    } catch (const GraphError& e) {
      EXPECT_NE(std::string(e.what()).find("ambiguous channel semantics"), std::string::npos);
      continue;
    }
    ++analyzed;
    const auto v = validate_groups(g, groups);
    EXPECT_TRUE(v.empty()) << "graph " << i << ": " << v.front();
  }
  EXPECT_GT(analyzed, 200);
}

TEST(Graph, RejectsUnknownInputAndDuplicates) {
  Graph g("t", {1, 4, 4}, 2);
  g.add({.id = "input", .op = OpKind::Input});
  EXPECT_THROW(g.add({.id = "r", .op = OpKind::Relu, .inputs = {"missing"}}), GraphError);
  EXPECT_THROW(g.add({.id = "input", .op = OpKind::Relu, .inputs = {"input"}}), GraphError);
}

TEST(Graph, SpecJsonRoundTrip) {
  auto g = model("branch_tiny");
  std::map<std::string, Tensor> tensors;
  for (const auto& n : g.nodes()) {
    for (const auto& [k, t] : n.params) tensors[n.id + "." + k] = t;
  }
  auto back = Graph::from_spec_json(g.spec_json(), tensors);
  EXPECT_TRUE(back == g);
}

TEST(Executor, PredictShapeAndDeterminism) {
  auto g = model("res_tiny");
  std::mt19937_64 rng(3);
  auto x = Tensor::uniform({2, 1, 28, 28}, 0.0f, 1.0f, rng);
  auto a = predict(g, x);
  EXPECT_EQ(a.shape(), (Shape{2, 10}));
  EXPECT_TRUE(a == predict(g, x));
}

TEST(Executor, WrongInputShapeNamesGraphInput) {
  auto g = model("vgg_tiny");
  try {
    predict(g, Tensor({1, 3, 28, 28}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("graph input"), std::string::npos);
  }
}

}  // namespace
}  // namespace autobot
