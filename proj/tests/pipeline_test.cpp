#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <unistd.h>

#include "autobot/autobot.hpp"

namespace autobot {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("autobot_test_" + name);
  fs::create_directories(p);
  return p;
}

void write_bytes(const fs::path& p, const std::string& b) {
  std::ofstream f(p, std::ios::binary);
  f.write(b.data(), static_cast<std::streamsize>(b.size()));
}

std::string be32(std::uint32_t v) {
  return {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
}

void write_idx(const fs::path& dir, const std::string& prefix, std::size_t n) {
  std::string img = be32(0x803) + be32(std::uint32_t(n)) + be32(28) + be32(28);
  img.resize(16 + n * 784, char(0));
  for (std::size_t i = 0; i < n; ++i) img[16 + i * 784 + i % 784] = char(255);
  std::string lab = be32(0x801) + be32(std::uint32_t(n));
  for (std::size_t i = 0; i < n; ++i) lab.push_back(char(i % 10));
  write_bytes(dir / (prefix + "-images-idx3-ubyte"), img);
  write_bytes(dir / (prefix + "-labels-idx1-ubyte"), lab);
}

const fs::path kMnist = fs::path(AUTOBOT_DATA_DIR) / "mnist-5k";

const DataSplits& mnist() {
  static const DataSplits d = load_dataset("mnist", kMnist);
  return d;
}

// Pretrained vgg_tiny shared by the training tests. ctest runs every test
// in its own process, so the weights are cached on disk.
const Graph& pretrained() {
  static const Graph g = [] {
    const auto path = temp_dir("fixture") / "vgg_tiny_mnist5k_e3_s0.abot";
    if (fs::exists(path)) return load_checkpoint(path.string()).graph;
    Graph m = build_model({});
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.weight_decay = 5e-4;
    train_sgd(m, mnist().train, mnist().test, cfg);
    const auto tmp = path.string() + "." + std::to_string(::getpid());
    save_checkpoint(tmp, {m, {}});
    fs::rename(tmp, path);
    return m;
  }();
  return g;
}

TEST(Dataset, MnistIdxCountAndShape) {
  auto dir = temp_dir("idx");
  write_idx(dir, "train", 60000);
  write_idx(dir, "t10k", 10);
  auto d = load_split("mnist", dir, "train");
  EXPECT_EQ(d.size(), 60000u);
  EXPECT_EQ(d.sample_shape, (Shape{1, 28, 28}));
  EXPECT_EQ(d.images[5 * 784 + 5], 1.0f);
  EXPECT_EQ(d.labels[13], 3);
}

TEST(Dataset, MnistSubsetIsStratified) {
  const auto& d = mnist();
  EXPECT_EQ(d.train.size(), 4000u);
  EXPECT_EQ(d.test.size(), 1000u);
  for (auto c : d.test.histogram()) EXPECT_EQ(c, 100u);
}

TEST(Dataset, NormalizationUsesTrainStatistics) {
  const auto& d = mnist();
  auto raw = load_split("mnist", kMnist, "train");
  auto n = Normalization::from(raw);
  n.apply(raw);
  auto again = Normalization::from(raw);
  EXPECT_NEAR(again.mean[0], 0.0f, 1e-4f);
  EXPECT_NEAR(again.stddev[0], 1.0f, 1e-4f);
  EXPECT_EQ(d.norm.mean, n.mean);
}

TEST(Dataset, TruncatedIdxReportsOffset) {
  auto dir = temp_dir("trunc");
  write_idx(dir, "train", 3);
  auto p = dir / "train-images-idx3-ubyte";
  auto size = fs::file_size(p);
  fs::resize_file(p, size - 10);
  try {
    load_split("mnist", dir, "train");
    FAIL();
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("train-images-idx3-ubyte"), std::string::npos);
    EXPECT_NE(msg.find("byte offset " + std::to_string(size - 10)), std::string::npos);
  }
  EXPECT_THROW(load_split("mnist", temp_dir("missing"), "train"), FormatError);
}

TEST(Dataset, CifarBatchesAndSubsetDeterminism) {
  auto dir = temp_dir("cifar");
  constexpr std::size_t kRecord = 3073;
  for (int b = 1; b <= 6; ++b) {
    std::string bytes(1000 * kRecord, char(7));
    for (std::size_t i = 0; i < 1000; ++i) bytes[i * kRecord] = char(i % 10);
    write_bytes(dir / (b <= 5 ? "data_batch_" + std::to_string(b) + ".bin" : "test_batch.bin"), bytes);
  }
  auto full = load_split("cifar10", dir, "train");
  EXPECT_EQ(full.size(), 5000u);
  EXPECT_EQ(full.sample_shape, (Shape{3, 32, 32}));
  for (auto c : full.histogram()) EXPECT_EQ(c, 500u);
  auto a = load_split("cifar10-subset", dir, "train", 0.1, 7);
  auto b = load_split("cifar10-subset", dir, "train", 0.1, 7);
  EXPECT_EQ(a.size(), 500u);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(subset_indices(5000, 0.1, 7), subset_indices(5000, 0.1, 7));
  EXPECT_NE(subset_indices(5000, 0.1, 7), subset_indices(5000, 0.1, 8));

  write_bytes(dir / "test_batch.bin", std::string(kRecord + 5, char(1)));
  try {
    load_split("cifar10", dir, "test");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 3073"), std::string::npos);
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto g = build_model({.arch = "branch_tiny"});
  auto groups = identify_groups(g);
  Checkpoint c{inject_bottlenecks(g, groups), {}};
  auto b = Bottlenecks::init(groups);
  b.psi[1][2] = -3.25f;
  for (const auto& grp : groups) c.extra[Bottlenecks::psi_name(grp.index)] = b.psi[grp.index - 1];
  const auto bytes = serialize_checkpoint(c);
  EXPECT_EQ(bytes.substr(0, 4), "ABOT");
  EXPECT_EQ(bytes[4], 1);
  auto back = deserialize_checkpoint(bytes);
  EXPECT_TRUE(back.graph == c.graph);
  EXPECT_TRUE(back.graph.frozen());
  EXPECT_EQ(back.bottlenecks(groups).psi[1][2], -3.25f);
  EXPECT_EQ(serialize_checkpoint(back), bytes);

  auto path = temp_dir("ckpt") / "model.abot";
  save_checkpoint(path.string(), c);
  EXPECT_EQ(serialize_checkpoint(load_checkpoint(path.string())), bytes);
}

TEST(Checkpoint, CorruptionReportsOffset) {
  const auto bytes = serialize_checkpoint({build_model({}), {}});
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad), FormatError);
  try {
    deserialize_checkpoint(bytes.substr(0, bytes.size() - 3));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated while reading tensor payload at byte offset"),
              std::string::npos);
  }
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), FormatError);
}

TEST(Ranking, KendallExamples) {
  const std::vector<std::size_t> id{0, 1, 2, 3};
  EXPECT_EQ(kendall_tau_distance(id, id), 0.0);
  EXPECT_EQ(kendall_tau_distance(id, {3, 2, 1, 0}), 1.0);
  EXPECT_DOUBLE_EQ(kendall_tau_distance(id, {1, 0, 2, 3}), 1.0 / 6.0);
  EXPECT_THROW(kendall_tau_distance(id, {0, 1, 2}), ValueError);
  EXPECT_THROW(kendall_tau_distance(id, {0, 0, 2, 3}), ValueError);
}

TEST(Ranking, OrdersByGateThenIndex) {
  EXPECT_EQ(channel_ranking({{0.2f, 0.9f}, {0.9f, 0.1f}}), (std::vector<std::size_t>{1, 2, 0, 3}));
}

TEST(Optim, CosineSchedule) {
  EXPECT_DOUBLE_EQ(cosine_lr(0.1, 0, 10), 0.1);
  EXPECT_NEAR(cosine_lr(0.1, 5, 10), 0.05, 1e-15);
  EXPECT_NEAR(cosine_lr(0.1, 10, 10), 0.0, 1e-15);
}

TEST(Optim, AdamFirstStepMovesByLearningRate) {
  Tensor p({2}, std::vector<float>{1.0f, -1.0f});
  Adam adam({.lr = 0.1});
  adam.step({&p}, {Tensor({2}, std::vector<float>{3.0f, -0.5f})});
  EXPECT_NEAR(p[0], 0.9f, 1e-6f);
  EXPECT_NEAR(p[1], -0.9f, 1e-6f);
}

TEST(Optim, SgdMomentumAndDecay) {
  Tensor p({1}, 1.0f);
  Sgd sgd({.momentum = 0.5, .weight_decay = 0.1});
  sgd.step({&p}, {Tensor({1}, 1.0f)}, 0.1);  // buf = 1.1
  EXPECT_NEAR(p[0], 0.89f, 1e-6f);
  sgd.step({&p}, {Tensor({1}, 1.0f)}, 0.1);  // buf = 0.55 + 1.089
  EXPECT_NEAR(p[0], 0.89f - 0.1639f, 1e-6f);
}

TEST(Training, ZeroEpochFinetuneKeepsAccuracy) {
  Graph g = pretrained();
  const double before = evaluate(g, mnist().test).accuracy;
  TrainConfig cfg;
  cfg.epochs = 0;
  auto r = train_sgd(g, mnist().train, mnist().test, cfg);
  EXPECT_EQ(evaluate(g, mnist().test).accuracy, before);
  EXPECT_EQ(r.best_epoch, 0u);
  EXPECT_GT(before, 85.0);
}

TEST(Training, BottleneckTrainingLeavesWeightsUntouched) {
  const Graph& g = pretrained();
  auto groups = identify_groups(g);
  auto inst = inject_bottlenecks(g, groups);
  auto b = Bottlenecks::init(groups);
  auto model = FlopsModel::from_graph(g);
  const auto hash = parameter_hash(inst);
  TrainConfig cfg;
  cfg.iters = 20;
  auto trace = train_bottlenecks(inst, b, model, mnist().train, 0.5 * model.total(), cfg);
  EXPECT_EQ(parameter_hash(inst), hash);
  EXPECT_EQ(trace.iterations.size(), 20u);
  EXPECT_EQ(trace.snapshots.size(), 2u);
  EXPECT_NE(b.psi[0], Bottlenecks::init(groups).psi[0]);
}

TEST(Training, ZeroBetaAppliesNoCompression) {
  const Graph& g = pretrained();
  auto groups = identify_groups(g);
  auto inst = inject_bottlenecks(g, groups);
  auto b = Bottlenecks::init(groups);
  auto model = FlopsModel::from_graph(g);
  TrainConfig cfg;
  cfg.iters = 50;
  cfg.beta = 0.0;
  // gates start at 0.99, so g starts slightly below M_F
  const double start = model.weighted(b.gates());
  auto trace = train_bottlenecks(inst, b, model, mnist().train, 0.5 * model.total(), cfg);
  for (const auto& it : trace.iterations) EXPECT_GE(it.flops, start - 0.01 * model.total());
  EXPECT_GE(model.weighted(b.gates()), start - 0.01 * model.total());
}

TEST(Training, LargeBetaReachesTarget) {
  const Graph& g = pretrained();
  auto groups = identify_groups(g);
  auto inst = inject_bottlenecks(g, groups);
  auto b = Bottlenecks::init(groups);
  auto model = FlopsModel::from_graph(g);
  TrainConfig cfg;
  cfg.iters = 200;
  cfg.beta = 100.0;
  const double target = 0.5 * model.total();
  train_bottlenecks(inst, b, model, mnist().train, target, cfg);
  EXPECT_LT(std::abs(model.weighted(b.gates()) - target) / model.total(), 0.05);
}

TEST(Training, RequiresInstrumentedGraph) {
  const Graph& g = pretrained();
  auto groups = identify_groups(g);
  auto b = Bottlenecks::init(groups);
  auto model = FlopsModel::from_graph(g);
  EXPECT_THROW(train_bottlenecks(g, b, model, mnist().train, 0.5 * model.total(), {}), GraphError);
}

TEST(Ablation, SpdcMatchesAutobotCounts) {
  auto g = build_model({});
  auto model = FlopsModel::from_graph(g);
  std::mt19937_64 rng(4);
  GateValues gates;
  for (auto c : model.group_channels()) {
    std::vector<float> v(c);
    for (auto& x : v) x = std::uniform_real_distribution<float>(0, 1)(rng);
    gates.push_back(v);
  }
  MaskSearchParams p{.target_flops = 0.5 * model.total(), .epsilon = 0.02 * model.total()};
  auto a = ablation_mask(Strategy::AutoBot, gates, model, p, 1);
  auto s = ablation_mask(Strategy::Spdc, gates, model, p, 1);
  for (std::size_t i = 0; i < gates.size(); ++i) EXPECT_EQ(a.mask.kept(i), s.mask.kept(i));
  auto r = ablation_mask(Strategy::Reverse, gates, model, p, 1);
  EXPECT_TRUE(r.met_epsilon);
  EXPECT_THROW(ablation_mask(Strategy::Dpdc, gates, model, p, 1), ValueError);
  PruningProfile far{{0.1, 0.1, 0.1}};
  EXPECT_THROW(ablation_mask(Strategy::Dpdc, gates, model, p, 1, &far), ValueError);
  EXPECT_EQ(strategy_from_string("spdc"), Strategy::Spdc);
  EXPECT_THROW(strategy_from_string("magic"), ValueError);
}

TEST(Pipeline, SameSeedSameResult) {
  TrainConfig cfg;
  cfg.iters = 30;
  cfg.epochs = 0;
  PruneConfig pc;
  auto a = run_pipeline(pretrained(), mnist(), cfg, pc);
  auto b = run_pipeline(pretrained(), mnist(), cfg, pc);
  EXPECT_EQ(a.report.mask.mask, b.report.mask.mask);
  EXPECT_EQ(a.report.accuracy_before_finetune, b.report.accuracy_before_finetune);
  EXPECT_EQ(a.report.achieved_flops, a.report.mask.achieved_flops);
  EXPECT_EQ(a.report.achieved_flops, double(exact_flops(a.pruned).total));
  EXPECT_EQ(a.report.weight_hash_before, a.report.weight_hash_after);
  EXPECT_EQ(a.report.accuracy_after_finetune, a.report.accuracy_before_finetune);
  const auto j = a.report.to_json();
  EXPECT_TRUE(j.contains("bottleneck_trace"));
  EXPECT_EQ(j["mask"]["groups"].size(), 3u);
}

TEST(Pipeline, NearIdentityTargetKeepsAccuracy) {
  TrainConfig cfg;
  cfg.iters = 30;
  cfg.epochs = 0;
  PruneConfig pc;
  pc.target_flops_ratio = 0.99;
  auto r = run_pipeline(pretrained(), mnist(), cfg, pc).report;
  EXPECT_LE(std::abs(r.accuracy_before_finetune - r.baseline_accuracy), 0.5);
}

TEST(Pipeline, StageErrorsNameTheStage) {
  TrainConfig cfg;
  cfg.iters = 5;
  PruneConfig pc;
  pc.strategy = Strategy::Dpdc;
  try {
    run_pipeline(pretrained(), mnist(), cfg, pc);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("stage 'mask_search'"), std::string::npos);
  }
}

}  // namespace
}  // namespace autobot
