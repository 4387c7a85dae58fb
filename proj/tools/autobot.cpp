// autobot: command line front end for pretraining, pruning, finetuning,
// evaluation, FLOPs accounting and ablation runs.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "autobot/autobot.hpp"

namespace fs = std::filesystem;
using namespace autobot;

namespace {

constexpr double kVgg16CifarReference = 314.29e6;

struct Options {
  std::string model = "vgg_tiny";
  std::string data_dir = "data/mnist-5k";
  std::string dataset = "mnist";
  double fraction = 1.0;
  double target_flops_ratio = 0.5;
  double epsilon_ratio = 0.02;
  double beta = 5.5;
  std::optional<double> lr;
  std::size_t iters = 200;
  std::size_t batch_size = 64;
  std::optional<std::size_t> epochs;
  double finetune_lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 2e-3;
  std::uint64_t seed = 0;
  std::string out;
  std::string strategy = "autobot";
  std::string profile;
  std::string preset;
};

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write '" + path + "'");
  f << j.dump(2) << "\n";
}

Shape input_shape_for(const std::string& dataset) {
  return dataset == "mnist" ? Shape{1, 28, 28} : Shape{3, 32, 32};
}

Graph load_model(const Options& o) {
  if (fs::exists(o.model)) return load_checkpoint(o.model).graph;
  ModelConfig cfg;
  cfg.arch = o.model;
  cfg.input_shape = o.model == "vgg16_cifar" ? Shape{3, 32, 32} : input_shape_for(o.dataset);
  cfg.seed = o.seed;
  return build_model(cfg);
}

DataSplits load_data(const Options& o) { return load_dataset(o.dataset, o.data_dir, o.fraction, o.seed); }

TrainConfig train_config(const Options& o, double default_lr, std::size_t default_epochs) {
  TrainConfig c;
  c.iters = o.iters;
  c.batch_size = o.batch_size;
  c.beta = o.beta;
  c.epochs = o.epochs.value_or(default_epochs);
  c.lr = default_lr;
  c.momentum = o.momentum;
  c.weight_decay = o.weight_decay;
  c.seed = o.seed;
  return c;
}

PruneConfig prune_config(const Options& o) {
  PruneConfig p;
  p.target_flops_ratio = o.target_flops_ratio;
  p.epsilon_ratio = o.epsilon_ratio;
  if (o.strategy != "all") p.strategy = strategy_from_string(o.strategy);
  if (!o.profile.empty()) {
    std::ifstream f(o.profile);
    if (!f) throw Error("cannot open profile '" + o.profile + "'");
    p.profile = PruningProfile::from_json(nlohmann::json::parse(f));
  }
  return p;
}

// Paper hyper-parameters for the bottleneck phase.
void apply_preset(Options& o) {
  if (o.preset.empty()) return;
  if (o.preset == "paper-cifar10") {
    o.iters = 200, o.batch_size = 64, o.lr = 0.6, o.beta = 5.5, o.finetune_lr = 0.02;
  } else if (o.preset == "paper-imagenet") {
    o.iters = 3000, o.batch_size = 64, o.lr = 0.4, o.beta = 13.0, o.finetune_lr = 0.006;
  } else {
    throw ValueError("unknown preset '" + o.preset + "' (paper-cifar10, paper-imagenet)");
  }
}

int cmd_pretrain(const Options& o) {
  if (o.out.empty()) throw ValueError("pretrain: --out is required");
  auto data = load_data(o);
  Graph g = load_model(o);
  auto cfg = train_config(o, o.lr.value_or(0.05), 5);
  auto r = train_sgd(g, data.train, data.test, cfg);
  g.metadata()["pretrain"] = r.to_json();
  g.metadata()["dataset"] = o.dataset;
  save_checkpoint(o.out, {g, {}});
  for (const auto& e : r.curve) {
    std::printf("epoch %zu  lr %.4f  loss %.4f  val %.2f%%\n", e.epoch, e.lr, e.train_loss, e.val_accuracy);
  }
  std::printf("best %.2f%% (epoch %zu) -> %s\n", r.best_val_accuracy, r.best_epoch, o.out.c_str());
  return 0;
}

int cmd_prune(const Options& o) {
  if (o.out.empty()) throw ValueError("prune: --out directory is required");
  fs::create_directories(o.out);
  auto data = load_data(o);
  Graph g = load_model(o);
  auto cfg = train_config(o, o.finetune_lr, 0);
  cfg.bottleneck_lr = o.lr.value_or(0.6);
  auto res = run_pipeline(g, data, cfg, prune_config(o));
  const auto& r = res.report;
  const fs::path dir(o.out);
  write_json((dir / "report.json").string(), r.to_json());
  write_json((dir / "mask.json").string(), r.mask.to_json());
  save_checkpoint((dir / "pruned.abot").string(), {res.pruned, {}});
  Checkpoint inst{res.instrumented, {}};
  for (std::size_t i = 0; i < res.bottlenecks.psi.size(); ++i) {
    inst.extra[Bottlenecks::psi_name(res.bottlenecks.groups[i].index)] = res.bottlenecks.psi[i];
  }
  save_checkpoint((dir / "bottlenecks.abot").string(), inst);
  std::printf("FLOPs %.0f -> %.0f (%.2f%% of full, target %.2f%%, %s)\n", r.full_flops, r.achieved_flops,
              100.0 * r.achieved_flops / r.full_flops, 100.0 * r.target_flops / r.full_flops,
              r.mask.met_epsilon ? "within epsilon" : "best-so-far, epsilon not met");
  std::printf("params %zu -> %zu\n", r.params_before, r.params_after);
  std::printf("accuracy: baseline %.2f%%  before finetune %.2f%%  after finetune %.2f%%\n", r.baseline_accuracy,
              r.accuracy_before_finetune, r.accuracy_after_finetune);
  std::printf("wrote %s/{report.json,mask.json,pruned.abot,bottlenecks.abot}\n", o.out.c_str());
  return 0;
}

int cmd_finetune(const Options& o) {
  if (o.out.empty()) throw ValueError("finetune: --out is required");
  auto data = load_data(o);
  Graph g = load_model(o);
  const double before = evaluate(g, data.test).accuracy;
  auto cfg = train_config(o, o.lr.value_or(o.finetune_lr), 5);
  auto [train, val] = split_validation(data.train, 0.1, o.seed);
  auto r = train_sgd(g, train, val, cfg);
  g.metadata()["finetune"] = r.to_json();
  save_checkpoint(o.out, {g, {}});
  std::printf("accuracy %.2f%% -> %.2f%% -> %s\n", before, evaluate(g, data.test).accuracy, o.out.c_str());
  return 0;
}

int cmd_eval(const Options& o) {
  auto data = load_data(o);
  Graph g = load_model(o);
  const auto r = evaluate(g, data.test);
  nlohmann::json j{{"accuracy", r.accuracy}, {"loss", r.loss}, {"flops", exact_flops(g).total},
                   {"params", g.parameter_count()}};
  std::cout << j.dump(2) << "\n";
  if (!o.out.empty()) write_json(o.out, j);
  return 0;
}

int cmd_flops(const Options& o) {
  Graph g = load_model(o);
  const auto r = exact_flops(g);
  std::printf("%-28s %-16s %14s\n", "node", "op", "flops");
  for (const auto& op : r.ops) std::printf("%-28s %-16s %14llu\n", op.node.c_str(), to_string(op.op).c_str(),
                                           static_cast<unsigned long long>(op.flops));
  std::printf("\nby operator kind:\n");
  for (const auto& [kind, f] : r.by_kind()) {
    std::printf("  %-16s %14llu  %6.2f%%\n", kind.c_str(), static_cast<unsigned long long>(f),
                100.0 * double(f) / double(r.total));
  }
  std::printf("total %llu (%.2fM)\n", static_cast<unsigned long long>(r.total), double(r.total) / 1e6);
  auto j = r.to_json();
  if (g.name() == "vgg16_cifar") {
    const double dev = (double(r.total) - kVgg16CifarReference) / kVgg16CifarReference;
    std::printf("reference 314.29M, deviation %+.3f%% (%+.3fM)\n", 100.0 * dev,
                (double(r.total) - kVgg16CifarReference) / 1e6);
    const auto kinds = r.by_kind();
    const double conv_linear = double(kinds.count("conv2d") ? kinds.at("conv2d") : 0) +
                               double(kinds.count("linear") ? kinds.at("linear") : 0);
    std::printf("  conv2d + linear alone: %.2fM (%+.3f%%), auxiliary ops: %.2fM\n", conv_linear / 1e6,
                100.0 * (conv_linear - kVgg16CifarReference) / kVgg16CifarReference,
                (double(r.total) - conv_linear) / 1e6);
    j["reference"] = kVgg16CifarReference;
    j["deviation"] = dev;
  }
  if (!o.out.empty()) write_json(o.out, j);
  return 0;
}

int cmd_ablate(const Options& o) {
  auto data = load_data(o);
  Graph g = load_model(o);
  auto cfg = train_config(o, o.finetune_lr, 0);
  cfg.bottleneck_lr = o.lr.value_or(0.6);
  auto pc = prune_config(o);
  const auto groups = identify_groups(g);
  const auto model = FlopsModel::from_graph(g);
  auto inst = inject_bottlenecks(g, groups);
  auto b = Bottlenecks::init(groups);
  const double target = pc.target_flops_ratio * model.total();
  train_bottlenecks(inst, b, model, data.train, target, cfg);
  const MaskSearchParams search{.target_flops = target, .epsilon = pc.epsilon_ratio * model.total()};
  std::vector<Strategy> strategies;
  if (o.strategy == "all") {
    strategies = {Strategy::AutoBot, Strategy::Random, Strategy::Reverse, Strategy::Spdc};
    if (pc.profile) strategies.push_back(Strategy::Dpdc);
  } else {
    strategies = {strategy_from_string(o.strategy)};
  }
  nlohmann::json out{{"baseline_accuracy", evaluate(g, data.test).accuracy}, {"full_flops", model.total()},
                     {"target_flops", target}};
  std::printf("baseline %.2f%%\n", out["baseline_accuracy"].get<double>());
  for (auto s : strategies) {
    auto m = ablation_mask(s, b.gates(), model, search, o.seed, pc.profile ? &*pc.profile : nullptr);
    Graph p = prune(g, m.mask);
    const double acc = evaluate(p, data.test).accuracy;
    std::printf("%-8s FLOPs %.2f%%  before finetune %.2f%%\n", to_string(s).c_str(),
                100.0 * m.achieved_flops / model.total(), acc);
    out["strategies"][to_string(s)] = {{"achieved_flops", double(exact_flops(p).total)},
                                       {"met_epsilon", m.met_epsilon},
                                       {"accuracy_before_finetune", acc},
                                       {"mask", m.to_json()}};
  }
  if (!o.out.empty()) write_json(o.out, out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AutoBot: FLOPs-constrained structured pruning with trainable bottlenecks"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* c) {
    c->add_option("--model", o.model, "Architecture name or checkpoint path");
    c->add_option("--data-dir", o.data_dir, "Dataset directory");
    c->add_option("--dataset", o.dataset, "mnist | cifar10 | cifar10-subset");
    c->add_option("--fraction", o.fraction, "Fraction of each split to use");
    c->add_option("--seed", o.seed, "Random seed");
    c->add_option("--out", o.out, "Output file or directory");
    c->add_option("--batch-size", o.batch_size, "Batch size");
  };
  auto training = [&](CLI::App* c) {
    c->add_option("--lr", o.lr, "Learning rate");
    c->add_option("--epochs", o.epochs, "Epochs");
    c->add_option("--momentum", o.momentum, "SGD momentum");
    c->add_option("--weight-decay", o.weight_decay, "SGD weight decay");
  };
  auto pruning = [&](CLI::App* c) {
    c->add_option("--target-flops-ratio", o.target_flops_ratio, "Target FLOPs as a fraction of the full model");
    c->add_option("--epsilon-ratio", o.epsilon_ratio, "Accepted FLOPs error as a fraction of the full model");
    c->add_option("--beta", o.beta, "Weight of the FLOPs loss");
    c->add_option("--iters", o.iters, "Bottleneck training iterations");
    c->add_option("--strategy", o.strategy, "autobot | random | reverse | spdc | dpdc (ablate: also all)");
    c->add_option("--profile", o.profile, "Keep-ratio profile JSON for dpdc");
    c->add_option("--finetune-lr", o.finetune_lr, "Finetuning learning rate");
    c->add_option("--preset", o.preset, "paper-cifar10 | paper-imagenet");
  };

  auto* pretrain = app.add_subcommand("pretrain", "Train a baseline model from scratch");
  common(pretrain);
  training(pretrain);
  auto* prune = app.add_subcommand("prune", "Run the full pruning pipeline on a pretrained checkpoint");
  common(prune);
  training(prune);
  pruning(prune);
  prune->get_option("--lr")->description("Bottleneck learning rate");
  prune->get_option("--epochs")->description("Finetuning epochs (default 0)");
  auto* finetune = app.add_subcommand("finetune", "Finetune a (pruned) checkpoint");
  common(finetune);
  training(finetune);
  auto* eval = app.add_subcommand("eval", "Test accuracy, FLOPs and parameters of a checkpoint");
  common(eval);
  auto* flops = app.add_subcommand("flops", "Per-operator FLOPs breakdown");
  common(flops);
  auto* ablate = app.add_subcommand("ablate", "Before-finetune accuracy of each mask strategy");
  common(ablate);
  training(ablate);
  pruning(ablate);
  ablate->get_option("--lr")->description("Bottleneck learning rate");

  CLI11_PARSE(app, argc, argv);
  try {
    apply_preset(o);
    if (*pretrain) return cmd_pretrain(o);
    if (*prune) return cmd_prune(o);
    if (*finetune) return cmd_finetune(o);
    if (*eval) return cmd_eval(o);
    if (*flops) return cmd_flops(o);
    if (*ablate) return cmd_ablate(o);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "autobot: %s\n", e.what());
    return 1;
  }
  return 0;
}
