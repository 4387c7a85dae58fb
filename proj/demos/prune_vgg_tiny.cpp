// Pretrains vgg_tiny on the bundled MNIST subset, prunes it to half its
// FLOPs and prints the accuracy at each step.
//
//   prune_vgg_tiny [data-dir]

#include <cstdio>
#include <string>

#include "autobot/autobot.hpp"

int main(int argc, char** argv) {
  using namespace autobot;
  const std::string dir = argc > 1 ? argv[1] : AUTOBOT_DATA_DIR "/mnist-5k";
  try {
    const DataSplits data = load_dataset("mnist", dir);

    Graph g = build_model({.arch = "vgg_tiny"});
    TrainConfig pre;
    pre.epochs = 4;
    pre.weight_decay = 5e-4;
    train_sgd(g, data.train, data.test, pre);

    for (const auto& grp : identify_groups(g)) {
      std::printf("group %zu: %zu channels, sites:", grp.index, grp.channels);
      for (const auto& s : grp.sites) std::printf(" %s", s.c_str());
      std::printf("\n");
    }

    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.lr = 0.02;
    const auto res = run_pipeline(g, data, cfg, {.target_flops_ratio = 0.5});
    const auto& r = res.report;
    std::printf("FLOPs     %.0f -> %.0f (%.1f%%)\n", r.full_flops, r.achieved_flops,
                100.0 * r.achieved_flops / r.full_flops);
    std::printf("params    %zu -> %zu\n", r.params_before, r.params_after);
    std::printf("accuracy  %.2f%% pretrained, %.2f%% pruned, %.2f%% finetuned\n", r.baseline_accuracy,
                r.accuracy_before_finetune, r.accuracy_after_finetune);
    std::printf("mask      %s\n", r.mask.mask.groups_json().dump().c_str());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  }
}
