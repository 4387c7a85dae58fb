#pragma once

#include "autobot/ablation.hpp"
#include "autobot/autodiff.hpp"
#include "autobot/bottleneck.hpp"
#include "autobot/checkpoint.hpp"
#include "autobot/dataset.hpp"
#include "autobot/error.hpp"
#include "autobot/executor.hpp"
#include "autobot/flops.hpp"
#include "autobot/gradcheck.hpp"
#include "autobot/graph.hpp"
#include "autobot/groups.hpp"
#include "autobot/mask.hpp"
#include "autobot/mask_search.hpp"
#include "autobot/ops.hpp"
#include "autobot/optim.hpp"
#include "autobot/pipeline.hpp"
#include "autobot/prune.hpp"
#include "autobot/ranking.hpp"
#include "autobot/tensor.hpp"
#include "autobot/train.hpp"
#include "autobot/zoo.hpp"
