// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "lime/model.hpp"

namespace lime::model {

/// Teacher-forced example: the model reads prompt + targets[0..n-2] and is
/// scored on predicting every target token.
struct TrainingExample {
  Prompt prompt;
  std::vector<int> targets;
};

struct TrainConfig {
  /// Fraction of examples (re-drawn every epoch) whose perceptual tokens are
  /// replaced by the learned null embedding.
  double bias_rate = 0.0;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  double learning_rate = 3e-3;
  std::size_t batch_size = 16;
  double grad_clip = 1.0;  // global-norm clip, 0 disables
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
};

struct TrainResult {
  ModelWeights weights;
  std::vector<EpochLog> log;
};

/// Mean next-token cross-entropy of one example (graph node, differentiable
/// w.r.t. whatever leaves w holds).
ad::Var example_loss(const WeightVars& w, const ModelConfig& config, const TrainingExample& example);

using EpochCallback = std::function<void(const EpochLog&)>;

/// Adam on the mean example loss. Throws TrainingError carrying the
/// optimizer step index when the loss stops being finite.
TrainResult train_toy_model(const ModelConfig& config, const std::vector<TrainingExample>& dataset,
                            const TrainConfig& train, const EpochCallback& on_epoch = {});

}  // namespace lime::model
