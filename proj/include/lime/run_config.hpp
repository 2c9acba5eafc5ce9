// SPDX-License-Identifier: Apache-2.0
// One JSON document configuring corpus, model, training and steering, plus a
// content-addressed cache of trained models.
#pragma once

#include <filesystem>
#include <functional>
#include <string>

#include "json.hpp"
#include "lime/corpus.hpp"
#include "lime/lime.hpp"
#include "lime/training.hpp"

namespace lime::bench {

struct RunConfig {
  CorpusConfig corpus;
  model::ModelConfig model;
  model::TrainConfig train;
  steering::LimeConfig lime;

  /// Makes the model vocabulary and patch width agree with the corpus.
  void reconcile();
  void validate() const;
};

nlohmann::json to_json(const model::TrainConfig& t);
model::TrainConfig train_config_from_json(const nlohmann::json& j, model::TrainConfig base = {});

nlohmann::json to_json(const RunConfig& c);
/// Missing sections and fields keep their defaults; unknown sections are an error.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& file, RunConfig base = {});

/// Seed from the LIME_SEED environment variable, or `fallback`.
std::uint64_t default_seed(std::uint64_t fallback);

/// Hex digest of everything that determines trained weights.
std::string model_key(const RunConfig& c);

using TrainLog = std::function<void(const std::string&)>;

/// Loads `<dir>/model-<key>.limew` when present, otherwise generates the
/// corpus, trains and stores the weights there.
model::ModelWeights obtain_model(const RunConfig& c, const Corpus& corpus, const std::filesystem::path& dir,
                                 const TrainLog& log = {});

}  // namespace lime::bench
