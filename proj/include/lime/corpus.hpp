// SPDX-License-Identifier: Apache-2.0
// Synthetic scenes with topic-driven object co-occurrence, yes/no probing
// splits and object-listing prompts.
#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "lime/model.hpp"
#include "lime/training.hpp"

namespace lime::bench {

enum class SceneKind { grid_2d, sequence_1d };
std::string to_string(SceneKind k);
SceneKind scene_kind_from_string(const std::string& s);

enum class Split { random, popular, adversarial };
std::string to_string(Split s);
Split split_from_string(const std::string& s);
inline constexpr Split kAllSplits[] = {Split::random, Split::popular, Split::adversarial};

struct CorpusConfig {
  SceneKind kind = SceneKind::grid_2d;
  std::size_t grid_rows = 4;   // sequence_1d uses grid_rows * grid_cols cells in one row
  std::size_t grid_cols = 4;
  std::size_t num_objects = 16;
  std::size_t num_topics = 4;
  std::size_t core_size = 5;        // objects strongly tied to each topic
  double topic_affinity = 0.7;      // chance an object is drawn from the topic core
  double hard_negative_rate = 0.5;  // training negatives drawn like adversarial ones
  std::size_t min_objects = 2;
  std::size_t max_objects = 4;
  std::size_t max_extent = 2;       // cells per object (1-D: segment length)
  double signal_min = 0.5;          // per-object feature amplitude range
  double signal_max = 1.0;
  double noise = 0.05;              // stddev of the appended noise features
  double symbol_noise = 0.05;       // stddev of the noise on the symbol slots
  std::size_t patch_dim = 48;
  std::size_t train_scenes = 3000;
  std::size_t eval_scenes = 250;
  std::uint64_t seed = 1;

  std::size_t cells() const { return grid_rows * grid_cols; }
  /// Throws ConfigError on an infeasible configuration.
  void validate() const;
  friend bool operator==(const CorpusConfig&, const CorpusConfig&) = default;
};

nlohmann::json to_json(const CorpusConfig& c);
CorpusConfig corpus_config_from_json(const nlohmann::json& j);

struct Scene {
  std::uint64_t id = 0;
  SceneKind kind = SceneKind::grid_2d;
  std::size_t rows = 0, cols = 0;
  int topic = 0;
  std::vector<int> cells;           // object index or -1 for empty
  Tensor patch_features;            // cells x patch_dim
  std::vector<int> inventory;       // present object indices, ascending

  bool contains(int object) const;
  /// Cell indices covered by `object`; empty iff the object is absent.
  std::vector<std::size_t> region_of(int object) const;
  /// Objects in raster order of their first cell.
  std::vector<int> raster_objects() const;
};

/// Corpus-level object statistics from the training scenes.
struct CooccurrenceStats {
  std::vector<std::size_t> frequency;              // scenes containing each object
  std::vector<std::vector<std::size_t>> pairs;     // scenes containing both
  std::vector<int> popular;                        // top-decile objects by frequency

  static CooccurrenceStats from_scenes(const std::vector<Scene>& scenes, std::size_t num_objects);
  double affinity(int object, const Scene& scene) const;  // sum of pair counts with present objects
};

struct QaExample {
  std::size_t scene = 0;  // index into Corpus::eval_scenes
  int query = 0;          // object index
  bool label = false;
  Split split = Split::random;
};

struct Corpus {
  CorpusConfig config;
  std::vector<Scene> train_scenes;
  std::vector<model::TrainingExample> training;
  std::vector<Scene> eval_scenes;
  std::map<Split, std::vector<QaExample>> splits;
  CooccurrenceStats stats;
};

/// Deterministic for a fixed config (including its seed).
Corpus generate_corpus(const CorpusConfig& config);

Scene generate_scene(const CorpusConfig& config, std::uint64_t id, std::mt19937_64& rng);

/// Draws an absent object for a negative query. Throws ContractError when
/// every object is present.
int draw_negative(Split split, const Scene& scene, const CooccurrenceStats& stats, std::size_t num_objects,
                  std::mt19937_64& rng);

model::Prompt pope_prompt(const Scene& scene, int query);
model::Prompt caption_prompt(const Scene& scene);
std::vector<int> pope_target(bool label);
std::vector<int> caption_target(const Scene& scene);

/// Stable digest of every generated byte, for reproducibility checks.
std::uint64_t corpus_digest(const Corpus& corpus);

}  // namespace lime::bench
