// SPDX-License-Identifier: Apache-2.0
// End-to-end harness: yes/no probing, object listing, ablation grids,
// relevance heatmaps and decoding overhead.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lime/corpus.hpp"
#include "lime/lime.hpp"
#include "lime/metrics.hpp"

namespace lime::bench {

/// A decoding method: plain greedy when `lime` is empty.
struct Arm {
  std::string name = "vanilla";
  std::optional<steering::LimeConfig> lime;

  static Arm vanilla() { return {}; }
  static Arm with_lime(const steering::LimeConfig& config, std::string name = "lime") {
    return {std::move(name), config};
  }
};

/// Condensed per-step optimizer outcome.
struct StepSummary {
  int reference_token = -1;
  int chosen_token = -1;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  bool fallback = false;
  friend bool operator==(const StepSummary&, const StepSummary&) = default;
};

struct PopeRecord {
  std::string arm;
  Split split = Split::random;
  std::size_t scene = 0;
  std::uint64_t scene_id = 0;
  int query = 0;
  bool label = false;
  metrics::Answer prediction = metrics::Answer::unparseable;
  std::vector<int> tokens;
  std::optional<double> spatial_grounding;
  std::optional<double> modality_reliance;
  std::vector<StepSummary> steps;
  double seconds = 0.0;  // wall clock
  friend bool operator==(const PopeRecord&, const PopeRecord&) = default;
};

struct CaptionRecord {
  std::string arm;
  std::size_t scene = 0;
  std::uint64_t scene_id = 0;
  std::vector<int> tokens;
  std::vector<int> mentions;      // object indices
  std::vector<int> ground_truth;  // object indices
  std::vector<StepSummary> steps;
  double seconds = 0.0;
  friend bool operator==(const CaptionRecord&, const CaptionRecord&) = default;
};

/// One row per (arm, split); caption rows use split "caption".
struct AggregateRow {
  std::string arm;
  std::string split;
  std::size_t count = 0;
  double accuracy = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0, yes_ratio = 0.0;
  std::size_t unparseable = 0;
  double chair_s = 0.0, chair_i = 0.0, chair_recall = 0.0;
  double mean_spatial_grounding = 0.0;
  double mean_modality_reliance = 0.0;
  std::size_t undefined_spatial_grounding = 0;
  std::size_t undefined_modality_reliance = 0;
  std::size_t steps = 0;
  std::size_t steps_matching_reference = 0;
  std::size_t steps_loss_improved = 0;
  std::size_t fallbacks = 0;
  double seconds = 0.0;
  friend bool operator==(const AggregateRow&, const AggregateRow&) = default;
};

struct BenchmarkReport {
  std::string task;  // "pope", "caption" or "ablation"
  std::uint64_t seed = 0;
  nlohmann::json config;
  std::vector<PopeRecord> pope;
  std::vector<CaptionRecord> captions;
  std::vector<AggregateRow> aggregates;
  friend bool operator==(const BenchmarkReport&, const BenchmarkReport&) = default;

  const AggregateRow& row(const std::string& arm, const std::string& split) const;
};

struct ExperimentOptions {
  std::size_t max_examples = 0;  // per split (or scenes for captions), 0 = all
  std::size_t max_tokens = 20;
  /// Optional progress hook: (done, total).
  std::function<void(std::size_t, std::size_t)> on_progress;
  /// Optional hook receiving every optimizer step report of LIME arms.
  std::function<void(const steering::StepReport&)> on_step;
};

/// Recomputes every aggregate row from the per-example records.
std::vector<AggregateRow> compute_aggregates(const BenchmarkReport& report);

BenchmarkReport run_pope_experiment(const model::FrozenModel& model, const Corpus& corpus,
                                    const std::vector<Split>& splits, const std::vector<Arm>& arms,
                                    const ExperimentOptions& options = {});

/// Default token budget for listings is 150.
BenchmarkReport run_caption_experiment(const model::FrozenModel& model, const Corpus& corpus,
                                       const std::vector<Arm>& arms, ExperimentOptions options = {});

struct AblationGrid {
  std::vector<steering::EditMode> edit_modes;
  std::vector<double> lambdas;
  bool include_vanilla = true;
};

/// Arm name for a grid cell, e.g. "keys-only@0.1".
std::string ablation_arm_name(steering::EditMode mode, double lambda);

/// One probing run per grid cell on top of `base`.
BenchmarkReport run_ablation(const model::FrozenModel& model, const Corpus& corpus, const std::vector<Split>& splits,
                             const AblationGrid& grid, const steering::LimeConfig& base,
                             const ExperimentOptions& options = {});

/// Copy with every wall-clock field zeroed; reproducibility compares these.
BenchmarkReport without_timing(BenchmarkReport report);

nlohmann::json to_json(const BenchmarkReport& r);
BenchmarkReport report_from_json(const nlohmann::json& j);
/// One CSV row per aggregate.
std::string aggregates_csv(const BenchmarkReport& r);
/// Writes report.json and aggregates.csv into dir (created when missing).
void write_report(const BenchmarkReport& r, const std::filesystem::path& dir);
BenchmarkReport read_report(const std::filesystem::path& file);

struct HeatmapImage {
  std::size_t width = 0, height = 0;
  std::vector<unsigned char> rgb;  // row-major, 3 bytes per pixel
};

/// Per-cell intensity from min-max normalized unsigned modality relevance,
/// ground-truth cells outlined in red. `phi` covers the whole sequence.
HeatmapImage heatmap_image(const std::vector<double>& phi, const model::MultimodalSequence& seq, const Scene& scene,
                           std::size_t cell_pixels = 16);

/// Writes a binary P6 image plus `<path>.json` holding the raw values.
void render_heatmap(const relevance::RelevanceMap& map, const model::MultimodalSequence& seq, const Scene& scene,
                    const std::filesystem::path& path, std::size_t cell_pixels = 16);
void render_heatmap(const std::vector<double>& phi, const model::MultimodalSequence& seq, const Scene& scene,
                    const std::filesystem::path& path, std::size_t cell_pixels = 16);

/// One image per optimizer frame of the first decoding step (steps + 1 frames
/// with final evaluation on). Returns the written paths.
std::vector<std::filesystem::path> render_optimization_frames(const steering::StepReport& report,
                                                              const model::MultimodalSequence& seq,
                                                              const Scene& scene,
                                                              const std::filesystem::path& stem,
                                                              std::size_t cell_pixels = 16);

struct OverheadPoint {
  std::size_t steps = 0;
  metrics::OverheadReport report;
};

/// Times vanilla against LIME for every step count on the same prompts and
/// token budget.
std::vector<OverheadPoint> run_overhead_sweep(const model::FrozenModel& model,
                                              const std::vector<model::MultimodalSequence>& prompts,
                                              const std::vector<std::size_t>& step_counts,
                                              const steering::LimeConfig& base, std::size_t max_tokens);

nlohmann::json to_json(const std::vector<OverheadPoint>& sweep);

}  // namespace lime::bench
