// SPDX-License-Identifier: Apache-2.0
// Grounding and hallucination metrics. All functions are pure.
#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "json.hpp"
#include "lime/model.hpp"

namespace lime::metrics {

/// Per-sample min-max rescaling to [0, 1]. A constant vector maps to zeros.
std::vector<double> min_max_normalize(const std::vector<double>& phi);

/// sum_{i in G} phi_i / sum_{i in M} phi_i on already-normalized relevance.
/// Empty when the modality total is zero.
std::optional<double> spatial_grounding(const std::vector<double>& phi, const model::MultimodalSequence& seq);

/// phi_m / (phi_m + phi_t); empty when the denominator is zero.
std::optional<double> modality_reliance(double phi_m, double phi_t);

struct GroundingScores {
  std::optional<double> spatial_grounding;  // only defined when G is non-empty
  std::optional<double> modality_reliance;
};

/// Normalizes raw token relevance, then computes both ratios.
GroundingScores grounding_scores(const std::vector<double>& raw_phi, const model::MultimodalSequence& seq);

enum class Answer { yes, no, unparseable };
const char* to_string(Answer a);

/// First YES or NO token in a generation.
Answer parse_answer(const std::vector<int>& tokens);

struct ConfusionCounts {
  std::size_t true_positive = 0, false_positive = 0, true_negative = 0, false_negative = 0;
  std::size_t total() const { return true_positive + false_positive + true_negative + false_negative; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct PopeScore {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double yes_ratio = 0.0;
  ConfusionCounts counts;
  std::size_t unparseable = 0;  // scored as "no"
  friend bool operator==(const PopeScore&, const PopeScore&) = default;
};

/// labels: true = yes. Throws ContractError on length mismatch.
PopeScore pope_score(const std::vector<Answer>& predictions, const std::vector<bool>& labels);

/// Object symbols mentioned in a generation, deduplicated, first-mention order.
std::vector<int> extract_mentions(const std::vector<int>& tokens);

struct ChairScore {
  double chair_s = 0.0;
  double chair_i = 0.0;
  double recall = 0.0;  // 1 when there are no ground-truth objects at all
  std::size_t captions = 0, hallucinated_captions = 0;
  std::size_t mentions = 0, hallucinated_mentions = 0;
  std::size_t ground_truth = 0, recalled = 0;
  friend bool operator==(const ChairScore&, const ChairScore&) = default;
};

/// Mention lists are treated as sets. Throws ContractError on length mismatch.
ChairScore chair_score(const std::vector<std::vector<int>>& mentions, const std::vector<std::vector<int>>& ground_truth);

struct TimedRun {
  std::size_t tokens = 0;
  double seconds = 0.0;
};

struct OverheadReport {
  double vanilla_tokens_per_second = 0.0;
  double lime_tokens_per_second = 0.0;
  double slowdown = 0.0;
  std::vector<double> per_run_slowdown;
  std::size_t peak_memory_bytes = 0;
};

/// Pairs run i of both arms (same prompt and budget). Throws DomainError on a
/// zero-duration or zero-token run.
OverheadReport overhead_report(const std::vector<TimedRun>& vanilla, const std::vector<TimedRun>& lime);

/// Resident-set high-water mark of this process, 0 when unavailable.
std::size_t peak_memory_bytes();

nlohmann::json to_json(const PopeScore& s);
nlohmann::json to_json(const ChairScore& s);
nlohmann::json to_json(const OverheadReport& r);

}  // namespace lime::metrics
