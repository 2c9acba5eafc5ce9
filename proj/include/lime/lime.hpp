// SPDX-License-Identifier: Apache-2.0
// Per-step key/value perturbation that shifts relevance toward perceptual
// tokens, and the decoding loop around it.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lime/model.hpp"
#include "lime/relevance.hpp"

namespace lime::steering {

enum class EditMode { keys_only, values_only, both };
std::string to_string(EditMode m);
EditMode edit_mode_from_string(const std::string& s);

/// Which token's logit is explained while optimizing.
enum class TargetPolicy {
  current,    // argmax of the perturbed distribution, re-read every iteration
  reference,  // argmax of the unperturbed distribution, fixed for the step
};
std::string to_string(TargetPolicy p);
TargetPolicy target_policy_from_string(const std::string& s);

struct LimeConfig {
  std::size_t steps = 7;
  double learning_rate = 3e-4;
  double lambda = 0.1;
  double tau = 0.1;
  EditMode edit_mode = EditMode::both;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  TargetPolicy target = TargetPolicy::current;
  double lrp_epsilon = 1e-6;
  /// Propagate relevance once more under the final perturbation so the
  /// report carries the final loss and Phi_M / Phi_T.
  bool final_evaluation = true;

  void validate() const;
};

nlohmann::json to_json(const LimeConfig& c);
/// Missing keys keep their defaults; throws ConfigError on bad values.
LimeConfig lime_config_from_json(const nlohmann::json& j);

struct IterationRecord {
  double relevance_loss = 0.0;
  double kl_loss = 0.0;
  double total_loss = 0.0;
  int target_token = -1;
  double phi_m = 0.0;
  double phi_t = 0.0;
};

struct StepReport {
  std::size_t position = 0;            // sequence length when the step started
  std::vector<IterationRecord> iterations;  // one per optimizer iteration, before its update
  std::optional<IterationRecord> final;     // under the final perturbation
  int reference_token = -1;
  int chosen_token = -1;
  double delta_max_abs = 0.0;
  double duration_ms = 0.0;
  bool fallback = false;
  std::string fallback_reason;
  /// Token relevance at the start of every iteration, then under the final
  /// perturbation (steps + 1 frames when final_evaluation is on).
  std::vector<std::vector<double>> relevance_frames;

  double initial_loss() const;
  double final_loss() const;
};

nlohmann::json to_json(const StepReport& r);

/// -(1/|M|) sum_{i in M} log softmax(phi / tau)_i over M and T. phi is N x 1.
ad::Var relevance_loss(const ad::Var& token_relevance, const model::MultimodalSequence& seq, double tau);

/// log softmax of a 1 x V logit row, as a graph node.
ad::Var log_softmax(const ad::Var& logits);
/// KL(p_delta || p_ref) with p_delta = softmax(logits) and the reference given
/// by its log-probabilities.
ad::Var kl_regularizer(const ad::Var& logits, const Tensor& reference_log_probs);
/// Plain KL(p || q) for probability rows.
double kl_divergence(const Tensor& p, const Tensor& q);

struct StepResult {
  model::DeltaKV delta;
  StepReport report;
  Tensor logits;  // next-token logits under `delta`
};

/// Optimizes a fresh, zero-initialized perturbation for the next token.
/// `reference_logits`, when given, must be the unperturbed logits for seq
/// (e.g. from an IncrementalDecoder) and saves one forward pass.
StepResult optimize_step_delta(const model::FrozenModel& model, const model::MultimodalSequence& seq,
                               const model::KvCache& cache, const LimeConfig& config,
                               const Tensor* reference_logits = nullptr);

struct DecodeOptions {
  bool sample = false;           // draw from the perturbed distribution instead of argmax
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::function<void(const StepReport&)> on_step;
};

struct DecodeResult {
  std::vector<int> tokens;
  std::vector<StepReport> reports;
  model::MultimodalSequence sequence;  // prompt plus generated tokens
};

/// Stops after EOS (included in the output) or max_tokens.
DecodeResult decode(const model::FrozenModel& model, const model::MultimodalSequence& prompt, const LimeConfig& config,
                    std::size_t max_tokens, const DecodeOptions& options = {});

/// Plain greedy decoding with the KV cache, no perturbation.
std::vector<int> greedy_decode(const model::FrozenModel& model, const model::MultimodalSequence& prompt,
                               std::size_t max_tokens);

}  // namespace lime::steering
