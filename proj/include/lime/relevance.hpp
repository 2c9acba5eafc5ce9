// SPDX-License-Identifier: Apache-2.0
// Attention-aware layer-wise relevance propagation through the toy model.
// Every rule is built from differentiable graph ops, so token relevance can
// itself be differentiated with respect to the key/value perturbation.
#pragma once

#include <vector>

#include "json.hpp"
#include "lime/autograd.hpp"
#include "lime/model.hpp"

namespace lime::relevance {

struct LrpConfig {
  /// Stabilizer added to every denominator (with the denominator's sign).
  /// Zero gives exact conservation and is meant for tests.
  double epsilon = 1e-6;
  void validate() const;
};

/// z = x W, Phi_in = x * ((Phi_out / stab(z)) W^T).
/// x: N x a, w: a x b, out_relevance: N x b. Returns N x a.
ad::Var lrp_linear_eps(const ad::Var& x, const ad::Var& w, const ad::Var& out_relevance, double epsilon);

/// Row-wise softmax rule: Phi_in_j = x_j (Phi_j - a_j sum_i Phi_i).
ad::Var lrp_softmax(const ad::Var& x, const ad::Var& a, const ad::Var& out_relevance);

struct BilinearRelevance {
  ad::Var on_a;  // same shape as A
  ad::Var on_v;  // same shape as V
};

/// O = A V split evenly between both factors:
/// Phi(A)_ji = sum_p A_ji V_ip / (2 O_jp + eps) Phi_jp, and the transpose sum for V.
/// Entries where `keep` (same shape as O, 0/1) is zero carry no relevance and
/// get a unit denominator instead of being tested for singularity.
BilinearRelevance lrp_attention_bilinear(const ad::Var& a, const ad::Var& v, const ad::Var& o,
                                         const ad::Var& out_relevance, double epsilon, const Tensor* keep = nullptr);

inline ad::Var lrp_norm_identity(const ad::Var& out_relevance) { return out_relevance; }

/// Residual sum out = x + f, split in proportion to each addend.
struct SumRelevance {
  ad::Var on_x, on_f;
};
SumRelevance lrp_sum(const ad::Var& x, const ad::Var& f, const ad::Var& out_relevance, double epsilon);

/// Relevance as graph nodes, for use inside a loss.
struct RelevanceGraph {
  ad::Var token_relevance;                // N x 1, signed row sums at the input embeddings
  ad::Var target_logit;                   // 1 x 1
  std::vector<Tensor> boundary_totals;    // layer inputs 0..L-1, final hidden, output seed
  std::vector<double> absorbed;           // per layer: relevance dropped by the softmax rule
  int target_token = -1;
};

/// Propagates from logit `target_token` at the last position back to the
/// input embeddings of `trace`. The output is seeded with seed_scale times
/// the target logit.
RelevanceGraph propagate_graph(const model::ForwardTrace& trace, const model::WeightVars& w,
                               const model::ModelConfig& config, int target_token, const LrpConfig& lrp,
                               double seed_scale = 1.0);

struct RelevanceMap {
  std::vector<double> token_relevance;
  /// Totals at each residual boundary: index 0 is the embeddings, index L the
  /// final hidden state, index L+1 the seeded output.
  std::vector<double> per_layer_totals;
  /// Per layer: relevance consumed by the dropped softmax bias term.
  std::vector<double> absorbed;
  int target_token = -1;
  double target_logit = 0.0;

  /// Largest per-boundary mismatch after adding back the absorbed bias,
  /// relative to the seeded output.
  double conservation_drift() const;
  /// Same without the bias bookkeeping.
  double raw_drift() const;
};

RelevanceMap evaluate(const RelevanceGraph& g);

RelevanceMap propagate(const model::ForwardTrace& trace, const model::WeightVars& w, const model::ModelConfig& config,
                       int target_token, const LrpConfig& lrp, double seed_scale = 1.0);

/// Convenience: forward pass under delta, then propagation for target_token
/// (or the argmax when target_token < 0).
RelevanceMap explain(const model::FrozenModel& model, const model::MultimodalSequence& seq,
                     const model::DeltaKV* delta, int target_token, const LrpConfig& lrp);

struct Aggregate {
  double modality = 0.0;
  double text = 0.0;
};

/// Throws ContractError when M and T overlap or an index is out of range.
Aggregate aggregate(const RelevanceMap& map, const model::MultimodalSequence& seq);
Aggregate aggregate(const std::vector<double>& phi, const model::MultimodalSequence& seq);

nlohmann::json to_json(const RelevanceMap& map, const model::MultimodalSequence& seq);

}  // namespace lime::relevance
