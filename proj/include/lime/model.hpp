// SPDX-License-Identifier: Apache-2.0
// Toy multimodal decoder-only transformer whose attention accepts additive
// key/value perturbations.
#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "lime/autograd.hpp"
#include "lime/tensor.hpp"

namespace lime::model {

enum class Normalization { layer_norm, rms_norm };

std::string to_string(Normalization n);
Normalization normalization_from_string(const std::string& s);

/// Fixed token layout of the synthetic vocabulary.
struct Vocabulary {
  static constexpr int bos = 0;
  static constexpr int eos = 1;
  static constexpr int yes = 2;
  static constexpr int no = 3;
  static constexpr int ask = 4;            // "is there"
  static constexpr int please = 5;         // instruction pair: "please answer yes or no"
  static constexpr int answer_yes_no = 6;
  static constexpr int list = 7;           // "list the objects"
  static constexpr int first_topic = 8;
  static constexpr int max_topics = 8;
  static constexpr int first_object = first_topic + max_topics;

  static int topic(int t) { return first_topic + t; }
  static int object(int o) { return first_object + o; }
  static bool is_object(int token) { return token >= first_object; }
  static int object_index(int token) { return token - first_object; }
};

struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t model_dim = 32;
  std::size_t vocab_size = 96;
  std::size_t max_sequence = 128;
  std::size_t ffn_dim = 64;
  std::size_t patch_dim = 48;
  Normalization normalization = Normalization::rms_norm;

  std::size_t head_dim() const { return model_dim / num_heads; }
  /// Throws ConfigError when an invariant does not hold.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
  Tensor norm1_gain, wq, wk, wv, wo;
  Tensor norm2_gain, w1, w2;
};

struct ModelWeights {
  ModelConfig config;
  Tensor token_embedding;     // vocab x d
  Tensor position_embedding;  // max_sequence x d
  Tensor projector;           // patch_dim x d
  Tensor null_embedding;      // 1 x d, stands in for dropped perceptual input
  std::vector<LayerWeights> layers;
  Tensor final_gain;          // 1 x d
  Tensor unembedding;         // d x vocab

  static ModelWeights initialize(const ModelConfig& config, std::uint64_t seed);

  /// Stable (name, tensor) listing used by training and serialization.
  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
};

/// A prompt before embedding: text prefix, perceptual patches, text suffix.
struct Prompt {
  std::vector<int> prefix;         // usually just BOS
  Tensor patches;                  // P x patch_dim, may be empty
  bool null_modality = false;      // replace every patch by the null embedding
  std::vector<int> suffix;
  std::vector<std::size_t> grounding_cells;  // cell indices of the queried region
};

/// Embedded token sequence with its modality/text partition.
struct MultimodalSequence {
  Tensor embeddings;                        // N x d, includes position embeddings
  std::vector<int> token_ids;               // -1 at modality positions
  std::vector<std::size_t> modality_indices;
  std::vector<std::size_t> text_indices;    // prompt text plus generated tokens
  std::vector<std::size_t> grounding_indices;
  std::size_t generated_count = 0;

  std::size_t length() const { return token_ids.size(); }
  /// Checks M and T are disjoint and cover every position, G is inside M.
  void validate() const;
};

/// Per-layer cached keys and values, N x d (heads side by side).
struct KvCache {
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
  std::size_t length() const { return keys.empty() ? 0 : keys.front().rows(); }
};

/// Per-layer additive key/value perturbations, N x head_dim, shared by all
/// heads of a layer. An empty tensor means "no perturbation of this kind".
struct DeltaKV {
  std::vector<Tensor> keys;
  std::vector<Tensor> values;

  static DeltaKV zeros(const ModelConfig& config, std::size_t length, bool with_keys = true, bool with_values = true);
  std::size_t length() const;
  bool is_zero() const;
};

/// Weights wrapped as graph leaves, shared by every graph built on them.
struct WeightVars {
  ad::Var token_embedding, position_embedding, projector, null_embedding, final_gain, unembedding;
  struct Layer {
    ad::Var norm1_gain, wq, wk, wv, wo, norm2_gain, w1, w2;
  };
  std::vector<Layer> layers;

  static WeightVars constants(const ModelWeights& w);
  static WeightVars variables(const ModelWeights& w);
  /// Same order as ModelWeights::named_tensors().
  std::vector<ad::Var> all() const;
};

/// Immutable trained model plus its constant graph leaves. Safe to share
/// between decoding sessions.
class FrozenModel {
 public:
  explicit FrozenModel(ModelWeights weights);
  const ModelWeights& weights() const noexcept { return weights_; }
  const ModelConfig& config() const noexcept { return weights_.config; }
  const WeightVars& vars() const noexcept { return vars_; }

 private:
  ModelWeights weights_;
  WeightVars vars_;
};

/// Graph nodes retained from a forward pass; relevance propagation reads them.
struct LayerTrace {
  ad::Var input;
  ad::Var normed1;
  ad::Var q, k_lin, k, v_lin, v;
  std::vector<ad::Var> q_scaled;  // per head, q * 1/sqrt(head_dim)
  std::vector<ad::Var> k_head, v_head;
  std::vector<ad::Var> scores;    // per head, before the causal mask
  std::vector<ad::Var> attention; // per head, softmax of masked scores
  std::vector<ad::Var> head_out;  // per head, attention * v_head
  ad::Var attn_concat, attn_out, mid;
  ad::Var normed2, ffn_pre, ffn_act, ffn_out;
  ad::Var output;
};

struct ForwardTrace {
  ad::Var embeddings;
  std::vector<LayerTrace> layers;
  ad::Var final_hidden;  // last residual stream, N x d
  ad::Var final_normed;  // N x d
  ad::Var last_normed;   // 1 x d, row the logits are read from
  ad::Var logits;        // 1 x vocab (last position) or N x vocab
  ad::Var causal_mask;   // N x N, 0 or -1e9
};

struct DeltaVars {
  std::vector<ad::Var> keys;    // null entries: no perturbation
  std::vector<ad::Var> values;
  static DeltaVars constants(const DeltaKV& delta);
};

/// Causal mask with 0 on and below the diagonal and a large negative value above.
Tensor causal_mask(std::size_t n);
inline constexpr double kMaskValue = -1e9;
inline constexpr double kNormEps = 1e-5;

/// Maps patches into the embedding space: patches * projector.
Tensor project_perceptual(const Tensor& patches, const Tensor& projector);

/// Graph-building embedding (differentiable w.r.t. the weights when they are variables).
ad::Var embed_graph(const WeightVars& w, const ModelConfig& config, const Prompt& prompt);
MultimodalSequence embed_prompt(const FrozenModel& model, const Prompt& prompt);
/// Appends a generated token (its embedding lands in T).
void append_token(const FrozenModel& model, MultimodalSequence& seq, int token);

/// Full-sequence forward pass. Attention uses K + dK and V + dV wherever a
/// perturbation is supplied.
ForwardTrace forward_graph(const WeightVars& w, const ModelConfig& config, const ad::Var& embeddings,
                           const DeltaVars* delta, bool all_rows = false);

/// Next-token logits (1 x vocab). With delta absent these are the reference
/// logits. The cache must cover the sequence.
Tensor forward_with_delta(const FrozenModel& model, const MultimodalSequence& seq, const DeltaKV* delta,
                          const KvCache& cache);

/// Graph-free decoder that extends a KV cache one position at a time.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const FrozenModel& model);
  /// Feeds one embedding row (1 x d, position already added) and returns the
  /// next-token logits (1 x vocab).
  Tensor push(const Tensor& embedding_row);
  /// Feeds every row of seq not yet in the cache; returns the last logits.
  Tensor sync(const MultimodalSequence& seq);
  const KvCache& cache() const noexcept { return cache_; }

 private:
  const FrozenModel& model_;
  KvCache cache_;
};

Tensor softmax_row(const Tensor& logits);
int argmax(const Tensor& row);

}  // namespace lime::model
