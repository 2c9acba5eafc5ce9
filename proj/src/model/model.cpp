// SPDX-License-Identifier: Apache-2.0
#include "lime/model.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <set>

#include "lime/errors.hpp"

namespace lime::model {

namespace {

Tensor gaussian(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t = Tensor::matrix(rows, cols);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

ad::Var normalize(const ad::Var& x, const ad::Var& gain, Normalization kind) {
  const bool centered = kind == Normalization::layer_norm;
  ad::Var base = x;
  if (centered) {
    const auto mean = ad::scale(ad::sum(x, 1), 1.0 / static_cast<double>(x->value().cols()));
    base = ad::sub(x, ad::broadcast_like(mean, x));
  }
  const auto inv = ad::reciprocal_eps(ad::norm_stats(x, centered, kNormEps), 0.0);
  return ad::mul(ad::mul(base, ad::broadcast_like(inv, x)), ad::broadcast_like(gain, x));
}

ad::Var tile_heads(const ad::Var& delta, std::size_t heads) {
  std::vector<ad::Var> parts(heads, delta);
  return ad::concat(parts, 1);
}

void check_delta(const DeltaVars* delta, const ModelConfig& config, std::size_t n) {
  if (!delta) return;
  if (delta->keys.size() != config.num_layers || delta->values.size() != config.num_layers) {
    throw ContractError("delta must hold one entry per layer");
  }
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    for (const auto* v : {&delta->keys[l], &delta->values[l]}) {
      if (!*v) continue;
      const auto& t = (*v)->value();
      if (t.rows() != n || t.cols() != config.head_dim()) {
        throw ContractError("delta shape " + shape_string(t.shape()) + " does not match sequence length " +
                            std::to_string(n) + " and head dim " + std::to_string(config.head_dim()));
      }
    }
  }
}

}  // namespace

std::string to_string(Normalization n) { return n == Normalization::layer_norm ? "layer-norm" : "rms-norm"; }

Normalization normalization_from_string(const std::string& s) {
  if (s == "layer-norm") return Normalization::layer_norm;
  if (s == "rms-norm") return Normalization::rms_norm;
  throw ConfigError("unknown normalization '" + s + "'");
}

void ModelConfig::validate() const {
  if (num_layers == 0 || num_heads == 0 || model_dim == 0 || vocab_size == 0 || max_sequence == 0 || ffn_dim == 0 ||
      patch_dim == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (model_dim % num_heads != 0) throw ConfigError("model_dim must be divisible by num_heads");
  if (vocab_size <= static_cast<std::size_t>(Vocabulary::first_object)) {
    throw ConfigError("vocab_size too small for the reserved YES/NO/EOS and prompt tokens");
  }
}

ModelWeights ModelWeights::initialize(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.model_dim;
  const double fan = 1.0 / std::sqrt(static_cast<double>(d));
  ModelWeights w;
  w.config = config;
  w.token_embedding = gaussian(rng, config.vocab_size, d, 0.5);
  w.position_embedding = gaussian(rng, config.max_sequence, d, 0.1);
  // One-hot patches then land at the scale of token embeddings.
  w.projector = gaussian(rng, config.patch_dim, d, 0.5);
  w.null_embedding = gaussian(rng, 1, d, 0.5);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    LayerWeights lw;
    lw.norm1_gain = Tensor::matrix(1, d, 1.0);
    lw.wq = gaussian(rng, d, d, fan);
    lw.wk = gaussian(rng, d, d, fan);
    lw.wv = gaussian(rng, d, d, fan);
    lw.wo = gaussian(rng, d, d, fan / std::sqrt(2.0 * config.num_layers));
    lw.norm2_gain = Tensor::matrix(1, d, 1.0);
    lw.w1 = gaussian(rng, d, config.ffn_dim, fan);
    lw.w2 = gaussian(rng, config.ffn_dim, d,
                     1.0 / std::sqrt(static_cast<double>(config.ffn_dim) * 2.0 * config.num_layers));
    w.layers.push_back(std::move(lw));
  }
  w.final_gain = Tensor::matrix(1, d, 1.0);
  w.unembedding = gaussian(rng, d, config.vocab_size, fan);
  return w;
}

std::vector<std::pair<std::string, Tensor*>> ModelWeights::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out{
      {"token_embedding", &token_embedding},
      {"position_embedding", &position_embedding},
      {"projector", &projector},
      {"null_embedding", &null_embedding},
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    auto& lw = layers[l];
    out.insert(out.end(), {{p + "norm1_gain", &lw.norm1_gain},
                           {p + "wq", &lw.wq},
                           {p + "wk", &lw.wk},
                           {p + "wv", &lw.wv},
                           {p + "wo", &lw.wo},
                           {p + "norm2_gain", &lw.norm2_gain},
                           {p + "w1", &lw.w1},
                           {p + "w2", &lw.w2}});
  }
  out.emplace_back("final_gain", &final_gain);
  out.emplace_back("unembedding", &unembedding);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelWeights::named_tensors() const {
  auto mutable_list = const_cast<ModelWeights*>(this)->named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mutable_list.size());
  for (auto& [name, t] : mutable_list) out.emplace_back(name, t);
  return out;
}

void MultimodalSequence::validate() const {
  const std::size_t n = length();
  if (embeddings.rank() != 2 || embeddings.rows() != n) throw ContractError("embeddings rows must equal token count");
  std::vector<int> seen(n, 0);
  for (auto i : modality_indices) {
    if (i >= n) throw ContractError("modality index out of range");
    seen[i] |= 1;
  }
  for (auto i : text_indices) {
    if (i >= n) throw ContractError("text index out of range");
    if (seen[i] & 1) throw ContractError("modality and text index sets overlap");
    seen[i] |= 2;
  }
  for (std::size_t i = 0; i < n; ++i)
    if (!seen[i]) throw ContractError("position " + std::to_string(i) + " is neither modality nor text");
  const std::set<std::size_t> m(modality_indices.begin(), modality_indices.end());
  for (auto g : grounding_indices)
    if (!m.contains(g)) throw ContractError("grounding index outside the modality set");
}

DeltaKV DeltaKV::zeros(const ModelConfig& config, std::size_t length, bool with_keys, bool with_values) {
  DeltaKV d;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    d.keys.push_back(with_keys ? Tensor::matrix(length, config.head_dim()) : Tensor());
    d.values.push_back(with_values ? Tensor::matrix(length, config.head_dim()) : Tensor());
  }
  return d;
}

std::size_t DeltaKV::length() const {
  for (const auto* list : {&keys, &values})
    for (const auto& t : *list)
      if (!t.empty()) return t.rows();
  return 0;
}

bool DeltaKV::is_zero() const {
  for (const auto* list : {&keys, &values})
    for (const auto& t : *list)
      for (double v : t.data())
        if (v != 0.0) return false;
  return true;
}

DeltaVars DeltaVars::constants(const DeltaKV& delta) {
  DeltaVars out;
  for (const auto& t : delta.keys) out.keys.push_back(t.empty() ? nullptr : ad::constant(t));
  for (const auto& t : delta.values) out.values.push_back(t.empty() ? nullptr : ad::constant(t));
  return out;
}

namespace {

WeightVars wrap(const ModelWeights& w, ad::Var (*leaf)(Tensor)) {
  WeightVars v;
  v.token_embedding = leaf(w.token_embedding);
  v.position_embedding = leaf(w.position_embedding);
  v.projector = leaf(w.projector);
  v.null_embedding = leaf(w.null_embedding);
  for (const auto& lw : w.layers) {
    v.layers.push_back({leaf(lw.norm1_gain), leaf(lw.wq), leaf(lw.wk), leaf(lw.wv), leaf(lw.wo), leaf(lw.norm2_gain),
                        leaf(lw.w1), leaf(lw.w2)});
  }
  v.final_gain = leaf(w.final_gain);
  v.unembedding = leaf(w.unembedding);
  return v;
}

}  // namespace

WeightVars WeightVars::constants(const ModelWeights& w) { return wrap(w, &ad::constant); }
WeightVars WeightVars::variables(const ModelWeights& w) { return wrap(w, &ad::variable); }

std::vector<ad::Var> WeightVars::all() const {
  std::vector<ad::Var> out{token_embedding, position_embedding, projector, null_embedding};
  for (const auto& l : layers) out.insert(out.end(), {l.norm1_gain, l.wq, l.wk, l.wv, l.wo, l.norm2_gain, l.w1, l.w2});
  out.push_back(final_gain);
  out.push_back(unembedding);
  return out;
}

FrozenModel::FrozenModel(ModelWeights weights) : weights_(std::move(weights)), vars_(WeightVars::constants(weights_)) {
  weights_.config.validate();
}

Tensor causal_mask(std::size_t n) {
  Tensor m = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m(i, j) = kMaskValue;
  return m;
}

Tensor project_perceptual(const Tensor& patches, const Tensor& projector) {
  require_matrix(patches, "project_perceptual");
  require_matrix(projector, "project_perceptual");
  if (patches.cols() != projector.rows()) {
    throw DimensionError("patch dimension " + std::to_string(patches.cols()) + " does not match projector input " +
                         std::to_string(projector.rows()));
  }
  return kernels::matmul(patches, projector);
}

ad::Var embed_graph(const WeightVars& w, const ModelConfig& config, const Prompt& prompt) {
  std::vector<ad::Var> rows;
  auto token_row = [&](int t) {
    if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size) {
      throw ContractError("token id " + std::to_string(t) + " outside the vocabulary");
    }
    return ad::slice_rows(w.token_embedding, static_cast<std::size_t>(t), static_cast<std::size_t>(t) + 1);
  };
  for (int t : prompt.prefix) rows.push_back(token_row(t));
  if (!prompt.patches.empty()) {
    if (prompt.patches.cols() != config.patch_dim) {
      throw DimensionError("patch dimension " + std::to_string(prompt.patches.cols()) +
                           " does not match the model's " + std::to_string(config.patch_dim));
    }
    if (prompt.null_modality) {
      rows.push_back(ad::broadcast(w.null_embedding, prompt.patches.rows(), config.model_dim));
    } else {
      rows.push_back(ad::matmul(ad::constant(prompt.patches), w.projector));
    }
  }
  for (int t : prompt.suffix) rows.push_back(token_row(t));
  if (rows.empty()) throw ContractError("empty prompt");
  const auto x = ad::concat(rows, 0);
  const std::size_t n = x->value().rows();
  if (n > config.max_sequence) throw ContractError("prompt longer than max_sequence");
  return ad::add(x, ad::slice_rows(w.position_embedding, 0, n));
}

MultimodalSequence embed_prompt(const FrozenModel& model, const Prompt& prompt) {
  MultimodalSequence seq;
  seq.embeddings = embed_graph(model.vars(), model.config(), prompt)->value();
  const std::size_t p = prompt.patches.empty() ? 0 : prompt.patches.rows();
  std::size_t pos = 0;
  for (int t : prompt.prefix) {
    seq.token_ids.push_back(t);
    seq.text_indices.push_back(pos++);
  }
  const std::size_t modality_start = pos;
  for (std::size_t i = 0; i < p; ++i) {
    seq.token_ids.push_back(-1);
    seq.modality_indices.push_back(pos++);
  }
  for (int t : prompt.suffix) {
    seq.token_ids.push_back(t);
    seq.text_indices.push_back(pos++);
  }
  for (auto cell : prompt.grounding_cells) {
    if (cell >= p) throw ContractError("grounding cell outside the patch grid");
    seq.grounding_indices.push_back(modality_start + cell);
  }
  return seq;
}

void append_token(const FrozenModel& model, MultimodalSequence& seq, int token) {
  const auto& cfg = model.config();
  const std::size_t n = seq.length();
  if (n >= cfg.max_sequence) throw ContractError("sequence reached max_sequence");
  if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size) throw ContractError("token outside vocabulary");
  const auto& w = model.vars();
  const auto row = ad::add(ad::slice_rows(w.token_embedding, static_cast<std::size_t>(token), static_cast<std::size_t>(token) + 1),
                           ad::slice_rows(w.position_embedding, n, n + 1));
  const auto& r = row->value();
  Tensor grown = Tensor::matrix(n + 1, cfg.model_dim);
  std::copy(seq.embeddings.data().begin(), seq.embeddings.data().end(), grown.data().begin());
  std::copy(r.data().begin(), r.data().end(), grown.data().begin() + static_cast<std::ptrdiff_t>(n * cfg.model_dim));
  seq.embeddings = std::move(grown);
  seq.token_ids.push_back(token);
  seq.text_indices.push_back(n);
  ++seq.generated_count;
}

ForwardTrace forward_graph(const WeightVars& w, const ModelConfig& config, const ad::Var& embeddings,
                           const DeltaVars* delta, bool all_rows) {
  const std::size_t n = embeddings->value().rows();
  if (embeddings->value().cols() != config.model_dim) throw DimensionError("embedding width does not match model_dim");
  check_delta(delta, config, n);
  const std::size_t heads = config.num_heads, dh = config.head_dim();
  const double qscale = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardTrace trace;
  trace.embeddings = embeddings;
  trace.causal_mask = ad::constant(causal_mask(n));
  ad::Var x = embeddings;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const auto& lw = w.layers[l];
    LayerTrace t;
    t.input = x;
    t.normed1 = normalize(x, lw.norm1_gain, config.normalization);
    t.q = ad::matmul(t.normed1, lw.wq);
    t.k_lin = ad::matmul(t.normed1, lw.wk);
    t.v_lin = ad::matmul(t.normed1, lw.wv);
    t.k = (delta && delta->keys[l]) ? ad::add(t.k_lin, tile_heads(delta->keys[l], heads)) : t.k_lin;
    t.v = (delta && delta->values[l]) ? ad::add(t.v_lin, tile_heads(delta->values[l], heads)) : t.v_lin;
    for (std::size_t h = 0; h < heads; ++h) {
      const auto qs = ad::scale(ad::slice_cols(t.q, h * dh, (h + 1) * dh), qscale);
      const auto kh = ad::slice_cols(t.k, h * dh, (h + 1) * dh);
      const auto vh = ad::slice_cols(t.v, h * dh, (h + 1) * dh);
      const auto s = ad::matmul(qs, ad::transpose(kh));
      const auto a = ad::softmax(ad::add(s, trace.causal_mask), 1);
      t.q_scaled.push_back(qs);
      t.k_head.push_back(kh);
      t.v_head.push_back(vh);
      t.scores.push_back(s);
      t.attention.push_back(a);
      t.head_out.push_back(ad::matmul(a, vh));
    }
    t.attn_concat = ad::concat(t.head_out, 1);
    t.attn_out = ad::matmul(t.attn_concat, lw.wo);
    t.mid = ad::add(x, t.attn_out);
    t.normed2 = normalize(t.mid, lw.norm2_gain, config.normalization);
    t.ffn_pre = ad::matmul(t.normed2, lw.w1);
    t.ffn_act = ad::relu(t.ffn_pre);
    t.ffn_out = ad::matmul(t.ffn_act, lw.w2);
    t.output = ad::add(t.mid, t.ffn_out);
    x = t.output;
    trace.layers.push_back(std::move(t));
  }
  trace.final_hidden = x;
  trace.final_normed = normalize(x, w.final_gain, config.normalization);
  trace.last_normed = ad::slice_rows(trace.final_normed, n - 1, n);
  trace.logits = ad::matmul(all_rows ? trace.final_normed : trace.last_normed, w.unembedding);
  return trace;
}

Tensor forward_with_delta(const FrozenModel& model, const MultimodalSequence& seq, const DeltaKV* delta,
                          const KvCache& cache) {
  const std::size_t n = seq.length();
  if (cache.length() != n) {
    throw ContractError("KV cache covers " + std::to_string(cache.length()) + " positions, sequence has " +
                        std::to_string(n));
  }
  if (delta && delta->length() != n) {
    throw ContractError("delta length " + std::to_string(delta->length()) + " does not match sequence length " +
                        std::to_string(n));
  }
  std::optional<DeltaVars> dv;
  if (delta) dv = DeltaVars::constants(*delta);
  const auto trace = forward_graph(model.vars(), model.config(), ad::constant(seq.embeddings), dv ? &*dv : nullptr);
  return trace.logits->value();
}

IncrementalDecoder::IncrementalDecoder(const FrozenModel& model) : model_(model) {
  cache_.keys.assign(model.config().num_layers, Tensor::matrix(0, model.config().model_dim));
  cache_.values.assign(model.config().num_layers, Tensor::matrix(0, model.config().model_dim));
}

namespace {

Tensor append_row(const Tensor& m, const Tensor& row) {
  Tensor out = Tensor::matrix(m.rows() + 1, m.cols());
  std::copy(m.data().begin(), m.data().end(), out.data().begin());
  std::copy(row.data().begin(), row.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(m.size()));
  return out;
}

}  // namespace

// Mirrors forward_graph for a single new row; it calls the same ops in the
// same order so the logits agree bit for bit.
Tensor IncrementalDecoder::push(const Tensor& embedding_row) {
  const auto& cfg = model_.config();
  const auto& w = model_.vars();
  if (embedding_row.rows() != 1 || embedding_row.cols() != cfg.model_dim) {
    throw DimensionError("push expects a 1 x model_dim row");
  }
  if (cache_.length() >= cfg.max_sequence) throw ContractError("KV cache is full");
  const std::size_t heads = cfg.num_heads, dh = cfg.head_dim();
  const double qscale = 1.0 / std::sqrt(static_cast<double>(dh));
  ad::Var x = ad::constant(embedding_row);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto& lw = w.layers[l];
    const auto h = normalize(x, lw.norm1_gain, cfg.normalization);
    const auto q = ad::matmul(h, lw.wq);
    cache_.keys[l] = append_row(cache_.keys[l], ad::matmul(h, lw.wk)->value());
    cache_.values[l] = append_row(cache_.values[l], ad::matmul(h, lw.wv)->value());
    const auto k = ad::constant(cache_.keys[l]);
    const auto v = ad::constant(cache_.values[l]);
    std::vector<ad::Var> outs;
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const auto qs = ad::scale(ad::slice_cols(q, hd * dh, (hd + 1) * dh), qscale);
      const auto s = ad::matmul(qs, ad::transpose(ad::slice_cols(k, hd * dh, (hd + 1) * dh)));
      const auto a = ad::softmax(s, 1);
      outs.push_back(ad::matmul(a, ad::slice_cols(v, hd * dh, (hd + 1) * dh)));
    }
    const auto mid = ad::add(x, ad::matmul(ad::concat(outs, 1), lw.wo));
    const auto h2 = normalize(mid, lw.norm2_gain, cfg.normalization);
    x = ad::add(mid, ad::matmul(ad::relu(ad::matmul(h2, lw.w1)), lw.w2));
  }
  return ad::matmul(normalize(x, w.final_gain, cfg.normalization), w.unembedding)->value();
}

Tensor IncrementalDecoder::sync(const MultimodalSequence& seq) {
  if (cache_.length() > seq.length()) throw ContractError("cache is ahead of the sequence");
  if (cache_.length() == seq.length()) throw ContractError("cache already covers the sequence");
  Tensor logits;
  for (std::size_t i = cache_.length(); i < seq.length(); ++i) logits = push(seq.embeddings.row_slice(i, i + 1));
  return logits;
}

Tensor softmax_row(const Tensor& logits) { return kernels::softmax(logits, 1); }

int argmax(const Tensor& row) {
  if (row.empty()) throw ContractError("argmax of empty tensor");
  const auto d = row.data();
  return static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
}

}  // namespace lime::model
