// SPDX-License-Identifier: Apache-2.0
#include "lime/relevance.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "lime/errors.hpp"

namespace lime::relevance {
namespace {

using ad::Var;

// Phi / stab(z) elementwise.
Var ratio(const Var& out_relevance, const Var& z, double eps) {
  return ad::mul(out_relevance, ad::reciprocal_eps(z, eps));
}

Var linear_with_z(const Var& x, const Var& w, const Var& z, const Var& out_relevance, double eps) {
  const auto s = ratio(out_relevance, z, eps);
  return ad::mul(x, ad::matmul(s, ad::transpose(w)));
}

double total(const Var& v) { return v->value().sum(); }

Tensor causal_keep(std::size_t n) {
  Tensor keep = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) keep(i, j) = 1.0;
  return keep;
}

void require_node(const Var& v, const char* what) {
  if (!v) throw ContractError(std::string("relevance: trace is missing ") + what);
}

}  // namespace

void LrpConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("LRP epsilon must be finite and non-negative");
}

Var lrp_linear_eps(const Var& x, const Var& w, const Var& out_relevance, double epsilon) {
  return linear_with_z(x, w, ad::matmul(x, w), out_relevance, epsilon);
}

Var lrp_softmax(const Var& x, const Var& a, const Var& out_relevance) {
  require_same_shape(x->value(), a->value(), "lrp_softmax");
  require_same_shape(a->value(), out_relevance->value(), "lrp_softmax");
  const auto row_total = ad::broadcast_like(ad::sum(out_relevance, 1), out_relevance);
  return ad::mul(x, ad::sub(out_relevance, ad::mul(a, row_total)));
}

BilinearRelevance lrp_attention_bilinear(const Var& a, const Var& v, const Var& o, const Var& out_relevance,
                                         double epsilon, const Tensor* keep) {
  require_same_shape(o->value(), out_relevance->value(), "lrp_attention_bilinear");
  if (a->value().cols() != v->value().rows() || a->value().rows() != o->value().rows() ||
      v->value().cols() != o->value().cols()) {
    throw DimensionError("lrp_attention_bilinear: O must be A V");
  }
  Var den = ad::scale(o, 2.0);
  if (keep) {
    require_same_shape(*keep, o->value(), "lrp_attention_bilinear keep");
    Tensor fill(keep->shape());
    for (std::size_t i = 0; i < fill.size(); ++i) fill[i] = 1.0 - (*keep)[i];
    den = ad::add(ad::mul(den, ad::constant(*keep)), ad::constant(std::move(fill)));
  }
  const auto s = ratio(out_relevance, den, epsilon);
  return {ad::mul(a, ad::matmul(s, ad::transpose(v))), ad::mul(v, ad::matmul(ad::transpose(a), s))};
}

SumRelevance lrp_sum(const Var& x, const Var& f, const Var& out_relevance, double epsilon) {
  const auto s = ratio(out_relevance, ad::add(x, f), epsilon);
  return {ad::mul(x, s), ad::mul(f, s)};
}

RelevanceGraph propagate_graph(const model::ForwardTrace& trace, const model::WeightVars& w,
                               const model::ModelConfig& config, int target_token, const LrpConfig& lrp,
                               double seed_scale) {
  lrp.validate();
  require_node(trace.embeddings, "embeddings");
  require_node(trace.final_hidden, "final hidden state");
  require_node(trace.last_normed, "final normalized row");
  if (trace.layers.size() != config.num_layers) throw ContractError("relevance: trace layer count does not match config");
  if (target_token < 0 || static_cast<std::size_t>(target_token) >= config.vocab_size) {
    throw ContractError("relevance: target token outside the vocabulary");
  }
  const double eps = lrp.epsilon;
  const std::size_t n = trace.embeddings->value().rows();
  const std::size_t d = config.model_dim, heads = config.num_heads, dh = config.head_dim();
  const auto t = static_cast<std::size_t>(target_token);

  RelevanceGraph g;
  g.target_token = target_token;
  const auto u_col = ad::slice_cols(w.unembedding, t, t + 1);
  g.target_logit = ad::matmul(trace.last_normed, u_col);

  // Seed: the target logit itself, routed through the unembedding column
  // and the final norm to the last row of the residual stream.
  const auto seed = seed_scale == 1.0 ? g.target_logit : ad::scale(g.target_logit, seed_scale);
  const auto last_rel = linear_with_z(trace.last_normed, u_col, g.target_logit, seed, eps);
  std::vector<Var> rows;
  if (n > 1) rows.push_back(ad::constant(Tensor::matrix(n - 1, d)));
  rows.push_back(lrp_norm_identity(last_rel));
  Var r = ad::concat(rows, 0);

  std::vector<Tensor> totals(config.num_layers + 2);
  totals[config.num_layers + 1] = seed->value();
  totals[config.num_layers] = Tensor::scalar(total(r));
  g.absorbed.assign(config.num_layers, 0.0);
  const Tensor keep = causal_keep(n);

  for (std::size_t l = config.num_layers; l-- > 0;) {
    const auto& lt = trace.layers[l];
    const auto& lw = w.layers[l];
    for (const auto* node : {&lt.input, &lt.normed1, &lt.q, &lt.k_lin, &lt.v_lin, &lt.attn_concat, &lt.attn_out,
                             &lt.mid, &lt.normed2, &lt.ffn_pre, &lt.ffn_act, &lt.ffn_out}) {
      require_node(*node, "a layer activation");
    }
    if (lt.attention.size() != heads || lt.scores.size() != heads) throw ContractError("relevance: trace misses heads");

    // Feed-forward block.
    const auto res2 = lrp_sum(lt.mid, lt.ffn_out, r, eps);
    const auto r_act = linear_with_z(lt.ffn_act, lw.w2, lt.ffn_out, res2.on_f, eps);
    const auto r_pre = r_act;  // ReLU passes relevance through unchanged
    const auto r_n2 = linear_with_z(lt.normed2, lw.w1, lt.ffn_pre, r_pre, eps);
    const auto r_mid = ad::add(res2.on_x, lrp_norm_identity(r_n2));

    // Attention block.
    const auto res1 = lrp_sum(lt.input, lt.attn_out, r_mid, eps);
    const auto r_cat = linear_with_z(lt.attn_concat, lw.wo, lt.attn_out, res1.on_f, eps);
    std::vector<Var> rq, rk, rv;
    double dropped = 0.0;
    for (std::size_t h = 0; h < heads; ++h) {
      const auto r_head = ad::slice_cols(r_cat, h * dh, (h + 1) * dh);
      const auto av = lrp_attention_bilinear(lt.attention[h], lt.v_head[h], lt.head_out[h], r_head, eps);
      const auto r_scores = lrp_softmax(lt.scores[h], lt.attention[h], av.on_a);
      dropped += total(av.on_a) - total(r_scores);
      const auto k_t = ad::transpose(lt.k_head[h]);
      const auto qk = lrp_attention_bilinear(lt.q_scaled[h], k_t, lt.scores[h], r_scores, eps, &keep);
      rq.push_back(qk.on_a);  // the 1/sqrt(dh) scale is a pass-through
      rk.push_back(ad::transpose(qk.on_v));
      rv.push_back(av.on_v);
    }
    g.absorbed[l] = dropped;
    // Relevance on K + dK and V + dV goes to the projections in full; the
    // perturbation's share stays with the position that owns it.
    const auto r_n1 = ad::add(ad::add(linear_with_z(lt.normed1, lw.wq, lt.q, ad::concat(rq, 1), eps),
                                      linear_with_z(lt.normed1, lw.wk, lt.k_lin, ad::concat(rk, 1), eps)),
                              linear_with_z(lt.normed1, lw.wv, lt.v_lin, ad::concat(rv, 1), eps));
    r = ad::add(res1.on_x, lrp_norm_identity(r_n1));
    totals[l] = Tensor::scalar(total(r));
  }
  g.boundary_totals = std::move(totals);
  g.token_relevance = ad::sum(r, 1);
  return g;
}

double RelevanceMap::conservation_drift() const {
  if (per_layer_totals.size() < 2) return 0.0;
  const double ref = std::max(std::abs(per_layer_totals.back()), 1e-300);
  double worst = 0.0;
  for (std::size_t l = 0; l + 1 < per_layer_totals.size(); ++l) {
    const double bias = l < absorbed.size() ? absorbed[l] : 0.0;
    worst = std::max(worst, std::abs(per_layer_totals[l] + bias - per_layer_totals[l + 1]) / ref);
  }
  return worst;
}

double RelevanceMap::raw_drift() const {
  if (per_layer_totals.size() < 2) return 0.0;
  const double ref = std::max(std::abs(per_layer_totals.back()), 1e-300);
  double worst = 0.0;
  for (std::size_t l = 0; l + 1 < per_layer_totals.size(); ++l) {
    worst = std::max(worst, std::abs(per_layer_totals[l] - per_layer_totals[l + 1]) / ref);
  }
  return worst;
}

RelevanceMap evaluate(const RelevanceGraph& g) {
  RelevanceMap m;
  const auto values = g.token_relevance->value().values();
  m.token_relevance.assign(values.begin(), values.end());
  for (const auto& t : g.boundary_totals) m.per_layer_totals.push_back(t.item());
  m.absorbed = g.absorbed;
  m.target_token = g.target_token;
  m.target_logit = g.target_logit->value().item();
  return m;
}

RelevanceMap propagate(const model::ForwardTrace& trace, const model::WeightVars& w, const model::ModelConfig& config,
                       int target_token, const LrpConfig& lrp, double seed_scale) {
  return evaluate(propagate_graph(trace, w, config, target_token, lrp, seed_scale));
}

RelevanceMap explain(const model::FrozenModel& model, const model::MultimodalSequence& seq, const model::DeltaKV* delta,
                     int target_token, const LrpConfig& lrp) {
  std::optional<model::DeltaVars> dv;
  if (delta) dv = model::DeltaVars::constants(*delta);
  const auto trace = model::forward_graph(model.vars(), model.config(), ad::constant(seq.embeddings), dv ? &*dv : nullptr);
  if (target_token < 0) target_token = model::argmax(trace.logits->value());
  return propagate(trace, model.vars(), model.config(), target_token, lrp);
}

Aggregate aggregate(const std::vector<double>& phi, const model::MultimodalSequence& seq) {
  std::vector<char> seen(phi.size(), 0);
  Aggregate out;
  for (auto i : seq.modality_indices) {
    if (i >= phi.size()) throw ContractError("aggregate: modality index out of range");
    seen[i] = 1;
    out.modality += phi[i];
  }
  for (auto j : seq.text_indices) {
    if (j >= phi.size()) throw ContractError("aggregate: text index out of range");
    if (seen[j]) throw ContractError("aggregate: modality and text index sets overlap");
    out.text += phi[j];
  }
  return out;
}

Aggregate aggregate(const RelevanceMap& map, const model::MultimodalSequence& seq) {
  return aggregate(map.token_relevance, seq);
}

nlohmann::json to_json(const RelevanceMap& map, const model::MultimodalSequence& seq) {
  const auto agg = aggregate(map, seq);
  nlohmann::json tokens = nlohmann::json::array();
  for (std::size_t i = 0; i < map.token_relevance.size(); ++i) {
    tokens.push_back({{"index", i}, {"token", i < seq.token_ids.size() ? seq.token_ids[i] : -1},
                      {"relevance", map.token_relevance[i]}});
  }
  return {{"target_token", map.target_token}, {"target_logit", map.target_logit},
          {"tokens", tokens},                 {"phi_m", agg.modality},
          {"phi_t", agg.text},                {"per_layer_totals", map.per_layer_totals},
          {"absorbed_bias", map.absorbed},    {"conservation_drift", map.conservation_drift()}};
}

}  // namespace lime::relevance
