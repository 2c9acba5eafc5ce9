// SPDX-License-Identifier: Apache-2.0
#include "lime/lime.hpp"

#include <chrono>
#include <cmath>
#include <random>

#include "lime/adam.hpp"
#include "lime/errors.hpp"

namespace lime::steering {

std::string to_string(EditMode m) {
  switch (m) {
    case EditMode::keys_only: return "keys-only";
    case EditMode::values_only: return "values-only";
    case EditMode::both: return "both";
  }
  return "both";
}

EditMode edit_mode_from_string(const std::string& s) {
  if (s == "keys-only") return EditMode::keys_only;
  if (s == "values-only") return EditMode::values_only;
  if (s == "both") return EditMode::both;
  throw ConfigError("unknown edit_mode '" + s + "' (expected keys-only, values-only or both)");
}

std::string to_string(TargetPolicy p) { return p == TargetPolicy::reference ? "reference" : "current"; }

TargetPolicy target_policy_from_string(const std::string& s) {
  if (s == "current") return TargetPolicy::current;
  if (s == "reference") return TargetPolicy::reference;
  throw ConfigError("unknown target policy '" + s + "'");
}

void LimeConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  relevance::LrpConfig{lrp_epsilon}.validate();
}

nlohmann::json to_json(const LimeConfig& c) {
  return {{"steps", c.steps},           {"learning_rate", c.learning_rate},
          {"lambda", c.lambda},         {"tau", c.tau},
          {"edit_mode", to_string(c.edit_mode)},
          {"adam_beta1", c.adam_beta1}, {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},     {"target", to_string(c.target)},
          {"lrp_epsilon", c.lrp_epsilon}, {"final_evaluation", c.final_evaluation}};
}

LimeConfig lime_config_from_json(const nlohmann::json& j) {
  LimeConfig c;
  try {
    c.steps = j.value("steps", c.steps);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.lambda = j.value("lambda", c.lambda);
    c.tau = j.value("tau", c.tau);
    if (j.contains("edit_mode")) c.edit_mode = edit_mode_from_string(j.at("edit_mode").get<std::string>());
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    if (j.contains("target")) c.target = target_policy_from_string(j.at("target").get<std::string>());
    c.lrp_epsilon = j.value("lrp_epsilon", c.lrp_epsilon);
    c.final_evaluation = j.value("final_evaluation", c.final_evaluation);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad LIME config: ") + e.what());
  }
  c.validate();
  return c;
}

double StepReport::initial_loss() const {
  return iterations.empty() ? (final ? final->total_loss : 0.0) : iterations.front().total_loss;
}

double StepReport::final_loss() const {
  if (final) return final->total_loss;
  return iterations.empty() ? 0.0 : iterations.back().total_loss;
}

namespace {

nlohmann::json record_json(const IterationRecord& r) {
  return {{"relevance_loss", r.relevance_loss}, {"kl_loss", r.kl_loss}, {"total_loss", r.total_loss},
          {"target_token", r.target_token},     {"phi_m", r.phi_m},     {"phi_t", r.phi_t}};
}

}  // namespace

nlohmann::json to_json(const StepReport& r) {
  nlohmann::json its = nlohmann::json::array();
  for (const auto& it : r.iterations) its.push_back(record_json(it));
  nlohmann::json j = {{"position", r.position},
                      {"iterations", its},
                      {"reference_token", r.reference_token},
                      {"chosen_token", r.chosen_token},
                      {"delta_max_abs", r.delta_max_abs},
                      {"duration_ms", r.duration_ms},
                      {"fallback", r.fallback}};
  if (r.final) j["final"] = record_json(*r.final);
  if (r.fallback) j["fallback_reason"] = r.fallback_reason;
  return j;
}

ad::Var relevance_loss(const ad::Var& token_relevance, const model::MultimodalSequence& seq, double tau) {
  if (!(tau > 0.0)) throw ContractError("relevance_loss: tau must be positive");
  if (seq.modality_indices.empty()) throw ContractError("relevance_loss: no modality tokens");
  const std::size_t n = token_relevance->value().rows();
  if (token_relevance->value().cols() != 1 || n != seq.length()) {
    throw DimensionError("relevance_loss: relevance must be N x 1 for the sequence");
  }
  seq.validate();  // M and T together cover every position
  Tensor select = Tensor::matrix(n, 1);
  for (auto i : seq.modality_indices) select(i, 0) = 1.0 / static_cast<double>(seq.modality_indices.size());
  const auto row = ad::scale(ad::transpose(token_relevance), 1.0 / tau);
  return ad::sub(ad::log_sum_exp(row), ad::matmul(row, ad::constant(std::move(select))));
}

ad::Var log_softmax(const ad::Var& logits) {
  return ad::sub(logits, ad::broadcast_like(ad::log_sum_exp(logits), logits));
}

ad::Var kl_regularizer(const ad::Var& logits, const Tensor& reference_log_probs) {
  require_same_shape(logits->value(), reference_log_probs, "kl_regularizer");
  const auto p = ad::softmax(logits, 1);
  return ad::sum(ad::mul(p, ad::sub(log_softmax(logits), ad::constant(reference_log_probs))), -1);
}

double kl_divergence(const Tensor& p, const Tensor& q) {
  require_same_shape(p, q, "kl_divergence");
  double total_p = 0.0, total_q = 0.0, kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    total_p += p[i];
    total_q += q[i];
    if (p[i] > 0.0) {
      if (!(q[i] > 0.0)) throw DomainError("kl_divergence: reference has zero mass where p does not");
      kl += p[i] * (std::log(p[i]) - std::log(q[i]));
    }
  }
  if (std::abs(total_p - 1.0) > 1e-9 || std::abs(total_q - 1.0) > 1e-9) {
    throw ContractError("kl_divergence: inputs must be probability distributions");
  }
  return kl;
}

namespace {

struct Evaluation {
  IterationRecord record;
  ad::Var loss;
  Tensor logits;
  std::vector<double> relevance;
};

Evaluation evaluate_losses(const model::FrozenModel& model, const model::MultimodalSequence& seq,
                           const model::DeltaVars& dv, const LimeConfig& config, const Tensor& ref_log_probs,
                           int reference_token) {
  const auto& cfg = model.config();
  const auto trace = model::forward_graph(model.vars(), cfg, ad::constant(seq.embeddings), &dv);
  Evaluation e;
  e.logits = trace.logits->value();
  const int target = config.target == TargetPolicy::current ? model::argmax(e.logits) : reference_token;
  const auto rel = relevance::propagate_graph(trace, model.vars(), cfg, target, {config.lrp_epsilon});
  const auto l_rel = relevance_loss(rel.token_relevance, seq, config.tau);
  const auto l_kl = kl_regularizer(trace.logits, ref_log_probs);
  // lambda == 0 leaves the KL node out of the graph entirely.
  e.loss = config.lambda == 0.0 ? l_rel : ad::add(l_rel, ad::scale(l_kl, config.lambda));
  const auto values = rel.token_relevance->value().values();
  e.relevance.assign(values.begin(), values.end());
  const auto agg = relevance::aggregate(e.relevance, seq);
  e.record = {l_rel->value().item(), l_kl->value().item(), e.loss->value().item(), target, agg.modality, agg.text};
  return e;
}

bool finite(const IterationRecord& r) {
  return std::isfinite(r.relevance_loss) && std::isfinite(r.kl_loss) && std::isfinite(r.total_loss);
}

}  // namespace

StepResult optimize_step_delta(const model::FrozenModel& model, const model::MultimodalSequence& seq,
                               const model::KvCache& cache, const LimeConfig& config, const Tensor* reference_logits) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const auto& cfg = model.config();
  if (seq.modality_indices.empty()) throw ContractError("optimize_step_delta: sequence has no modality tokens");
  if (cache.length() != seq.length()) throw ContractError("optimize_step_delta: KV cache does not cover the sequence");

  StepResult out;
  out.report.position = seq.length();
  out.logits = reference_logits ? *reference_logits : model::forward_with_delta(model, seq, nullptr, cache);
  if (out.logits.rows() != 1 || out.logits.cols() != cfg.vocab_size) throw DimensionError("reference logits must be 1 x vocab");
  const Tensor ref_log_probs = log_softmax(ad::constant(out.logits))->value();
  out.report.reference_token = model::argmax(out.logits);
  out.report.chosen_token = out.report.reference_token;

  const bool keys = config.edit_mode != EditMode::values_only;
  const bool values = config.edit_mode != EditMode::keys_only;
  out.delta = model::DeltaKV::zeros(cfg, seq.length(), keys, values);
  const Tensor reference = out.logits;

  auto finish = [&] {
    out.report.duration_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return std::move(out);
  };
  if (config.steps == 0 && !config.final_evaluation) return finish();
  auto fall_back = [&](const std::string& reason) {
    out.delta = model::DeltaKV::zeros(cfg, seq.length(), keys, values);
    out.logits = reference;
    out.report.fallback = true;
    out.report.fallback_reason = reason;
    out.report.final.reset();
    out.report.chosen_token = out.report.reference_token;
    return finish();
  };

  std::vector<Tensor*> params;
  std::vector<Shape> shapes;
  for (auto* list : {&out.delta.keys, &out.delta.values})
    for (auto& t : *list)
      if (!t.empty()) {
        params.push_back(&t);
        shapes.push_back(t.shape());
      }
  Adam adam({config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps}, shapes);

  try {
    for (std::size_t it = 0; it < config.steps; ++it) {
      model::DeltaVars dv;
      std::vector<ad::Var> wrt;
      for (const auto& t : out.delta.keys) dv.keys.push_back(t.empty() ? nullptr : wrt.emplace_back(ad::variable(t)));
      for (const auto& t : out.delta.values) dv.values.push_back(t.empty() ? nullptr : wrt.emplace_back(ad::variable(t)));
      auto e = evaluate_losses(model, seq, dv, config, ref_log_probs, out.report.reference_token);
      if (!finite(e.record)) throw NumericError("non-finite loss at iteration " + std::to_string(it));
      out.report.iterations.push_back(e.record);
      out.report.relevance_frames.push_back(std::move(e.relevance));
      const auto grads = ad::gradient(e.loss, wrt);
      adam.step(params, grads);
    }
    const auto dv = model::DeltaVars::constants(out.delta);
    if (config.final_evaluation) {
      auto e = evaluate_losses(model, seq, dv, config, ref_log_probs, out.report.reference_token);
      if (!finite(e.record)) throw NumericError("non-finite final loss");
      out.report.final = e.record;
      out.report.relevance_frames.push_back(std::move(e.relevance));
      out.logits = e.logits;
    } else {
      out.logits = model::forward_graph(model.vars(), cfg, ad::constant(seq.embeddings), &dv).logits->value();
    }
    if (!out.logits.all_finite()) throw NumericError("non-finite perturbed logits");
  } catch (const NumericError& e) {
    return fall_back(e.what());
  } catch (const DomainError& e) {
    return fall_back(e.what());  // singular relevance denominator
  }
  double m = 0.0;
  for (const auto* list : {&out.delta.keys, &out.delta.values})
    for (const auto& t : *list)
      if (!t.empty()) m = std::max(m, kernels::max_abs(t));
  out.report.delta_max_abs = m;
  out.report.chosen_token = model::argmax(out.logits);
  return finish();
}

namespace {

int sample_token(const Tensor& logits, double temperature, std::mt19937_64& rng) {
  if (!(temperature > 0.0)) throw ConfigError("sampling temperature must be positive");
  Tensor scaled = logits;
  for (auto& v : scaled.data()) v /= temperature;
  const Tensor p = kernels::softmax(scaled, 1);
  std::discrete_distribution<int> dist(p.data().begin(), p.data().end());
  return dist(rng);
}

}  // namespace

DecodeResult decode(const model::FrozenModel& model, const model::MultimodalSequence& prompt, const LimeConfig& config,
                    std::size_t max_tokens, const DecodeOptions& options) {
  config.validate();
  if (prompt.length() == 0) throw ContractError("decode: empty prompt");
  if (prompt.modality_indices.empty()) throw ContractError("decode: prompt has no modality tokens");
  DecodeResult out;
  out.sequence = prompt;
  if (max_tokens == 0) return out;
  std::mt19937_64 rng(options.seed);
  model::IncrementalDecoder decoder(model);
  Tensor logits = decoder.sync(out.sequence);
  for (std::size_t t = 0; t < max_tokens; ++t) {
    auto step = optimize_step_delta(model, out.sequence, decoder.cache(), config, &logits);
    const int token = options.sample ? sample_token(step.logits, options.temperature, rng) : step.report.chosen_token;
    step.report.chosen_token = token;
    if (options.on_step) options.on_step(step.report);
    out.reports.push_back(std::move(step.report));
    out.tokens.push_back(token);
    if (token == model::Vocabulary::eos || out.sequence.length() >= model.config().max_sequence) break;
    model::append_token(model, out.sequence, token);
    logits = decoder.sync(out.sequence);
  }
  return out;
}

std::vector<int> greedy_decode(const model::FrozenModel& model, const model::MultimodalSequence& prompt,
                               std::size_t max_tokens) {
  std::vector<int> tokens;
  if (max_tokens == 0) return tokens;
  auto seq = prompt;
  model::IncrementalDecoder decoder(model);
  Tensor logits = decoder.sync(seq);
  while (tokens.size() < max_tokens) {
    const int token = model::argmax(logits);
    tokens.push_back(token);
    if (token == model::Vocabulary::eos || seq.length() >= model.config().max_sequence) break;
    model::append_token(model, seq, token);
    logits = decoder.sync(seq);
  }
  return tokens;
}

}  // namespace lime::steering
