// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "finite_difference.hpp"
#include "lime/errors.hpp"
#include "lime/lime.hpp"
#include "naive_model.hpp"

using namespace lime;
using namespace lime::model;
using namespace lime::steering;
using lime::testing::random_matrix;
using lime::testing::tiny_config;

namespace {

MultimodalSequence make_sequence(const FrozenModel& m, std::mt19937_64& rng, std::size_t patches = 4) {
  Prompt p;
  p.prefix = {Vocabulary::bos};
  p.patches = random_matrix(rng, patches, m.config().patch_dim, -1.0, 1.0);
  p.suffix = {Vocabulary::topic(0), Vocabulary::ask, Vocabulary::object(2), Vocabulary::please,
              Vocabulary::answer_yes_no};
  return embed_prompt(m, p);
}

MultimodalSequence toy_sequence(std::size_t n, std::vector<std::size_t> m) {
  MultimodalSequence s;
  s.embeddings = Tensor::matrix(n, 1);
  s.token_ids.assign(n, 0);
  for (auto i : m) s.token_ids[i] = -1;
  for (std::size_t i = 0; i < n; ++i) (s.token_ids[i] < 0 ? s.modality_indices : s.text_indices).push_back(i);
  return s;
}

KvCache cache_for(const FrozenModel& m, const MultimodalSequence& seq) {
  IncrementalDecoder dec(m);
  dec.sync(seq);
  return dec.cache();
}

double composite(const FrozenModel& m, const MultimodalSequence& seq, const DeltaKV& delta, const LimeConfig& cfg,
                 const Tensor& ref_log_probs, int target) {
  const auto dv = DeltaVars::constants(delta);
  const auto trace = forward_graph(m.vars(), m.config(), ad::constant(seq.embeddings), &dv);
  const auto rel = relevance::propagate_graph(trace, m.vars(), m.config(), target, {cfg.lrp_epsilon});
  return relevance_loss(rel.token_relevance, seq, cfg.tau)->value().item() +
         cfg.lambda * kl_regularizer(trace.logits, ref_log_probs)->value().item();
}

}  // namespace

TEST_CASE("relevance loss examples") {
  const auto seq = toy_sequence(4, {1});
  for (double tau : {0.1, 1.0, 7.0}) {
    const auto phi = ad::constant(Tensor::matrix(4, 1, 0.3));
    CHECK(std::abs(relevance_loss(phi, seq, tau)->value().item() - std::log(4.0)) < 1e-12);
  }
  const auto peaked = ad::constant(Tensor::from_rows({{0.0}, {50.0}, {0.0}, {0.0}}));
  CHECK(relevance_loss(peaked, seq, 0.1)->value().item() < 1e-100);
  CHECK_THROWS_AS(relevance_loss(peaked, toy_sequence(4, {}), 0.1), ContractError);
  CHECK_THROWS_AS(relevance_loss(peaked, seq, 0.0), ContractError);
}

TEST_CASE("relevance loss averages over modality positions") {
  const auto seq = toy_sequence(3, {0, 2});
  const Tensor phi = Tensor::from_rows({{0.2}, {-0.1}, {0.4}});
  const double tau = 0.5;
  double lse = 0.0;
  for (double v : phi.values()) lse += std::exp(v / tau);
  lse = std::log(lse);
  const double expected = -0.5 * ((0.2 / tau - lse) + (0.4 / tau - lse));
  CHECK(std::abs(relevance_loss(ad::constant(phi), seq, tau)->value().item() - expected) < 1e-12);
}

TEST_CASE("kl examples") {
  CHECK(std::abs(kl_divergence(Tensor::row({0.5, 0.5}), Tensor::row({0.25, 0.75})) - 0.1438410362) < 1e-9);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    const Tensor a = random_matrix(rng, 1, 6), b = random_matrix(rng, 1, 6);
    CHECK(kl_divergence(kernels::softmax(a, 1), kernels::softmax(b, 1)) >= 0.0);
    const auto graph = kl_regularizer(ad::constant(a), log_softmax(ad::constant(b))->value())->value().item();
    CHECK(std::abs(graph - kl_divergence(kernels::softmax(a, 1), kernels::softmax(b, 1))) < 1e-12);
    CHECK(kl_regularizer(ad::constant(a), log_softmax(ad::constant(a))->value())->value().item() == 0.0);
  }
}

TEST_CASE("zero steps is a no-op") {
  std::mt19937_64 rng(5);
  FrozenModel m(ModelWeights::initialize(tiny_config(), 1));
  const auto seq = make_sequence(m, rng);
  LimeConfig cfg;
  cfg.steps = 0;
  const auto step = optimize_step_delta(m, seq, cache_for(m, seq), cfg);
  CHECK(step.delta.is_zero());
  CHECK(step.report.iterations.empty());
  REQUIRE(step.report.final);
  CHECK(step.report.final->kl_loss == 0.0);
  CHECK(step.report.chosen_token == step.report.reference_token);
  for (std::size_t steps : {0u, 2u}) {
    cfg.steps = steps;
    cfg.learning_rate = steps ? 1e-12 : 3e-4;  // too small to flip any decision
    const auto out = decode(m, seq, cfg, 6);
    CHECK(out.tokens == greedy_decode(m, seq, 6));
  }
}

TEST_CASE("step report shape and Delta non-persistence") {
  std::mt19937_64 rng(6);
  FrozenModel m(ModelWeights::initialize(tiny_config(), 2));
  const auto seq = make_sequence(m, rng);
  const auto cache = cache_for(m, seq);
  const KvCache before = cache;
  LimeConfig cfg;
  cfg.learning_rate = 1e-2;
  const auto step = optimize_step_delta(m, seq, cache, cfg);
  CHECK(step.report.iterations.size() == cfg.steps);
  CHECK(step.report.relevance_frames.size() == cfg.steps + 1);
  CHECK(step.report.delta_max_abs > 0.0);
  CHECK(step.report.iterations.front().kl_loss == 0.0);
  for (std::size_t l = 0; l < m.config().num_layers; ++l) {
    CHECK(cache.keys[l] == before.keys[l]);
    CHECK(cache.values[l] == before.values[l]);
  }
  // A fresh step starts from zero again: its first iteration matches this one's.
  const auto again = optimize_step_delta(m, seq, cache, cfg);
  CHECK(again.report.iterations.front().total_loss == step.report.iterations.front().total_loss);
}

TEST_CASE("edit modes restrict the perturbation") {
  std::mt19937_64 rng(7);
  FrozenModel m(ModelWeights::initialize(tiny_config(), 3));
  const auto seq = make_sequence(m, rng);
  const auto cache = cache_for(m, seq);
  LimeConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.edit_mode = EditMode::keys_only;
  auto step = optimize_step_delta(m, seq, cache, cfg);
  for (std::size_t l = 0; l < m.config().num_layers; ++l) {
    CHECK(step.delta.values[l].empty());
    CHECK(kernels::max_abs(step.delta.keys[l]) > 0.0);
  }
  cfg.edit_mode = EditMode::values_only;
  step = optimize_step_delta(m, seq, cache, cfg);
  for (std::size_t l = 0; l < m.config().num_layers; ++l) {
    CHECK(step.delta.keys[l].empty());
    CHECK(kernels::max_abs(step.delta.values[l]) > 0.0);
  }
}

TEST_CASE("lambda extremes") {
  std::mt19937_64 rng(8);
  int kept = 0;
  const int trials = 20;
  for (int trial = 0; trial < trials; ++trial) {
    FrozenModel m(ModelWeights::initialize(tiny_config(), 100 + trial));
    const auto seq = make_sequence(m, rng);
    const auto cache = cache_for(m, seq);
    LimeConfig cfg;
    cfg.lambda = 1e6;
    const auto step = optimize_step_delta(m, seq, cache, cfg);
    const Tensor ref = softmax_row(forward_with_delta(m, seq, nullptr, cache));
    CHECK(kernels::max_abs_diff(softmax_row(step.logits), ref) < 1e-3);
    kept += step.report.chosen_token == step.report.reference_token;

    cfg.lambda = 0.0;
    const auto free = optimize_step_delta(m, seq, cache, cfg);
    for (const auto& it : free.report.iterations) CHECK(it.total_loss == it.relevance_loss);
  }
  CHECK(kept == trials);
}

TEST_CASE("composite loss gradient matches finite differences") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 4; ++trial) {
    auto mc = tiny_config(1 + trial % 2, 2);
    FrozenModel m(ModelWeights::initialize(mc, 200 + trial));
    const auto seq = make_sequence(m, rng, 3);
    const std::size_t n = seq.length();
    LimeConfig cfg;
    cfg.lambda = 0.5;
    const Tensor ref_lp = log_softmax(ad::constant(forward_with_delta(m, seq, nullptr, cache_for(m, seq))))->value();
    DeltaKV delta = DeltaKV::zeros(mc, n);
    for (auto* list : {&delta.keys, &delta.values})
      for (auto& t : *list) t = random_matrix(rng, n, mc.head_dim(), -0.1, 0.1);
    const int target = 3;
    for (bool keys : {true, false}) {
      const std::size_t layer = mc.num_layers - 1;
      DeltaVars dv = DeltaVars::constants(delta);
      auto& slot = keys ? dv.keys[layer] : dv.values[layer];
      slot = ad::variable(slot->value());
      const auto trace = forward_graph(m.vars(), mc, ad::constant(seq.embeddings), &dv);
      const auto rel = relevance::propagate_graph(trace, m.vars(), mc, target, {cfg.lrp_epsilon});
      const auto loss = ad::add(relevance_loss(rel.token_relevance, seq, cfg.tau),
                                ad::scale(kl_regularizer(trace.logits, ref_lp), cfg.lambda));
      const Tensor analytic = ad::gradient(loss, slot);
      const Tensor numeric = lime::testing::central_difference(
          [&](const Tensor& t) {
            DeltaKV d = delta;
            (keys ? d.keys : d.values)[layer] = t;
            return composite(m, seq, d, cfg, ref_lp, target);
          },
          slot->value());
      CHECK(lime::testing::relative_error(analytic, numeric) < 1e-3);
    }
  }
}

TEST_CASE("decoding is deterministic") {
  std::mt19937_64 rng(10);
  FrozenModel m(ModelWeights::initialize(tiny_config(), 4));
  const auto seq = make_sequence(m, rng);
  LimeConfig cfg;
  cfg.steps = 3;
  const auto a = decode(m, seq, cfg, 4);
  const auto b = decode(m, seq, cfg, 4);
  CHECK(a.tokens == b.tokens);
  REQUIRE(a.reports.size() == b.reports.size());
  for (std::size_t i = 0; i < a.reports.size(); ++i) {
    auto ja = to_json(a.reports[i]), jb = to_json(b.reports[i]);
    ja.erase("duration_ms");
    jb.erase("duration_ms");
    CHECK(ja == jb);
  }
  DecodeOptions opt;
  opt.sample = true;
  opt.seed = 42;
  CHECK(decode(m, seq, cfg, 4, opt).tokens == decode(m, seq, cfg, 4, opt).tokens);
  CHECK(decode(m, seq, cfg, 0).tokens.empty());
}

TEST_CASE("numerical failure falls back to the unperturbed step") {
  std::mt19937_64 rng(11);
  FrozenModel m(ModelWeights::initialize(tiny_config(), 5));
  const auto seq = make_sequence(m, rng);
  LimeConfig cfg;
  cfg.learning_rate = 1e300;
  const auto step = optimize_step_delta(m, seq, cache_for(m, seq), cfg);
  CHECK(step.report.fallback);
  CHECK(step.delta.is_zero());
  CHECK(step.report.chosen_token == step.report.reference_token);
}

TEST_CASE("config validation and json round trip") {
  LimeConfig c;
  c.tau = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.lambda = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.steps = 3;
  c.edit_mode = EditMode::values_only;
  c.target = TargetPolicy::reference;
  const auto back = lime_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK_THROWS_AS(edit_mode_from_string("sideways"), ConfigError);
}
