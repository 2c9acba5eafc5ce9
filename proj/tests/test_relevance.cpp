// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "finite_difference.hpp"
#include "lime/errors.hpp"
#include "lime/relevance.hpp"
#include "naive_model.hpp"
#include "naive_relevance.hpp"
#include "hand_model.hpp"

using namespace lime;
using namespace lime::model;
using namespace lime::relevance;
using lime::testing::random_matrix;
using lime::testing::tiny_config;

namespace {

Tensor eval(const ad::Var& v) { return v->value(); }
ad::Var c(const Tensor& t) { return ad::constant(t); }

ForwardTrace trace_of(const FrozenModel& m, const Tensor& x, const DeltaKV* delta = nullptr) {
  std::optional<DeltaVars> dv;
  if (delta) dv = DeltaVars::constants(*delta);
  return forward_graph(m.vars(), m.config(), c(x), dv ? &*dv : nullptr);
}

Tensor random_sequence(std::mt19937_64& rng, const FrozenModel& m, std::size_t n) {
  return random_matrix(rng, n, m.config().model_dim, -1.0, 1.0);
}

}  // namespace

TEST_CASE("linear rule hand example") {
  const auto r = lrp_linear_eps(c(Tensor::row({2, 1})), c(Tensor::from_rows({{1}, {1}})), c(Tensor::row({3})), 0.0);
  CHECK(std::abs(eval(r)[0] - 2.0) < 1e-10);
  CHECK(std::abs(eval(r)[1] - 1.0) < 1e-10);
}

TEST_CASE("linear rule with identity weights passes relevance through") {
  const Tensor x = Tensor::row({0.5, -2.0, 3.0});
  const Tensor rout = Tensor::row({1.0, 2.0, -0.5});
  const Tensor rin = eval(lrp_linear_eps(c(x), c(Tensor::identity(3)), c(rout), 0.0));
  CHECK(kernels::max_abs_diff(rin, rout) < 1e-15);
}

TEST_CASE("linear rule conserves relevance with zero epsilon") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_matrix(rng, 3, 5), w = random_matrix(rng, 5, 4), rout = random_matrix(rng, 3, 4);
    const Tensor rin = eval(lrp_linear_eps(c(x), c(w), c(rout), 0.0));
    CHECK(std::abs(rin.sum() - rout.sum()) < 1e-9 * std::max(1.0, kernels::max_abs(rin)));
  }
}

TEST_CASE("linear rule singularity names the output unit") {
  const Tensor x = Tensor::row({1.0, -1.0});
  const Tensor w = Tensor::from_rows({{2.0, 1.0}, {1.0, 1.0}});
  try {
    lrp_linear_eps(c(x), c(w), c(Tensor::row({1.0, 1.0})), 0.0);
    FAIL("expected a singularity");
  } catch (const SingularityError& e) {
    CHECK(e.unit() == 1);
  }
  CHECK_NOTHROW(lrp_linear_eps(c(x), c(w), c(Tensor::row({1.0, 1.0})), 1e-6));
}

TEST_CASE("softmax rule hand examples") {
  auto rule = [](const Tensor& x, const Tensor& r) {
    return eval(lrp_softmax(c(x), c(kernels::softmax(x, 1)), c(r)));
  };
  const Tensor uniform = rule(Tensor::row({0.7, 0.7, 0.7}), Tensor::row({1.0, 1.0, 1.0}));
  CHECK(kernels::max_abs(uniform) < 1e-15);
  const Tensor zero = rule(Tensor::row({0.0, 0.0}), Tensor::row({0.3, -1.2}));
  CHECK(kernels::max_abs(zero) == 0.0);
  const Tensor ex = rule(Tensor::row({1.0, 0.0}), Tensor::row({1.0, 0.0}));
  CHECK(std::abs(ex[0] - 1.0 / (std::exp(1.0) + 1.0)) < 1e-10);
  CHECK(std::abs(ex[0] - 0.2689) < 1e-4);
  CHECK(ex[1] == 0.0);
}

TEST_CASE("bilinear rule hand examples") {
  const auto one = lrp_attention_bilinear(c(Tensor::scalar(1)), c(Tensor::scalar(2)), c(Tensor::scalar(2)),
                                          c(Tensor::scalar(1)), 0.0);
  CHECK(std::abs(eval(one.on_a).item() - 0.5) < 1e-10);
  CHECK(std::abs(eval(one.on_v).item() - 0.5) < 1e-10);

  std::mt19937_64 rng(12);
  const Tensor a = kernels::softmax(random_matrix(rng, 4, 4), 1);
  const Tensor v = random_matrix(rng, 4, 4);
  const Tensor o = kernels::matmul(a, v);
  const auto zero = lrp_attention_bilinear(c(a), c(v), c(o), c(Tensor::matrix(4, 4)), 0.0);
  CHECK(kernels::max_abs(eval(zero.on_a)) == 0.0);
  CHECK(kernels::max_abs(eval(zero.on_v)) == 0.0);

  for (int trial = 0; trial < 20; ++trial) {
    const Tensor at = kernels::softmax(random_matrix(rng, 4, 4), 1);
    const Tensor vt = random_matrix(rng, 4, 4);
    const Tensor rout = random_matrix(rng, 4, 4);
    const auto split = lrp_attention_bilinear(c(at), c(vt), c(kernels::matmul(at, vt)), c(rout), 0.0);
    CHECK(std::abs(eval(split.on_a).sum() + eval(split.on_v).sum() - rout.sum()) < 1e-10);
  }
}

TEST_CASE("norm identity rule") {
  const auto r = c(Tensor::row({1.5, -2.0}));
  CHECK(lrp_norm_identity(r) == r);
  CHECK(lrp_norm_identity(lrp_norm_identity(r))->value() == r->value());
}

TEST_CASE("one-layer propagation matches the straight-line oracle") {
  FrozenModel m(lime::testing::hand_set_model());
  const Tensor x = Tensor::from_rows({{0.9, -0.3, 0.4, 1.1}, {-0.7, 0.8, 0.2, -0.5}, {0.3, 0.6, -1.2, 0.1}});
  for (int target : {2, 3, 17}) {
    for (double eps : {0.0, 1e-6}) {
      const auto map = propagate(trace_of(m, x), m.vars(), m.config(), target, {eps});
      const auto oracle = lime::testing::naive_relevance(m.weights(), x, target, eps);
      REQUIRE(map.token_relevance.size() == 3);
      for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(map.token_relevance[i] - oracle.token_relevance[i]) < 1e-10);
      CHECK(std::abs(map.target_logit - oracle.target_logit) < 1e-12);
    }
  }
}

TEST_CASE("multi-layer propagation under perturbation matches the oracle") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 6; ++trial) {
    auto cfg = tiny_config(1 + trial % 3, trial % 2 ? 2 : 4);
    if (trial % 2) cfg.normalization = Normalization::layer_norm;
    FrozenModel m(ModelWeights::initialize(cfg, 40 + trial));
    const Tensor x = random_sequence(rng, m, 5);
    DeltaKV delta = DeltaKV::zeros(cfg, 5);
    for (auto* list : {&delta.keys, &delta.values})
      for (auto& t : *list) t = random_matrix(rng, t.rows(), t.cols(), -0.3, 0.3);
    const auto map = propagate(trace_of(m, x, &delta), m.vars(), cfg, 5, {1e-6});
    const auto oracle = lime::testing::naive_relevance(m.weights(), x, 5, 1e-6, &delta);
    const double scale = std::max(1.0, std::abs(oracle.target_logit));
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(map.token_relevance[i] - oracle.token_relevance[i]) < 1e-9 * scale);
    for (std::size_t l = 0; l < oracle.boundary_totals.size(); ++l)
      CHECK(std::abs(map.per_layer_totals[l] - oracle.boundary_totals[l]) < 1e-9 * scale);
  }
}

TEST_CASE("conservation across layer boundaries") {
  std::mt19937_64 rng(77);
  int singular = 0, checked = 0;
  for (int trial = 0; trial < 50; ++trial) {
    auto cfg = tiny_config(1 + trial % 3, 2);
    FrozenModel m(ModelWeights::initialize(cfg, 500 + trial));
    const Tensor x = random_sequence(rng, m, 4 + trial % 3);
    const auto trace = trace_of(m, x);
    const int target = trial % static_cast<int>(cfg.vocab_size);
    const auto stabilized = propagate(trace, m.vars(), cfg, target, {1e-9});
    CHECK(stabilized.conservation_drift() < 1e-6);
    try {
      const auto exact = propagate(trace, m.vars(), cfg, target, {0.0});
      CHECK(exact.conservation_drift() < 1e-10);
      ++checked;
    } catch (const SingularityError&) {
      ++singular;
    }
  }
  CHECK(checked > 40);
  MESSAGE("exact-conservation instances: " << checked << ", singular: " << singular);
}

TEST_CASE("absorbed bias matches the softmax rule discrepancy") {
  std::mt19937_64 rng(8);
  auto cfg = tiny_config(2, 2);
  FrozenModel m(ModelWeights::initialize(cfg, 3));
  const auto map = propagate(trace_of(m, random_sequence(rng, m, 5)), m.vars(), cfg, 4, {0.0});
  // The raw totals are not conserved; the bookkeeping explains the gap.
  CHECK(map.raw_drift() > 1e-6);
  CHECK(map.conservation_drift() < 1e-10);
}

TEST_CASE("propagation is linear in the seeded relevance") {
  std::mt19937_64 rng(19);
  auto cfg = tiny_config(2, 2);
  FrozenModel m(ModelWeights::initialize(cfg, 5));
  const auto trace = trace_of(m, random_sequence(rng, m, 5));
  const auto base = propagate(trace, m.vars(), cfg, 7, {1e-6});
  for (double k : {-2.0, 0.5, 3.0}) {
    const auto scaled = propagate(trace, m.vars(), cfg, 7, {1e-6}, k);
    for (std::size_t i = 0; i < base.token_relevance.size(); ++i) {
      CHECK(std::abs(scaled.token_relevance[i] - k * base.token_relevance[i]) <
            1e-12 * std::max(1.0, std::abs(base.token_relevance[i])));
    }
  }
}

TEST_CASE("zero perturbation gives the same relevance as no perturbation") {
  std::mt19937_64 rng(23);
  auto cfg = tiny_config(2, 2);
  FrozenModel m(ModelWeights::initialize(cfg, 6));
  const Tensor x = random_sequence(rng, m, 6);
  const auto zero = DeltaKV::zeros(cfg, 6);
  const auto a = propagate(trace_of(m, x), m.vars(), cfg, 3, {});
  const auto b = propagate(trace_of(m, x, &zero), m.vars(), cfg, 3, {});
  CHECK(a.token_relevance == b.token_relevance);
}

TEST_CASE("repeated propagation is bit-identical") {
  std::mt19937_64 rng(2);
  auto cfg = tiny_config(3, 2);
  FrozenModel m(ModelWeights::initialize(cfg, 9));
  const auto trace = trace_of(m, random_sequence(rng, m, 6));
  const auto a = propagate(trace, m.vars(), cfg, 11, {});
  const auto b = propagate(trace, m.vars(), cfg, 11, {});
  CHECK(a.token_relevance == b.token_relevance);
  CHECK(a.per_layer_totals == b.per_layer_totals);
}

TEST_CASE("gradient of total relevance through the rules matches finite differences") {
  std::mt19937_64 rng(404);
  auto cfg = tiny_config(2, 2);
  FrozenModel m(ModelWeights::initialize(cfg, 12));
  const Tensor x = random_sequence(rng, m, 4);
  const DeltaKV base = DeltaKV::zeros(cfg, 4);
  auto total_relevance = [&](const DeltaKV& delta) {
    const auto dv = DeltaVars::constants(delta);
    const auto trace = forward_graph(m.vars(), cfg, c(x), &dv);
    return propagate(trace, m.vars(), cfg, 6, {1e-6}).token_relevance;
  };
  for (std::size_t layer = 0; layer < cfg.num_layers; ++layer) {
    DeltaVars dv = DeltaVars::constants(base);
    dv.values[layer] = ad::variable(random_matrix(rng, 4, cfg.head_dim(), -0.2, 0.2));
    const auto g = propagate_graph(forward_graph(m.vars(), cfg, c(x), &dv), m.vars(), cfg, 6, {1e-6});
    const Tensor analytic = ad::gradient(ad::sum(g.token_relevance, -1), dv.values[layer]);
    const Tensor numeric = lime::testing::central_difference(
        [&](const Tensor& t) {
          DeltaKV d = base;
          d.values[layer] = t;
          double s = 0.0;
          for (double v : total_relevance(d)) s += v;
          return s;
        },
        dv.values[layer]->value());
    CHECK(lime::testing::relative_error(analytic, numeric) < 1e-3);
  }
}

TEST_CASE("aggregate partitions relevance") {
  MultimodalSequence seq;
  seq.token_ids = {-1, 5, -1};
  seq.embeddings = Tensor::matrix(3, 1);
  seq.modality_indices = {0, 2};
  seq.text_indices = {1};
  auto agg = aggregate(std::vector<double>{1, 2, 3}, seq);
  CHECK(agg.modality == 4.0);
  CHECK(agg.text == 2.0);
  agg = aggregate(std::vector<double>{0, 0, 0}, seq);
  CHECK(agg.modality == 0.0);
  CHECK(agg.text == 0.0);
  seq.text_indices = {1, 2};
  CHECK_THROWS_AS(aggregate(std::vector<double>{1, 2, 3}, seq), ContractError);
}

TEST_CASE("missing activations are a contract error") {
  auto cfg = tiny_config(1, 2);
  FrozenModel m(ModelWeights::initialize(cfg, 0));
  auto trace = trace_of(m, Tensor::matrix(3, cfg.model_dim, 0.1));
  trace.layers[0].v_lin = nullptr;
  CHECK_THROWS_AS(propagate(trace, m.vars(), cfg, 2, {}), ContractError);
  CHECK_THROWS_AS(propagate(ForwardTrace{}, m.vars(), cfg, 2, {}), ContractError);
  CHECK_THROWS_AS(LrpConfig{-1.0}.validate(), ConfigError);
}
