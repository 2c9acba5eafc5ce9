// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <random>

#include "doctest.h"
#include "finite_difference.hpp"
#include "lime/errors.hpp"
#include "lime/model.hpp"
#include "lime/training.hpp"
#include "lime/weights_io.hpp"
#include "naive_model.hpp"

using namespace lime;
using namespace lime::model;
using lime::testing::naive_forward;
using lime::testing::random_matrix;
using lime::testing::tiny_config;

namespace {

Prompt sample_prompt(std::mt19937_64& rng, const ModelConfig& cfg, std::size_t patches = 4) {
  Prompt p;
  p.prefix = {Vocabulary::bos};
  p.patches = random_matrix(rng, patches, cfg.patch_dim, -1.0, 1.0);
  p.suffix = {Vocabulary::topic(1), Vocabulary::ask, Vocabulary::object(3)};
  p.grounding_cells = {1, 2};
  return p;
}

double max_diff(const Tensor& a, const lime::testing::Mat& b, std::size_t row) {
  double m = 0.0;
  for (std::size_t j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(0, j) - b[row][j]));
  return m;
}

Tensor last_logits(const FrozenModel& m, const MultimodalSequence& seq, const DeltaKV* delta) {
  IncrementalDecoder dec(m);
  dec.sync(seq);
  return forward_with_delta(m, seq, delta, dec.cache());
}

}  // namespace

TEST_CASE("single layer single head matches the loop oracle") {
  for (auto norm : {Normalization::rms_norm, Normalization::layer_norm}) {
    auto cfg = tiny_config(1, 1);
    cfg.normalization = norm;
    FrozenModel m(ModelWeights::initialize(cfg, 3));
    std::mt19937_64 rng(11);
    const auto seq = embed_prompt(m, sample_prompt(rng, cfg));
    const auto oracle = naive_forward(m.weights(), seq.embeddings);
    CHECK(max_diff(last_logits(m, seq, nullptr), oracle, seq.length() - 1) < 1e-12);
  }
}

TEST_CASE("multi layer forward with perturbation matches the loop oracle") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto cfg = tiny_config(2 + trial % 2, trial % 2 ? 4 : 2);
    FrozenModel m(ModelWeights::initialize(cfg, 100 + trial));
    const auto seq = embed_prompt(m, sample_prompt(rng, cfg));
    DeltaKV delta = DeltaKV::zeros(cfg, seq.length(), trial % 3 != 1, trial % 3 != 2);
    for (auto* list : {&delta.keys, &delta.values})
      for (auto& t : *list)
        if (!t.empty()) t = random_matrix(rng, t.rows(), t.cols(), -0.5, 0.5);
    const auto oracle = naive_forward(m.weights(), seq.embeddings, &delta);
    CHECK(max_diff(last_logits(m, seq, &delta), oracle, seq.length() - 1) < 1e-10);
  }
}

TEST_CASE("zero perturbation reproduces the reference logits exactly") {
  std::mt19937_64 rng(9);
  auto cfg = tiny_config();
  FrozenModel m(ModelWeights::initialize(cfg, 1));
  const auto seq = embed_prompt(m, sample_prompt(rng, cfg));
  const auto ref = last_logits(m, seq, nullptr);
  for (auto [keys, values] : {std::pair{true, true}, {true, false}, {false, true}}) {
    const auto zero = DeltaKV::zeros(cfg, seq.length(), keys, values);
    CHECK(zero.is_zero());
    CHECK(last_logits(m, seq, &zero) == ref);
  }
}

TEST_CASE("incremental decoding equals the full graph bit for bit") {
  std::mt19937_64 rng(21);
  for (auto norm : {Normalization::rms_norm, Normalization::layer_norm}) {
    auto cfg = tiny_config(3, 2);
    cfg.normalization = norm;
    FrozenModel m(ModelWeights::initialize(cfg, 8));
    auto seq = embed_prompt(m, sample_prompt(rng, cfg));
    IncrementalDecoder dec(m);
    Tensor logits = dec.sync(seq);
    for (int step = 0; step < 5; ++step) {
      const auto graph = forward_graph(m.vars(), cfg, ad::constant(seq.embeddings), nullptr)
                             .logits->value();
      CHECK(graph == logits);
      append_token(m, seq, argmax(logits));
      logits = dec.sync(seq);
    }
    CHECK(dec.cache().length() == seq.length());
  }
}

TEST_CASE("later positions never influence earlier logits") {
  std::mt19937_64 rng(4);
  auto cfg = tiny_config();
  FrozenModel m(ModelWeights::initialize(cfg, 2));
  const auto seq = embed_prompt(m, sample_prompt(rng, cfg));
  Tensor changed = seq.embeddings;
  for (std::size_t c = 0; c < cfg.model_dim; ++c) changed(seq.length() - 1, c) += 3.0;
  const auto a = forward_graph(m.vars(), cfg, ad::constant(seq.embeddings), nullptr, true).logits->value();
  const auto b = forward_graph(m.vars(), cfg, ad::constant(changed), nullptr, true).logits->value();
  CHECK(a.row_slice(0, seq.length() - 1) == b.row_slice(0, seq.length() - 1));
  CHECK(a.row_slice(seq.length() - 1, seq.length()) != b.row_slice(seq.length() - 1, seq.length()));
}

TEST_CASE("projection of perceptual patches") {
  const Tensor patches = Tensor::from_rows({{1, 0}, {0, 2}, {1, 1}});
  const Tensor proj = Tensor::from_rows({{1, 2, 3}, {4, 5, 6}});
  const Tensor out = project_perceptual(patches, proj);
  CHECK(out == Tensor::from_rows({{1, 2, 3}, {8, 10, 12}, {5, 7, 9}}));
  CHECK_THROWS_AS(project_perceptual(Tensor::matrix(3, 3), proj), DimensionError);
}

TEST_CASE("sequence partition") {
  std::mt19937_64 rng(1);
  auto cfg = tiny_config();
  FrozenModel m(ModelWeights::initialize(cfg, 0));
  auto seq = embed_prompt(m, sample_prompt(rng, cfg, 6));
  seq.validate();
  CHECK(seq.modality_indices == std::vector<std::size_t>{1, 2, 3, 4, 5, 6});
  CHECK(seq.text_indices == std::vector<std::size_t>{0, 7, 8, 9});
  CHECK(seq.grounding_indices == std::vector<std::size_t>{2, 3});
  append_token(m, seq, Vocabulary::yes);
  seq.validate();
  CHECK(seq.text_indices.back() == 10);
  CHECK(seq.generated_count == 1);

  auto broken = seq;
  broken.text_indices.push_back(3);
  CHECK_THROWS_AS(broken.validate(), ContractError);
  broken = seq;
  broken.grounding_indices.push_back(0);
  CHECK_THROWS_AS(broken.validate(), ContractError);
}

TEST_CASE("null modality uses the learned null embedding") {
  std::mt19937_64 rng(1);
  auto cfg = tiny_config();
  FrozenModel m(ModelWeights::initialize(cfg, 0));
  auto p = sample_prompt(rng, cfg);
  p.null_modality = true;
  const auto seq = embed_prompt(m, p);
  for (std::size_t c = 0; c < cfg.model_dim; ++c) {
    CHECK(seq.embeddings(2, c) == m.weights().null_embedding(0, c) + m.weights().position_embedding(2, c));
  }
}

TEST_CASE("contract violations") {
  std::mt19937_64 rng(1);
  auto cfg = tiny_config();
  FrozenModel m(ModelWeights::initialize(cfg, 0));
  const auto seq = embed_prompt(m, sample_prompt(rng, cfg));
  IncrementalDecoder dec(m);
  dec.sync(seq);
  const auto short_delta = DeltaKV::zeros(cfg, seq.length() - 1);
  CHECK_THROWS_AS(forward_with_delta(m, seq, &short_delta, dec.cache()), ContractError);
  CHECK_THROWS_AS(forward_with_delta(m, seq, nullptr, KvCache{}), ContractError);
  Prompt bad;
  bad.patches = Tensor::matrix(2, cfg.patch_dim + 1);
  CHECK_THROWS_AS(embed_prompt(m, bad), DimensionError);
  auto odd = cfg;
  odd.num_heads = 3;
  CHECK_THROWS_AS(odd.validate(), ConfigError);
}

TEST_CASE("training with zero epochs returns the initialization") {
  auto cfg = tiny_config();
  std::mt19937_64 rng(2);
  std::vector<TrainingExample> data{{sample_prompt(rng, cfg), {Vocabulary::yes, Vocabulary::eos}}};
  TrainConfig tc;
  tc.epochs = 0;
  tc.seed = 17;
  const auto r = train_toy_model(cfg, data, tc);
  const auto init = ModelWeights::initialize(cfg, 17);
  const auto a = r.weights.named_tensors();
  const auto b = init.named_tensors();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].second == *b[i].second);
  CHECK(r.log.empty());
}

TEST_CASE("training lowers the loss on a memorizable set") {
  auto cfg = tiny_config();
  std::mt19937_64 rng(2);
  std::vector<TrainingExample> data;
  for (int i = 0; i < 6; ++i) data.push_back({sample_prompt(rng, cfg), {i % 2 ? Vocabulary::yes : Vocabulary::no, Vocabulary::eos}});
  TrainConfig tc;
  tc.epochs = 40;
  tc.batch_size = 3;
  tc.learning_rate = 1e-2;
  const auto r = train_toy_model(cfg, data, tc);
  REQUIRE(r.log.size() == 40);
  CHECK(r.log.back().mean_loss < 0.5 * r.log.front().mean_loss);
}

TEST_CASE("example loss gradient matches finite differences") {
  auto cfg = tiny_config(1, 2);
  std::mt19937_64 rng(6);
  const auto weights = ModelWeights::initialize(cfg, 4);
  const TrainingExample ex{sample_prompt(rng, cfg), {Vocabulary::yes, Vocabulary::eos}};
  const auto vars = WeightVars::variables(weights);
  const auto analytic = ad::gradient(example_loss(vars, cfg, ex), vars.layers[0].wk);
  const auto numeric = lime::testing::central_difference(
      [&](const Tensor& wk) {
        auto w = weights;
        w.layers[0].wk = wk;
        return example_loss(WeightVars::constants(w), cfg, ex)->value().item();
      },
      weights.layers[0].wk);
  CHECK(lime::testing::relative_error(analytic, numeric) < 1e-6);
}

TEST_CASE("weights survive a save and load round trip") {
  auto cfg = tiny_config();
  cfg.normalization = Normalization::layer_norm;
  const auto w = ModelWeights::initialize(cfg, 99);
  const auto dir = std::filesystem::temp_directory_path() / "lime_weights_test";
  std::filesystem::create_directories(dir);
  const auto file = dir / "w.bin";
  save_weights(w, file, {{"note", "round trip"}});
  const auto back = load_weights(file);
  CHECK(back.config == cfg);
  const auto a = w.named_tensors();
  const auto b = back.named_tensors();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].second == *b[i].second);
  CHECK(load_metadata(file)["metadata"]["note"] == "round trip");
  CHECK_THROWS_AS(load_weights(dir / "missing.bin"), IoError);
  std::filesystem::remove_all(dir);
}
