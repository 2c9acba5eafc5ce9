// SPDX-License-Identifier: Apache-2.0
#include "lime/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "lime/adam.hpp"
#include "lime/errors.hpp"

namespace lime::model {

ad::Var example_loss(const WeightVars& w, const ModelConfig& config, const TrainingExample& example) {
  if (example.targets.empty()) throw ContractError("training example without targets");
  Prompt input = example.prompt;
  input.suffix.insert(input.suffix.end(), example.targets.begin(), example.targets.end() - 1);
  const auto x = embed_graph(w, config, input);
  const std::size_t n = x->value().rows();
  const std::size_t first = n - example.targets.size();
  const auto trace = forward_graph(w, config, x, nullptr, false);
  // Only the rows that predict targets need logits.
  const auto rows = ad::slice_rows(trace.final_normed, first, n);
  const auto logits = ad::matmul(rows, w.unembedding);
  ad::Var total;
  for (std::size_t i = 0; i < example.targets.size(); ++i) {
    const auto row = ad::slice_rows(logits, i, i + 1);
    const auto t = static_cast<std::size_t>(example.targets[i]);
    const auto nll = ad::sub(ad::log_sum_exp(row), ad::slice(row, 0, 1, t, t + 1));
    total = total ? ad::add(total, nll) : nll;
  }
  return ad::scale(total, 1.0 / static_cast<double>(example.targets.size()));
}

TrainResult train_toy_model(const ModelConfig& config, const std::vector<TrainingExample>& dataset,
                            const TrainConfig& train, const EpochCallback& on_epoch) {
  if (train.bias_rate < 0.0 || train.bias_rate > 1.0) throw ConfigError("bias_rate must lie in [0, 1]");
  if (train.batch_size == 0) throw ConfigError("batch_size must be positive");
  TrainResult result{ModelWeights::initialize(config, train.seed), {}};
  if (train.epochs == 0 || dataset.empty()) return result;

  auto named = result.weights.named_tensors();
  std::vector<Tensor*> params;
  std::vector<Shape> shapes;
  for (auto& [name, t] : named) {
    params.push_back(t);
    shapes.push_back(t->shape());
  }
  Adam adam({train.learning_rate, 0.9, 0.999, 1e-8}, shapes);

  std::mt19937_64 rng(train.seed ^ 0x9e3779b97f4a7c15ULL);
  std::bernoulli_distribution drop(train.bias_rate);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < train.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += train.batch_size) {
      const std::size_t end = std::min(order.size(), start + train.batch_size);
      const WeightVars w = WeightVars::variables(result.weights);
      const auto leaves = w.all();
      std::vector<Tensor> grads;
      for (std::size_t i = start; i < end; ++i) {
        TrainingExample ex = dataset[order[i]];
        if (!ex.prompt.patches.empty() && drop(rng)) ex.prompt.null_modality = true;
        std::vector<Tensor> g;
        double value = 0.0;
        try {
          const auto loss = example_loss(w, config, ex);
          value = loss->value().item();
          g = ad::gradient(loss, leaves);
        } catch (const NumericError& e) {
          throw TrainingError(std::string("training diverged: ") + e.what(), step);
        }
        loss_sum += value;
        if (grads.empty()) {
          grads = std::move(g);
        } else {
          for (std::size_t k = 0; k < grads.size(); ++k) {
            auto dst = grads[k].data();
            auto src = g[k].data();
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
          }
        }
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      double norm_sq = 0.0;
      for (auto& g : grads)
        for (auto& v : g.data()) {
          v *= inv;
          norm_sq += v * v;
        }
      if (!std::isfinite(norm_sq)) throw TrainingError("non-finite gradient", step);
      if (train.grad_clip > 0.0 && std::sqrt(norm_sq) > train.grad_clip) {
        const double s = train.grad_clip / std::sqrt(norm_sq);
        for (auto& g : grads)
          for (auto& v : g.data()) v *= s;
      }
      adam.step(params, grads);
      ++step;
    }
    EpochLog entry{epoch + 1, loss_sum / static_cast<double>(dataset.size())};
    if (!std::isfinite(entry.mean_loss)) throw TrainingError("non-finite epoch loss", step);
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return result;
}

}  // namespace lime::model
