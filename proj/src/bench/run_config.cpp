// SPDX-License-Identifier: Apache-2.0
#include "lime/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "lime/errors.hpp"
#include "lime/weights_io.hpp"

namespace lime::bench {

void RunConfig::reconcile() {
  model.patch_dim = corpus.patch_dim;
  model.vocab_size = std::max(model.vocab_size,
                              static_cast<std::size_t>(model::Vocabulary::first_object) + corpus.num_objects);
}

void RunConfig::validate() const {
  corpus.validate();
  model.validate();
  lime.validate();
  if (model.patch_dim != corpus.patch_dim) throw ConfigError("model.patch_dim must equal corpus.patch_dim");
  if (static_cast<std::size_t>(model::Vocabulary::first_object) + corpus.num_objects > model.vocab_size) {
    throw ConfigError("model vocabulary cannot hold every corpus object");
  }
  if (train.bias_rate < 0.0 || train.bias_rate > 1.0) throw ConfigError("train.bias_rate must lie in [0, 1]");
}

nlohmann::json to_json(const model::TrainConfig& t) {
  return {{"bias_rate", t.bias_rate},         {"epochs", t.epochs},         {"seed", t.seed},
          {"learning_rate", t.learning_rate}, {"batch_size", t.batch_size}, {"grad_clip", t.grad_clip}};
}

model::TrainConfig train_config_from_json(const nlohmann::json& j, model::TrainConfig t) {
  try {
    t.bias_rate = j.value("bias_rate", t.bias_rate);
    t.epochs = j.value("epochs", t.epochs);
    t.seed = j.value("seed", t.seed);
    t.learning_rate = j.value("learning_rate", t.learning_rate);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.grad_clip = j.value("grad_clip", t.grad_clip);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train config: ") + e.what());
  }
  return t;
}

nlohmann::json to_json(const RunConfig& c) {
  return {{"corpus", to_json(c.corpus)},
          {"model", model::config_to_json(c.model)},
          {"train", to_json(c.train)},
          {"lime", steering::to_json(c.lime)}};
}

RunConfig run_config_from_json(const nlohmann::json& j, RunConfig c) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "corpus" && key != "model" && key != "train" && key != "lime") {
      throw ConfigError("unknown config section '" + key + "'");
    }
  }
  if (j.contains("corpus")) {
    auto merged = to_json(c.corpus);
    merged.update(j.at("corpus"));
    c.corpus = corpus_config_from_json(merged);
  }
  if (j.contains("model")) {
    auto merged = model::config_to_json(c.model);
    merged.update(j.at("model"));
    c.model = model::config_from_json(merged);
  }
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
  if (j.contains("lime")) {
    auto merged = steering::to_json(c.lime);
    merged.update(j.at("lime"));
    c.lime = steering::lime_config_from_json(merged);
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& file, RunConfig base) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open config " + file.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse " + file.string() + ": " + e.what());
  }
  return run_config_from_json(j, std::move(base));
}

std::uint64_t default_seed(std::uint64_t fallback) {
  const char* env = std::getenv("LIME_SEED");
  if (env == nullptr || *env == '\0') return fallback;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (end == env || *end != '\0') throw ConfigError(std::string("LIME_SEED is not an unsigned integer: ") + env);
  return v;
}

std::string model_key(const RunConfig& c) {
  const nlohmann::json j = {{"corpus", to_json(c.corpus)}, {"model", model::config_to_json(c.model)},
                            {"train", to_json(c.train)}};
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

model::ModelWeights obtain_model(const RunConfig& c, const Corpus& corpus, const std::filesystem::path& dir,
                                 const TrainLog& log) {
  c.validate();
  const auto file = dir / ("model-" + model_key(c) + ".limew");
  if (std::filesystem::exists(file)) {
    auto w = model::load_weights(file);
    if (!(w.config == c.model)) throw IoError("cached model config differs from the request: " + file.string());
    if (log) log("loaded cached model " + file.string());
    return w;
  }
  if (!(corpus.config == c.corpus)) throw ContractError("obtain_model: corpus does not match the run config");
  if (log) log("training model " + file.filename().string());
  auto result = model::train_toy_model(c.model, corpus.training, c.train, [&](const model::EpochLog& e) {
    if (log) {
      std::ostringstream os;
      os << "epoch " << e.epoch << " mean loss " << e.mean_loss;
      log(os.str());
    }
  });
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json meta = to_json(c);
  meta["epoch_losses"] = nlohmann::json::array();
  for (const auto& e : result.log) meta["epoch_losses"].push_back(e.mean_loss);
  // Write under a temporary name first so an interrupted run leaves no partial cache entry.
  const auto tmp = dir / (file.filename().string() + ".partial");
  model::save_weights(result.weights, tmp, meta);
  std::filesystem::rename(tmp.string() + ".json", file.string() + ".json");
  std::filesystem::rename(tmp, file);
  return result.weights;
}

}  // namespace lime::bench
