// SPDX-License-Identifier: Apache-2.0
#include "lime/corpus.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "lime/errors.hpp"

namespace lime::bench {

using model::Vocabulary;

std::string to_string(SceneKind k) { return k == SceneKind::grid_2d ? "grid-2d" : "sequence-1d"; }

SceneKind scene_kind_from_string(const std::string& s) {
  if (s == "grid-2d") return SceneKind::grid_2d;
  if (s == "sequence-1d") return SceneKind::sequence_1d;
  throw ConfigError("unknown scene kind '" + s + "'");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::random: return "random";
    case Split::popular: return "popular";
    case Split::adversarial: return "adversarial";
  }
  return "random";
}

Split split_from_string(const std::string& s) {
  if (s == "random") return Split::random;
  if (s == "popular") return Split::popular;
  if (s == "adversarial") return Split::adversarial;
  throw ConfigError("unknown split '" + s + "'");
}

void CorpusConfig::validate() const {
  if (cells() == 0) throw ConfigError("scene must have at least one cell");
  if (num_objects == 0 || num_topics == 0) throw ConfigError("need at least one object and one topic");
  if (num_topics > static_cast<std::size_t>(Vocabulary::max_topics)) throw ConfigError("too many topics for the vocabulary");
  if (min_objects > max_objects) throw ConfigError("min_objects exceeds max_objects");
  if (max_objects > num_objects) throw ConfigError("vocabulary smaller than objects per scene");
  if (max_objects >= num_objects) throw ConfigError("every object could be present; negatives would be impossible");
  if (max_extent == 0) throw ConfigError("max_extent must be positive");
  if (max_objects * max_extent > cells()) throw ConfigError("more object cells than scene cells");
  if (core_size == 0 || core_size > num_objects) throw ConfigError("core_size must lie in [1, num_objects]");
  if (patch_dim < num_objects + 1) throw ConfigError("patch_dim must hold one slot per object plus the empty flag");
  if (!(topic_affinity >= 0.0 && topic_affinity <= 1.0)) throw ConfigError("topic_affinity must lie in [0, 1]");
  if (!(hard_negative_rate >= 0.0 && hard_negative_rate <= 1.0)) {
    throw ConfigError("hard_negative_rate must lie in [0, 1]");
  }
  if (!(noise >= 0.0) || !(symbol_noise >= 0.0) || !(signal_min > 0.0) || signal_max < signal_min) throw ConfigError("bad signal/noise levels");
  if (eval_scenes == 0) throw ConfigError("eval_scenes must be positive");
}

nlohmann::json to_json(const CorpusConfig& c) {
  return {{"kind", to_string(c.kind)},     {"grid_rows", c.grid_rows},
          {"grid_cols", c.grid_cols},      {"num_objects", c.num_objects},
          {"num_topics", c.num_topics},    {"core_size", c.core_size},
          {"topic_affinity", c.topic_affinity}, {"hard_negative_rate", c.hard_negative_rate},
          {"min_objects", c.min_objects},
          {"max_objects", c.max_objects},  {"max_extent", c.max_extent},
          {"signal_min", c.signal_min},    {"signal_max", c.signal_max},
          {"noise", c.noise},              {"symbol_noise", c.symbol_noise},
          {"patch_dim", c.patch_dim},
          {"train_scenes", c.train_scenes}, {"eval_scenes", c.eval_scenes},
          {"seed", c.seed}};
}

CorpusConfig corpus_config_from_json(const nlohmann::json& j) {
  CorpusConfig c;
  try {
    if (j.contains("kind")) c.kind = scene_kind_from_string(j.at("kind").get<std::string>());
    c.grid_rows = j.value("grid_rows", c.grid_rows);
    c.grid_cols = j.value("grid_cols", c.grid_cols);
    c.num_objects = j.value("num_objects", c.num_objects);
    c.num_topics = j.value("num_topics", c.num_topics);
    c.core_size = j.value("core_size", c.core_size);
    c.topic_affinity = j.value("topic_affinity", c.topic_affinity);
    c.hard_negative_rate = j.value("hard_negative_rate", c.hard_negative_rate);
    c.min_objects = j.value("min_objects", c.min_objects);
    c.max_objects = j.value("max_objects", c.max_objects);
    c.max_extent = j.value("max_extent", c.max_extent);
    c.signal_min = j.value("signal_min", c.signal_min);
    c.signal_max = j.value("signal_max", c.signal_max);
    c.noise = j.value("noise", c.noise);
    c.symbol_noise = j.value("symbol_noise", c.symbol_noise);
    c.patch_dim = j.value("patch_dim", c.patch_dim);
    c.train_scenes = j.value("train_scenes", c.train_scenes);
    c.eval_scenes = j.value("eval_scenes", c.eval_scenes);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad corpus config: ") + e.what());
  }
  c.validate();
  return c;
}

bool Scene::contains(int object) const { return std::binary_search(inventory.begin(), inventory.end(), object); }

std::vector<std::size_t> Scene::region_of(int object) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < cells.size(); ++i)
    if (cells[i] == object) out.push_back(i);
  return out;
}

std::vector<int> Scene::raster_objects() const {
  std::vector<int> out;
  for (int c : cells)
    if (c >= 0 && std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
  return out;
}

namespace {

// Topic t favours a window of core_size consecutive objects; neighbouring
// windows overlap, which makes the shared objects the most frequent.
std::vector<int> topic_core(const CorpusConfig& c, int topic) {
  const std::size_t stride = std::max<std::size_t>(1, c.num_objects / c.num_topics);
  std::vector<int> core;
  for (std::size_t j = 0; j < c.core_size; ++j) {
    core.push_back(static_cast<int>((static_cast<std::size_t>(topic) * stride + j) % c.num_objects));
  }
  return core;
}

template <class T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

bool place(Scene& s, int object, std::size_t extent, std::mt19937_64& rng) {
  const bool grid = s.kind == SceneKind::grid_2d;
  std::vector<std::vector<std::size_t>> options;
  for (std::size_t r = 0; r < s.rows; ++r)
    for (std::size_t c = 0; c < s.cols; ++c)
      for (int dir = 0; dir < (grid && extent > 1 ? 2 : 1); ++dir) {
        std::vector<std::size_t> cells;
        for (std::size_t k = 0; k < extent; ++k) {
          const std::size_t rr = dir ? r + k : r, cc = dir ? c : c + k;
          if (rr >= s.rows || cc >= s.cols || s.cells[rr * s.cols + cc] >= 0) break;
          cells.push_back(rr * s.cols + cc);
        }
        if (cells.size() == extent) options.push_back(std::move(cells));
      }
  if (options.empty()) return false;
  for (auto cell : pick(options, rng)) s.cells[cell] = object;
  return true;
}

}  // namespace

Scene generate_scene(const CorpusConfig& config, std::uint64_t id, std::mt19937_64& rng) {
  Scene s;
  s.id = id;
  s.kind = config.kind;
  s.rows = config.kind == SceneKind::grid_2d ? config.grid_rows : 1;
  s.cols = config.kind == SceneKind::grid_2d ? config.grid_cols : config.cells();
  s.cells.assign(config.cells(), -1);
  s.topic = static_cast<int>(std::uniform_int_distribution<std::size_t>(0, config.num_topics - 1)(rng));
  const std::size_t count = std::uniform_int_distribution<std::size_t>(config.min_objects, config.max_objects)(rng);
  const auto core = topic_core(config, s.topic);
  std::bernoulli_distribution from_core(config.topic_affinity);
  std::vector<int> chosen;
  while (chosen.size() < count) {
    std::vector<int> pool;
    if (from_core(rng)) {
      for (int o : core)
        if (std::find(chosen.begin(), chosen.end(), o) == chosen.end()) pool.push_back(o);
    }
    if (pool.empty()) {
      for (int o = 0; o < static_cast<int>(config.num_objects); ++o)
        if (std::find(chosen.begin(), chosen.end(), o) == chosen.end()) pool.push_back(o);
    }
    chosen.push_back(pick(pool, rng));
  }
  for (int o : chosen) {
    std::size_t extent = std::uniform_int_distribution<std::size_t>(1, config.max_extent)(rng);
    while (!place(s, o, extent, rng)) {
      if (extent == 1) throw ConfigError("scene too small to place every object");
      extent = 1;
    }
  }
  s.inventory = chosen;
  std::sort(s.inventory.begin(), s.inventory.end());

  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> amp(config.signal_min, config.signal_max);
  std::vector<double> amplitude(config.num_objects, 0.0);
  for (int o : chosen) amplitude[static_cast<std::size_t>(o)] = amp(rng);
  s.patch_features = Tensor::matrix(config.cells(), config.patch_dim);
  for (std::size_t i = 0; i < config.cells(); ++i) {
    const int o = s.cells[i];
    if (o >= 0) s.patch_features(i, static_cast<std::size_t>(o)) = amplitude[static_cast<std::size_t>(o)];
    else s.patch_features(i, config.num_objects) = 1.0;
    // Symbol slots (objects plus the empty flag) then the appended noise features.
    for (std::size_t k = 0; k < config.patch_dim; ++k) {
      s.patch_features(i, k) += (k <= config.num_objects ? config.symbol_noise : config.noise) * noise(rng);
    }
  }
  return s;
}

CooccurrenceStats CooccurrenceStats::from_scenes(const std::vector<Scene>& scenes, std::size_t num_objects) {
  CooccurrenceStats st;
  st.frequency.assign(num_objects, 0);
  st.pairs.assign(num_objects, std::vector<std::size_t>(num_objects, 0));
  for (const auto& s : scenes) {
    for (int a : s.inventory) {
      ++st.frequency[static_cast<std::size_t>(a)];
      for (int b : s.inventory)
        if (a != b) ++st.pairs[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
    }
  }
  std::vector<int> order(num_objects);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return st.frequency[static_cast<std::size_t>(a)] > st.frequency[static_cast<std::size_t>(b)];
  });
  const std::size_t decile = std::max<std::size_t>(1, (num_objects + 9) / 10);
  st.popular.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(decile));
  return st;
}

double CooccurrenceStats::affinity(int object, const Scene& scene) const {
  double total = 0.0;
  for (int p : scene.inventory) total += static_cast<double>(pairs[static_cast<std::size_t>(object)][static_cast<std::size_t>(p)]);
  return total;
}

int draw_negative(Split split, const Scene& scene, const CooccurrenceStats& stats, std::size_t num_objects,
                  std::mt19937_64& rng) {
  std::vector<int> absent;
  for (int o = 0; o < static_cast<int>(num_objects); ++o)
    if (!scene.contains(o)) absent.push_back(o);
  if (absent.empty()) throw ContractError("draw_negative: every object is present");
  if (split == Split::random) return pick(absent, rng);

  // Rank absent objects by the split's score; ties keep index order.
  std::vector<double> score(num_objects, 0.0);
  for (int o : absent) {
    score[static_cast<std::size_t>(o)] = split == Split::popular
                                             ? static_cast<double>(stats.frequency[static_cast<std::size_t>(o)])
                                             : stats.affinity(o, scene);
  }
  std::stable_sort(absent.begin(), absent.end(),
                   [&](int a, int b) { return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(b)]; });
  const std::size_t top = split == Split::popular ? stats.popular.size() : 3;
  absent.resize(std::min(absent.size(), std::max<std::size_t>(1, top)));
  return pick(absent, rng);
}

model::Prompt pope_prompt(const Scene& scene, int query) {
  model::Prompt p;
  p.prefix = {Vocabulary::bos};
  p.patches = scene.patch_features;
  p.suffix = {Vocabulary::topic(scene.topic), Vocabulary::ask, Vocabulary::object(query), Vocabulary::please,
              Vocabulary::answer_yes_no};
  p.grounding_cells = scene.region_of(query);
  return p;
}

model::Prompt caption_prompt(const Scene& scene) {
  model::Prompt p;
  p.prefix = {Vocabulary::bos};
  p.patches = scene.patch_features;
  p.suffix = {Vocabulary::topic(scene.topic), Vocabulary::list};
  for (std::size_t i = 0; i < scene.cells.size(); ++i)
    if (scene.cells[i] >= 0) p.grounding_cells.push_back(i);
  return p;
}

std::vector<int> pope_target(bool label) { return {label ? Vocabulary::yes : Vocabulary::no, Vocabulary::eos}; }

std::vector<int> caption_target(const Scene& scene) {
  std::vector<int> out;
  for (int o : scene.raster_objects()) out.push_back(Vocabulary::object(o));
  out.push_back(Vocabulary::eos);
  return out;
}

Corpus generate_corpus(const CorpusConfig& config) {
  config.validate();
  Corpus c;
  c.config = config;
  std::mt19937_64 scene_rng(config.seed * 0x9e3779b97f4a7c15ULL + 1);
  std::mt19937_64 query_rng(config.seed * 0x9e3779b97f4a7c15ULL + 2);
  for (std::size_t i = 0; i < config.train_scenes; ++i) c.train_scenes.push_back(generate_scene(config, i, scene_rng));
  // Eval identifiers live in their own range, so they never collide with training ones.
  constexpr std::uint64_t kEvalBase = 1ULL << 32;
  for (std::size_t i = 0; i < config.eval_scenes; ++i) {
    c.eval_scenes.push_back(generate_scene(config, kEvalBase + i, scene_rng));
  }
  c.stats = CooccurrenceStats::from_scenes(c.train_scenes, config.num_objects);

  std::bernoulli_distribution hard(config.hard_negative_rate);
  for (const auto& s : c.train_scenes) {
    if (!s.inventory.empty()) c.training.push_back({pope_prompt(s, pick(s.inventory, query_rng)), pope_target(true)});
    c.training.push_back(
        {pope_prompt(s, draw_negative(hard(query_rng) ? Split::adversarial : Split::random, s, c.stats,
                                      config.num_objects, query_rng)),
         pope_target(false)});
    c.training.push_back({caption_prompt(s), caption_target(s)});
  }
  for (std::size_t i = 0; i < c.eval_scenes.size(); ++i) {
    const auto& s = c.eval_scenes[i];
    const int positive = s.inventory.empty() ? -1 : pick(s.inventory, query_rng);
    for (Split split : kAllSplits) {
      if (positive >= 0) c.splits[split].push_back({i, positive, true, split});
      c.splits[split].push_back({i, draw_negative(split, s, c.stats, config.num_objects, query_rng), false, split});
    }
  }
  return c;
}

namespace {

struct Fnv {
  std::uint64_t h = 1469598103934665603ULL;
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  }
  template <class T>
  void value(const T& v) {
    bytes(&v, sizeof v);
  }
  void ints(const std::vector<int>& v) {
    value(v.size());
    for (int x : v) value(x);
  }
  void tensor(const Tensor& t) {
    value(t.rows());
    value(t.cols());
    for (double x : t.values()) value(std::bit_cast<std::uint64_t>(x));
  }
};

}  // namespace

std::uint64_t corpus_digest(const Corpus& corpus) {
  Fnv f;
  for (const auto* list : {&corpus.train_scenes, &corpus.eval_scenes}) {
    for (const auto& s : *list) {
      f.value(s.id);
      f.value(s.topic);
      f.ints(s.cells);
      f.tensor(s.patch_features);
    }
  }
  for (const auto& ex : corpus.training) {
    f.ints(ex.prompt.suffix);
    f.ints(ex.targets);
  }
  for (const auto& [split, list] : corpus.splits)
    for (const auto& q : list) {
      f.value(q.scene);
      f.value(q.query);
      f.value(q.label);
      f.value(static_cast<int>(split));
    }
  return f.h;
}

}  // namespace lime::bench
