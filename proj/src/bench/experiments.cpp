// SPDX-License-Identifier: Apache-2.0
#include "lime/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <sstream>

#include "lime/errors.hpp"
#include "lime/relevance.hpp"

namespace lime::bench {

using steering::LimeConfig;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void check_compatible(const model::FrozenModel& model, const Corpus& corpus, std::size_t max_tokens) {
  const auto& mc = model.config();
  if (mc.patch_dim != corpus.config.patch_dim) {
    throw ConfigError("model expects patches of width " + std::to_string(mc.patch_dim) + ", scenes provide " +
                      std::to_string(corpus.config.patch_dim));
  }
  if (static_cast<std::size_t>(model::Vocabulary::first_object) + corpus.config.num_objects > mc.vocab_size) {
    throw ConfigError("scene objects do not fit the model vocabulary");
  }
  // Prefix, cells, the longest suffix and the generation budget must fit.
  const std::size_t longest = 1 + corpus.config.cells() + 5 + max_tokens;
  if (longest > mc.max_sequence) {
    throw ConfigError("prompt plus token budget (" + std::to_string(longest) + ") exceeds max_sequence " +
                      std::to_string(mc.max_sequence));
  }
}

std::vector<StepSummary> summarize(const std::vector<steering::StepReport>& reports) {
  std::vector<StepSummary> out;
  for (const auto& r : reports) {
    out.push_back({r.reference_token, r.chosen_token, r.initial_loss(), r.final_loss(), r.fallback});
  }
  return out;
}

struct Generation {
  std::vector<int> tokens;
  std::vector<double> phi;  // relevance behind the first generated token
  std::vector<StepSummary> steps;
};

Generation generate(const model::FrozenModel& model, const model::MultimodalSequence& seq, const Arm& arm,
                    std::size_t max_tokens, bool want_relevance,
                    const std::function<void(const steering::StepReport&)>& on_step) {
  Generation g;
  if (!arm.lime) {
    g.tokens = steering::greedy_decode(model, seq, max_tokens);
  } else {
    steering::DecodeOptions opts;
    opts.on_step = on_step;
    auto result = steering::decode(model, seq, *arm.lime, max_tokens, opts);
    g.tokens = std::move(result.tokens);
    g.steps = summarize(result.reports);
    if (want_relevance && !result.reports.empty()) {
      const auto& first = result.reports.front();
      if (!first.fallback && !first.relevance_frames.empty()) g.phi = first.relevance_frames.back();
    }
  }
  if (want_relevance && g.phi.empty() && max_tokens > 0) {
    g.phi = relevance::explain(model, seq, nullptr, -1, {}).token_relevance;
  }
  return g;
}

template <class T>
std::vector<T> truncated(const std::vector<T>& v, std::size_t limit) {
  if (limit == 0 || limit >= v.size()) return v;
  return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(limit)};
}

void add_steps(AggregateRow& row, const std::vector<StepSummary>& steps) {
  for (const auto& s : steps) {
    ++row.steps;
    if (s.chosen_token == s.reference_token) ++row.steps_matching_reference;
    if (s.final_loss < s.initial_loss) ++row.steps_loss_improved;
    if (s.fallback) ++row.fallbacks;
  }
}

}  // namespace

const AggregateRow& BenchmarkReport::row(const std::string& arm, const std::string& split) const {
  for (const auto& r : aggregates)
    if (r.arm == arm && r.split == split) return r;
  throw ContractError("report has no row for arm '" + arm + "' and split '" + split + "'");
}

std::vector<AggregateRow> compute_aggregates(const BenchmarkReport& report) {
  std::vector<std::pair<std::string, std::string>> keys;
  auto key_of = [&](const std::string& arm, const std::string& split) {
    const auto k = std::make_pair(arm, split);
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  };
  for (const auto& r : report.pope) key_of(r.arm, to_string(r.split));
  for (const auto& r : report.captions) key_of(r.arm, "caption");

  std::vector<AggregateRow> rows;
  for (const auto& [arm, split] : keys) {
    AggregateRow row;
    row.arm = arm;
    row.split = split;
    if (split == "caption") {
      std::vector<std::vector<int>> mentions, truth;
      for (const auto& r : report.captions) {
        if (r.arm != arm) continue;
        mentions.push_back(r.mentions);
        truth.push_back(r.ground_truth);
        add_steps(row, r.steps);
        row.seconds += r.seconds;
      }
      const auto s = metrics::chair_score(mentions, truth);
      row.count = mentions.size();
      row.chair_s = s.chair_s;
      row.chair_i = s.chair_i;
      row.chair_recall = s.recall;
    } else {
      std::vector<metrics::Answer> preds;
      std::vector<bool> labels;
      double sg = 0.0, mr = 0.0;
      std::size_t sg_n = 0, mr_n = 0;
      for (const auto& r : report.pope) {
        if (r.arm != arm || to_string(r.split) != split) continue;
        preds.push_back(r.prediction);
        labels.push_back(r.label);
        // Spatial grounding is only meaningful when the queried object is present.
        if (r.label) {
          if (r.spatial_grounding) {
            sg += *r.spatial_grounding;
            ++sg_n;
          } else {
            ++row.undefined_spatial_grounding;
          }
        }
        if (r.modality_reliance) {
          mr += *r.modality_reliance;
          ++mr_n;
        } else {
          ++row.undefined_modality_reliance;
        }
        add_steps(row, r.steps);
        row.seconds += r.seconds;
      }
      const auto s = metrics::pope_score(preds, labels);
      row.count = preds.size();
      row.accuracy = s.accuracy;
      row.precision = s.precision;
      row.recall = s.recall;
      row.f1 = s.f1;
      row.yes_ratio = s.yes_ratio;
      row.unparseable = s.unparseable;
      row.mean_spatial_grounding = sg_n ? sg / static_cast<double>(sg_n) : 0.0;
      row.mean_modality_reliance = mr_n ? mr / static_cast<double>(mr_n) : 0.0;
    }
    rows.push_back(row);
  }
  return rows;
}

BenchmarkReport run_pope_experiment(const model::FrozenModel& model, const Corpus& corpus,
                                    const std::vector<Split>& splits, const std::vector<Arm>& arms,
                                    const ExperimentOptions& options) {
  if (arms.empty()) throw ContractError("run_pope_experiment: no arms");
  check_compatible(model, corpus, options.max_tokens);
  BenchmarkReport report;
  report.task = "pope";
  report.seed = corpus.config.seed;
  report.config = {{"corpus", to_json(corpus.config)}, {"max_tokens", options.max_tokens}, {"arms", nlohmann::json::array()}};
  for (const auto& arm : arms) {
    report.config["arms"].push_back({{"name", arm.name}, {"lime", arm.lime ? to_json(*arm.lime) : nlohmann::json()}});
  }

  std::size_t total = 0, done = 0;
  for (Split s : splits) total += truncated(corpus.splits.at(s), options.max_examples).size() * arms.size();
  for (const auto& arm : arms) {
    for (Split split : splits) {
      for (const auto& q : truncated(corpus.splits.at(split), options.max_examples)) {
        const Scene& scene = corpus.eval_scenes.at(q.scene);
        const auto seq = model::embed_prompt(model, pope_prompt(scene, q.query));
        const auto t0 = Clock::now();
        auto g = generate(model, seq, arm, options.max_tokens, true, options.on_step);
        PopeRecord r;
        r.seconds = seconds_since(t0);
        r.arm = arm.name;
        r.split = split;
        r.scene = q.scene;
        r.scene_id = scene.id;
        r.query = q.query;
        r.label = q.label;
        r.prediction = metrics::parse_answer(g.tokens);
        r.tokens = std::move(g.tokens);
        r.steps = std::move(g.steps);
        if (!g.phi.empty()) {
          const auto scores = metrics::grounding_scores(g.phi, seq);
          r.spatial_grounding = scores.spatial_grounding;
          r.modality_reliance = scores.modality_reliance;
        }
        report.pope.push_back(std::move(r));
        if (options.on_progress) options.on_progress(++done, total);
      }
    }
  }
  report.aggregates = compute_aggregates(report);
  return report;
}

BenchmarkReport run_caption_experiment(const model::FrozenModel& model, const Corpus& corpus,
                                       const std::vector<Arm>& arms, ExperimentOptions options) {
  if (arms.empty()) throw ContractError("run_caption_experiment: no arms");
  if (options.max_tokens == 20) options.max_tokens = 150;
  // Listings stop at EOS long before the budget; the budget only has to fit the context.
  const std::size_t budget =
      std::min(options.max_tokens, model.config().max_sequence - std::min(model.config().max_sequence, 1 + corpus.config.cells() + 2));
  check_compatible(model, corpus, 0);
  BenchmarkReport report;
  report.task = "caption";
  report.seed = corpus.config.seed;
  report.config = {{"corpus", to_json(corpus.config)}, {"max_tokens", options.max_tokens}, {"arms", nlohmann::json::array()}};
  for (const auto& arm : arms) {
    report.config["arms"].push_back({{"name", arm.name}, {"lime", arm.lime ? to_json(*arm.lime) : nlohmann::json()}});
  }
  const std::size_t n = options.max_examples == 0 ? corpus.eval_scenes.size()
                                                  : std::min(options.max_examples, corpus.eval_scenes.size());
  std::size_t done = 0;
  for (const auto& arm : arms) {
    for (std::size_t i = 0; i < n; ++i) {
      const Scene& scene = corpus.eval_scenes[i];
      const auto seq = model::embed_prompt(model, caption_prompt(scene));
      const auto t0 = Clock::now();
      auto g = generate(model, seq, arm, budget, false, options.on_step);
      CaptionRecord r;
      r.seconds = seconds_since(t0);
      r.arm = arm.name;
      r.scene = i;
      r.scene_id = scene.id;
      for (int m : metrics::extract_mentions(g.tokens)) r.mentions.push_back(model::Vocabulary::object_index(m));
      r.ground_truth = scene.inventory;
      r.tokens = std::move(g.tokens);
      r.steps = std::move(g.steps);
      report.captions.push_back(std::move(r));
      if (options.on_progress) options.on_progress(++done, n * arms.size());
    }
  }
  report.aggregates = compute_aggregates(report);
  return report;
}

std::string ablation_arm_name(steering::EditMode mode, double lambda) {
  std::ostringstream os;
  os << steering::to_string(mode) << '@' << lambda;
  return os.str();
}

BenchmarkReport run_ablation(const model::FrozenModel& model, const Corpus& corpus, const std::vector<Split>& splits,
                             const AblationGrid& grid, const LimeConfig& base, const ExperimentOptions& options) {
  if (grid.edit_modes.empty() || grid.lambdas.empty()) throw ContractError("run_ablation: empty grid");
  std::vector<Arm> arms;
  if (grid.include_vanilla) arms.push_back(Arm::vanilla());
  for (auto mode : grid.edit_modes) {
    for (double lambda : grid.lambdas) {
      LimeConfig c = base;
      c.edit_mode = mode;
      c.lambda = lambda;
      c.validate();
      arms.push_back(Arm::with_lime(c, ablation_arm_name(mode, lambda)));
    }
  }
  auto report = run_pope_experiment(model, corpus, splits, arms, options);
  report.task = "ablation";
  return report;
}

BenchmarkReport without_timing(BenchmarkReport report) {
  for (auto& r : report.pope) r.seconds = 0.0;
  for (auto& r : report.captions) r.seconds = 0.0;
  for (auto& a : report.aggregates) a.seconds = 0.0;
  return report;
}

// ---- serialization ----

namespace {

metrics::Answer answer_from_string(const std::string& s) {
  if (s == "yes") return metrics::Answer::yes;
  if (s == "no") return metrics::Answer::no;
  if (s == "unparseable") return metrics::Answer::unparseable;
  throw IoError("unknown answer '" + s + "'");
}

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }
std::optional<double> opt_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

nlohmann::json steps_json(const std::vector<StepSummary>& steps) {
  auto a = nlohmann::json::array();
  for (const auto& s : steps) {
    a.push_back({{"reference_token", s.reference_token}, {"chosen_token", s.chosen_token},
                 {"initial_loss", s.initial_loss}, {"final_loss", s.final_loss}, {"fallback", s.fallback}});
  }
  return a;
}

std::vector<StepSummary> steps_from(const nlohmann::json& a) {
  std::vector<StepSummary> out;
  for (const auto& s : a) {
    out.push_back({s.at("reference_token").get<int>(), s.at("chosen_token").get<int>(),
                   s.at("initial_loss").get<double>(), s.at("final_loss").get<double>(), s.at("fallback").get<bool>()});
  }
  return out;
}

nlohmann::json row_json(const AggregateRow& r) {
  return {{"arm", r.arm},
          {"split", r.split},
          {"count", r.count},
          {"accuracy", r.accuracy},
          {"precision", r.precision},
          {"recall", r.recall},
          {"f1", r.f1},
          {"yes_ratio", r.yes_ratio},
          {"unparseable", r.unparseable},
          {"chair_s", r.chair_s},
          {"chair_i", r.chair_i},
          {"chair_recall", r.chair_recall},
          {"mean_spatial_grounding", r.mean_spatial_grounding},
          {"mean_modality_reliance", r.mean_modality_reliance},
          {"undefined_spatial_grounding", r.undefined_spatial_grounding},
          {"undefined_modality_reliance", r.undefined_modality_reliance},
          {"steps", r.steps},
          {"steps_matching_reference", r.steps_matching_reference},
          {"steps_loss_improved", r.steps_loss_improved},
          {"fallbacks", r.fallbacks},
          {"seconds", r.seconds}};
}

AggregateRow row_from(const nlohmann::json& j) {
  AggregateRow r;
  r.arm = j.at("arm").get<std::string>();
  r.split = j.at("split").get<std::string>();
  r.count = j.at("count").get<std::size_t>();
  r.accuracy = j.at("accuracy").get<double>();
  r.precision = j.at("precision").get<double>();
  r.recall = j.at("recall").get<double>();
  r.f1 = j.at("f1").get<double>();
  r.yes_ratio = j.at("yes_ratio").get<double>();
  r.unparseable = j.at("unparseable").get<std::size_t>();
  r.chair_s = j.at("chair_s").get<double>();
  r.chair_i = j.at("chair_i").get<double>();
  r.chair_recall = j.at("chair_recall").get<double>();
  r.mean_spatial_grounding = j.at("mean_spatial_grounding").get<double>();
  r.mean_modality_reliance = j.at("mean_modality_reliance").get<double>();
  r.undefined_spatial_grounding = j.at("undefined_spatial_grounding").get<std::size_t>();
  r.undefined_modality_reliance = j.at("undefined_modality_reliance").get<std::size_t>();
  r.steps = j.at("steps").get<std::size_t>();
  r.steps_matching_reference = j.at("steps_matching_reference").get<std::size_t>();
  r.steps_loss_improved = j.at("steps_loss_improved").get<std::size_t>();
  r.fallbacks = j.at("fallbacks").get<std::size_t>();
  r.seconds = j.at("seconds").get<double>();
  return r;
}

}  // namespace

nlohmann::json to_json(const BenchmarkReport& r) {
  nlohmann::json j = {{"task", r.task}, {"seed", r.seed}, {"config", r.config}};
  j["pope"] = nlohmann::json::array();
  for (const auto& p : r.pope) {
    j["pope"].push_back({{"arm", p.arm},
                         {"split", to_string(p.split)},
                         {"scene", p.scene},
                         {"scene_id", p.scene_id},
                         {"query", p.query},
                         {"label", p.label},
                         {"prediction", metrics::to_string(p.prediction)},
                         {"tokens", p.tokens},
                         {"spatial_grounding", opt(p.spatial_grounding)},
                         {"modality_reliance", opt(p.modality_reliance)},
                         {"steps", steps_json(p.steps)},
                         {"seconds", p.seconds}});
  }
  j["captions"] = nlohmann::json::array();
  for (const auto& c : r.captions) {
    j["captions"].push_back({{"arm", c.arm},
                             {"scene", c.scene},
                             {"scene_id", c.scene_id},
                             {"tokens", c.tokens},
                             {"mentions", c.mentions},
                             {"ground_truth", c.ground_truth},
                             {"steps", steps_json(c.steps)},
                             {"seconds", c.seconds}});
  }
  j["aggregates"] = nlohmann::json::array();
  for (const auto& a : r.aggregates) j["aggregates"].push_back(row_json(a));
  return j;
}

BenchmarkReport report_from_json(const nlohmann::json& j) {
  BenchmarkReport r;
  try {
    r.task = j.at("task").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config = j.at("config");
    for (const auto& p : j.at("pope")) {
      PopeRecord x;
      x.arm = p.at("arm").get<std::string>();
      x.split = split_from_string(p.at("split").get<std::string>());
      x.scene = p.at("scene").get<std::size_t>();
      x.scene_id = p.at("scene_id").get<std::uint64_t>();
      x.query = p.at("query").get<int>();
      x.label = p.at("label").get<bool>();
      x.prediction = answer_from_string(p.at("prediction").get<std::string>());
      x.tokens = p.at("tokens").get<std::vector<int>>();
      x.spatial_grounding = opt_from(p.at("spatial_grounding"));
      x.modality_reliance = opt_from(p.at("modality_reliance"));
      x.steps = steps_from(p.at("steps"));
      x.seconds = p.at("seconds").get<double>();
      r.pope.push_back(std::move(x));
    }
    for (const auto& c : j.at("captions")) {
      CaptionRecord x;
      x.arm = c.at("arm").get<std::string>();
      x.scene = c.at("scene").get<std::size_t>();
      x.scene_id = c.at("scene_id").get<std::uint64_t>();
      x.tokens = c.at("tokens").get<std::vector<int>>();
      x.mentions = c.at("mentions").get<std::vector<int>>();
      x.ground_truth = c.at("ground_truth").get<std::vector<int>>();
      x.steps = steps_from(c.at("steps"));
      x.seconds = c.at("seconds").get<double>();
      r.captions.push_back(std::move(x));
    }
    for (const auto& a : j.at("aggregates")) r.aggregates.push_back(row_from(a));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed report: ") + e.what());
  } catch (const ConfigError& e) {
    throw IoError(std::string("malformed report: ") + e.what());
  }
  return r;
}

std::string aggregates_csv(const BenchmarkReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "arm,split,count,accuracy,precision,recall,f1,yes_ratio,unparseable,chair_s,chair_i,chair_recall,"
        "mean_spatial_grounding,mean_modality_reliance,undefined_spatial_grounding,undefined_modality_reliance,"
        "steps,steps_matching_reference,steps_loss_improved,fallbacks,seconds\n";
  for (const auto& a : r.aggregates) {
    os << a.arm << ',' << a.split << ',' << a.count << ',' << a.accuracy << ',' << a.precision << ',' << a.recall << ','
       << a.f1 << ',' << a.yes_ratio << ',' << a.unparseable << ',' << a.chair_s << ',' << a.chair_i << ','
       << a.chair_recall << ',' << a.mean_spatial_grounding << ',' << a.mean_modality_reliance << ','
       << a.undefined_spatial_grounding << ',' << a.undefined_modality_reliance << ',' << a.steps << ','
       << a.steps_matching_reference << ',' << a.steps_loss_improved << ',' << a.fallbacks << ',' << a.seconds << '\n';
  }
  return os.str();
}

namespace {

void write_text(const std::filesystem::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write " + file.string());
  out << text;
  if (!out) throw IoError("write failed for " + file.string());
}

}  // namespace

void write_report(const BenchmarkReport& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_text(dir / "report.json", to_json(r).dump(2));
  write_text(dir / "aggregates.csv", aggregates_csv(r));
}

BenchmarkReport read_report(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open " + file.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("cannot parse " + file.string() + ": " + e.what());
  }
  return report_from_json(j);
}

// ---- heatmaps ----

HeatmapImage heatmap_image(const std::vector<double>& phi, const model::MultimodalSequence& seq, const Scene& scene,
                           std::size_t cell_pixels) {
  if (cell_pixels == 0) throw ContractError("heatmap: cell_pixels must be positive");
  if (phi.size() != seq.length()) throw ContractError("heatmap: relevance does not cover the sequence");
  if (seq.modality_indices.size() != scene.cells.size()) throw ContractError("heatmap: scene and sequence disagree");
  std::vector<double> cell(scene.cells.size());
  for (std::size_t i = 0; i < cell.size(); ++i) cell[i] = std::abs(phi[seq.modality_indices[i]]);
  const auto [lo, hi] = std::minmax_element(cell.begin(), cell.end());
  const double lo_v = cell.empty() ? 0.0 : *lo, span = cell.empty() ? 0.0 : *hi - *lo;
  std::vector<bool> grounded(cell.size(), false);
  for (std::size_t g : seq.grounding_indices) {
    const auto it = std::find(seq.modality_indices.begin(), seq.modality_indices.end(), g);
    if (it != seq.modality_indices.end()) grounded[static_cast<std::size_t>(it - seq.modality_indices.begin())] = true;
  }

  HeatmapImage img;
  img.width = scene.cols * cell_pixels;
  img.height = scene.rows * cell_pixels;
  img.rgb.assign(img.width * img.height * 3, 0);
  const std::size_t border = std::max<std::size_t>(1, cell_pixels / 8);
  for (std::size_t c = 0; c < cell.size(); ++c) {
    // A constant field maps to full intensity so "uniform" stays visible.
    const double v = span > 0.0 ? (cell[c] - lo_v) / span : 1.0;
    const auto level = static_cast<unsigned char>(std::lround(255.0 * v));
    const std::size_t r0 = (c / scene.cols) * cell_pixels, c0 = (c % scene.cols) * cell_pixels;
    for (std::size_t y = 0; y < cell_pixels; ++y) {
      for (std::size_t x = 0; x < cell_pixels; ++x) {
        const bool edge = y < border || x < border || y >= cell_pixels - border || x >= cell_pixels - border;
        unsigned char* px = &img.rgb[((r0 + y) * img.width + c0 + x) * 3];
        if (grounded[c] && edge) {
          px[0] = 255;
          px[1] = 0;
          px[2] = 0;
        } else {
          px[0] = px[1] = px[2] = level;
        }
      }
    }
  }
  return img;
}

void render_heatmap(const std::vector<double>& phi, const model::MultimodalSequence& seq, const Scene& scene,
                    const std::filesystem::path& path, std::size_t cell_pixels) {
  const auto img = heatmap_image(phi, seq, scene, cell_pixels);
  std::ostringstream header;
  header << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::string bytes = header.str();
  bytes.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
  write_text(path, bytes);
  std::vector<double> cells;
  for (std::size_t i : seq.modality_indices) cells.push_back(phi[i]);
  nlohmann::json side = {{"kind", to_string(scene.kind)},
                         {"rows", scene.rows},
                         {"cols", scene.cols},
                         {"cell_pixels", cell_pixels},
                         {"token_relevance", phi},
                         {"cell_relevance", cells},
                         {"modality_indices", seq.modality_indices},
                         {"grounding_indices", seq.grounding_indices}};
  write_text(path.string() + ".json", side.dump(2));
}

void render_heatmap(const relevance::RelevanceMap& map, const model::MultimodalSequence& seq, const Scene& scene,
                    const std::filesystem::path& path, std::size_t cell_pixels) {
  render_heatmap(map.token_relevance, seq, scene, path, cell_pixels);
}

std::vector<std::filesystem::path> render_optimization_frames(const steering::StepReport& report,
                                                              const model::MultimodalSequence& seq,
                                                              const Scene& scene,
                                                              const std::filesystem::path& stem,
                                                              std::size_t cell_pixels) {
  std::vector<std::filesystem::path> out;
  for (std::size_t k = 0; k < report.relevance_frames.size(); ++k) {
    std::filesystem::path p = stem;
    p += "_frame" + std::to_string(k) + ".ppm";
    render_heatmap(report.relevance_frames[k], seq, scene, p, cell_pixels);
    out.push_back(p);
  }
  return out;
}

// ---- overhead ----

std::vector<OverheadPoint> run_overhead_sweep(const model::FrozenModel& model,
                                              const std::vector<model::MultimodalSequence>& prompts,
                                              const std::vector<std::size_t>& step_counts, const LimeConfig& base,
                                              std::size_t max_tokens) {
  if (prompts.empty()) throw ContractError("overhead sweep needs at least one prompt");
  std::vector<metrics::TimedRun> vanilla;
  for (const auto& p : prompts) {
    const auto t0 = Clock::now();
    const auto tokens = steering::greedy_decode(model, p, max_tokens);
    vanilla.push_back({tokens.size(), seconds_since(t0)});
  }
  std::vector<OverheadPoint> out;
  for (std::size_t steps : step_counts) {
    LimeConfig c = base;
    c.steps = steps;
    std::vector<metrics::TimedRun> lime;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      const auto t0 = Clock::now();
      const auto r = steering::decode(model, prompts[i], c, max_tokens);
      lime.push_back({r.tokens.size(), seconds_since(t0)});
    }
    out.push_back({steps, metrics::overhead_report(vanilla, lime)});
  }
  return out;
}

nlohmann::json to_json(const std::vector<OverheadPoint>& sweep) {
  auto a = nlohmann::json::array();
  for (const auto& p : sweep) {
    auto j = metrics::to_json(p.report);
    j["steps"] = p.steps;
    a.push_back(j);
  }
  return {{"sweep", a}, {"reference_slowdown_7_steps", 9.43}};
}

}  // namespace lime::bench
