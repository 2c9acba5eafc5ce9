// SPDX-License-Identifier: Apache-2.0
// Command-line front end: train, decode, pope, caption, ablate, heatmap, overhead.
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "lime/errors.hpp"
#include "lime/experiments.hpp"
#include "lime/relevance.hpp"
#include "lime/run_config.hpp"

using namespace lime;
using namespace lime::bench;

namespace {

/// Flags shared by every subcommand; unset optionals leave the config alone.
struct CommonFlags {
  std::string config_file;
  std::string model_dir = "models";
  std::string out = "lime-out";
  std::string trace;
  std::optional<std::uint64_t> seed;
  std::optional<double> bias_rate;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> steps;
  std::optional<double> learning_rate;
  std::optional<double> lambda;
  std::optional<double> tau;
  std::optional<std::string> edit_mode;
  std::optional<std::string> target;
  std::optional<double> lrp_epsilon;
  std::optional<bool> final_evaluation;
  std::optional<std::string> scene_kind;
  std::size_t max_examples = 0;
  std::optional<std::size_t> max_tokens;
  bool quiet = false;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config_file, "JSON run config (sections: corpus, model, train, lime)");
  app->add_option("--model-dir", f.model_dir, "Directory caching trained models")->capture_default_str();
  app->add_option("--out", f.out, "Output directory")->capture_default_str();
  app->add_option("--seed", f.seed, "Corpus and training seed (default: LIME_SEED or the config)");
  app->add_option("--bias-rate", f.bias_rate, "Modality dropout rate during training");
  app->add_option("--epochs", f.epochs, "Training epochs");
  app->add_option("--steps", f.steps, "Optimizer iterations per decoding step");
  app->add_option("--learning-rate", f.learning_rate, "Adam step size for the perturbation");
  app->add_option("--lambda", f.lambda, "KL regularization weight");
  app->add_option("--tau", f.tau, "Relevance softmax temperature");
  app->add_option("--edit-mode", f.edit_mode, "keys-only, values-only or both");
  app->add_option("--target", f.target, "current or reference");
  app->add_option("--lrp-epsilon", f.lrp_epsilon, "Stabilizer of the epsilon rule");
  app->add_option("--final-evaluation", f.final_evaluation, "Re-run relevance under the final perturbation");
  app->add_option("--scene-kind", f.scene_kind, "grid-2d or sequence-1d");
  app->add_option("--max-examples", f.max_examples, "Examples per split (or scenes), 0 = all");
  app->add_option("--max-tokens", f.max_tokens, "Generation budget");
  app->add_option("--trace", f.trace, "Append step reports to this JSON-lines file");
  app->add_flag("--quiet", f.quiet, "Suppress progress output");
}

RunConfig resolve(const CommonFlags& f) {
  RunConfig c;
  c.corpus.seed = c.train.seed = default_seed(c.corpus.seed);
  if (!f.config_file.empty()) c = load_run_config(f.config_file, c);
  if (f.seed) c.corpus.seed = c.train.seed = *f.seed;
  if (f.scene_kind) c.corpus.kind = scene_kind_from_string(*f.scene_kind);
  if (f.bias_rate) c.train.bias_rate = *f.bias_rate;
  if (f.epochs) c.train.epochs = *f.epochs;
  if (f.steps) c.lime.steps = *f.steps;
  if (f.learning_rate) c.lime.learning_rate = *f.learning_rate;
  if (f.lambda) c.lime.lambda = *f.lambda;
  if (f.tau) c.lime.tau = *f.tau;
  if (f.edit_mode) c.lime.edit_mode = steering::edit_mode_from_string(*f.edit_mode);
  if (f.target) c.lime.target = steering::target_policy_from_string(*f.target);
  if (f.lrp_epsilon) c.lime.lrp_epsilon = *f.lrp_epsilon;
  if (f.final_evaluation) c.lime.final_evaluation = *f.final_evaluation;
  c.reconcile();
  c.validate();
  return c;
}

struct Session {
  RunConfig config;
  Corpus corpus;
  std::unique_ptr<model::FrozenModel> model;
};

Session open_session(const CommonFlags& f) {
  Session s;
  s.config = resolve(f);
  s.corpus = generate_corpus(s.config.corpus);
  auto log = [&](const std::string& line) {
    if (!f.quiet) std::cerr << line << '\n';
  };
  s.model = std::make_unique<model::FrozenModel>(obtain_model(s.config, s.corpus, f.model_dir, log));
  return s;
}

class TraceWriter {
 public:
  explicit TraceWriter(const std::string& path) {
    if (path.empty()) return;
    out_.open(path, std::ios::app);
    if (!out_) throw IoError("cannot open trace file " + path);
  }
  std::function<void(const steering::StepReport&)> hook() {
    if (!out_.is_open()) return {};
    return [this](const steering::StepReport& r) { out_ << steering::to_json(r).dump() << '\n'; };
  }

 private:
  std::ofstream out_;
};

ExperimentOptions experiment_options(const CommonFlags& f, TraceWriter& trace, std::size_t default_tokens) {
  ExperimentOptions o;
  o.max_examples = f.max_examples;
  o.max_tokens = f.max_tokens.value_or(default_tokens);
  o.on_step = trace.hook();
  if (!f.quiet) {
    o.on_progress = [](std::size_t done, std::size_t total) {
      if (done % 25 == 0 || done == total) std::cerr << "\r" << done << "/" << total << std::flush;
      if (done == total) std::cerr << '\n';
    };
  }
  return o;
}

void print_rows(const BenchmarkReport& r) {
  for (const auto& a : r.aggregates) {
    std::cout << a.arm << '\t' << a.split << "\tn=" << a.count;
    if (a.split == "caption") {
      std::cout << "\tCHAIR_S=" << a.chair_s << "\tCHAIR_I=" << a.chair_i << "\trecall=" << a.chair_recall;
    } else {
      std::cout << "\tacc=" << a.accuracy << "\tf1=" << a.f1 << "\tyes=" << a.yes_ratio
                << "\tMR=" << a.mean_modality_reliance << "\tSG=" << a.mean_spatial_grounding;
    }
    std::cout << '\n';
  }
}

std::vector<Split> parse_splits(const std::vector<std::string>& names) {
  std::vector<Split> out;
  for (const auto& n : names) out.push_back(split_from_string(n));
  return out;
}

const QaExample& pick_example(const Corpus& corpus, const std::string& split, std::size_t index) {
  const auto& list = corpus.splits.at(split_from_string(split));
  if (index >= list.size()) throw ConfigError("example index out of range for split " + split);
  return list[index];
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Relevance-guided key/value steering on a toy multimodal transformer"};
  app.require_subcommand(1);
  CommonFlags f;

  auto* train = app.add_subcommand("train", "Train (or load from cache) the toy model");
  add_common(train, f);

  std::string split = "adversarial";
  std::size_t index = 0;
  bool caption = false, vanilla_only = false;
  auto* decode = app.add_subcommand("decode", "Decode one probing question or listing");
  add_common(decode, f);
  decode->add_option("--split", split, "Split of the probing example")->capture_default_str();
  decode->add_option("--index", index, "Example index within the split (scene index with --caption)");
  decode->add_flag("--caption", caption, "Decode an object listing instead");
  decode->add_flag("--vanilla", vanilla_only, "Plain greedy decoding");

  std::vector<std::string> splits{"random", "popular", "adversarial"};
  auto* pope = app.add_subcommand("pope", "Yes/no probing benchmark, vanilla and LIME arms");
  add_common(pope, f);
  pope->add_option("--splits", splits, "Splits to run")->delimiter(',');
  pope->add_flag("--vanilla", vanilla_only, "Only the vanilla arm");

  auto* cap = app.add_subcommand("caption", "Object listing benchmark, vanilla and LIME arms");
  add_common(cap, f);
  cap->add_flag("--vanilla", vanilla_only, "Only the vanilla arm");

  std::vector<std::string> modes{"keys-only", "values-only", "both"};
  std::vector<double> lambdas{0.01, 0.1, 1.0, 1e6};
  auto* ablate = app.add_subcommand("ablate", "Edit-mode by lambda grid on the probing benchmark");
  add_common(ablate, f);
  ablate->add_option("--splits", splits, "Splits to run")->delimiter(',');
  ablate->add_option("--edit-modes", modes, "Edit modes")->delimiter(',');
  ablate->add_option("--lambdas", lambdas, "Lambda values")->delimiter(',');

  std::size_t cell_pixels = 16;
  auto* heat = app.add_subcommand("heatmap", "Relevance heatmaps for one probing example");
  add_common(heat, f);
  heat->add_option("--split", split, "Split of the probing example")->capture_default_str();
  heat->add_option("--index", index, "Example index within the split");
  heat->add_option("--cell-pixels", cell_pixels, "Pixels per scene cell")->capture_default_str();

  std::vector<std::size_t> step_counts{1, 3, 7, 15};
  std::size_t prompts = 10;
  auto* over = app.add_subcommand("overhead", "Throughput of vanilla against LIME decoding");
  add_common(over, f);
  over->add_option("--step-counts", step_counts, "Optimizer step counts")->delimiter(',');
  over->add_option("--prompts", prompts, "Number of listing prompts")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      const auto s = open_session(f);
      std::cout << (std::filesystem::path(f.model_dir) / ("model-" + model_key(s.config) + ".limew")).string() << '\n';
      return 0;
    }

    const auto s = open_session(f);
    const auto& model = *s.model;
    TraceWriter trace(f.trace);
    std::vector<Arm> arms{Arm::vanilla()};
    if (!vanilla_only) arms.push_back(Arm::with_lime(s.config.lime));

    if (decode->parsed()) {
      model::MultimodalSequence seq;
      if (caption) {
        if (index >= s.corpus.eval_scenes.size()) throw ConfigError("scene index out of range");
        seq = model::embed_prompt(model, caption_prompt(s.corpus.eval_scenes[index]));
      } else {
        const auto& q = pick_example(s.corpus, split, index);
        seq = model::embed_prompt(model, pope_prompt(s.corpus.eval_scenes[q.scene], q.query));
        std::cout << "query object " << q.query << " label " << (q.label ? "yes" : "no") << '\n';
      }
      const std::size_t budget = f.max_tokens.value_or(caption ? 150 : 20);
      std::vector<int> tokens;
      if (vanilla_only) {
        tokens = steering::greedy_decode(model, seq, budget);
      } else {
        steering::DecodeOptions o;
        o.on_step = trace.hook();
        tokens = steering::decode(model, seq, s.config.lime, budget, o).tokens;
      }
      for (int t : tokens) std::cout << t << ' ';
      std::cout << '\n';
      return 0;
    }

    if (pope->parsed()) {
      const auto r = run_pope_experiment(model, s.corpus, parse_splits(splits), arms, experiment_options(f, trace, 20));
      write_report(r, f.out);
      print_rows(r);
      return 0;
    }

    if (cap->parsed()) {
      const auto r = run_caption_experiment(model, s.corpus, arms, experiment_options(f, trace, 150));
      write_report(r, f.out);
      print_rows(r);
      return 0;
    }

    if (ablate->parsed()) {
      AblationGrid grid;
      for (const auto& m : modes) grid.edit_modes.push_back(steering::edit_mode_from_string(m));
      grid.lambdas = lambdas;
      const auto r = run_ablation(model, s.corpus, parse_splits(splits), grid, s.config.lime,
                                  experiment_options(f, trace, 20));
      write_report(r, f.out);
      print_rows(r);
      return 0;
    }

    if (heat->parsed()) {
      const auto& q = pick_example(s.corpus, split, index);
      const Scene& scene = s.corpus.eval_scenes[q.scene];
      const auto seq = model::embed_prompt(model, pope_prompt(scene, q.query));
      std::filesystem::create_directories(f.out);
      const auto base = std::filesystem::path(f.out) / (split + "_" + std::to_string(index));
      render_heatmap(relevance::explain(model, seq, nullptr, -1, {}), seq, scene, base.string() + "_vanilla.ppm",
                     cell_pixels);
      steering::DecodeOptions o;
      o.on_step = trace.hook();
      const auto result = steering::decode(model, seq, s.config.lime, 1, o);
      const auto frames = render_optimization_frames(result.reports.front(), seq, scene, base, cell_pixels);
      std::cout << "wrote " << frames.size() + 1 << " heatmaps under " << f.out << '\n';
      return 0;
    }

    if (over->parsed()) {
      std::vector<model::MultimodalSequence> seqs;
      for (std::size_t i = 0; i < std::min(prompts, s.corpus.eval_scenes.size()); ++i) {
        seqs.push_back(model::embed_prompt(model, caption_prompt(s.corpus.eval_scenes[i])));
      }
      const auto sweep = run_overhead_sweep(model, seqs, step_counts, s.config.lime, f.max_tokens.value_or(8));
      std::filesystem::create_directories(f.out);
      std::ofstream out(std::filesystem::path(f.out) / "overhead.json");
      out << to_json(sweep).dump(2) << '\n';
      for (const auto& p : sweep) std::cout << "steps " << p.steps << "\tslowdown " << p.report.slowdown << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
