// SPDX-License-Identifier: Apache-2.0
#include "lime/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <string>

#include "lime/errors.hpp"

namespace lime::metrics {

std::vector<double> min_max_normalize(const std::vector<double>& phi) {
  if (phi.empty()) return {};
  const auto [lo, hi] = std::minmax_element(phi.begin(), phi.end());
  const double range = *hi - *lo;
  std::vector<double> out(phi.size(), 0.0);
  if (range > 0.0) {
    for (std::size_t i = 0; i < phi.size(); ++i) out[i] = (phi[i] - *lo) / range;
  }
  return out;
}

std::optional<double> spatial_grounding(const std::vector<double>& phi, const model::MultimodalSequence& seq) {
  double in_region = 0.0, modality = 0.0;
  for (auto i : seq.modality_indices) {
    if (i >= phi.size()) throw ContractError("spatial_grounding: modality index out of range");
    modality += phi[i];
  }
  for (auto g : seq.grounding_indices) {
    if (g >= phi.size()) throw ContractError("spatial_grounding: grounding index out of range");
    in_region += phi[g];
  }
  if (modality == 0.0) return std::nullopt;
  return in_region / modality;
}

std::optional<double> modality_reliance(double phi_m, double phi_t) {
  const double den = phi_m + phi_t;
  if (den == 0.0) return std::nullopt;
  return phi_m / den;
}

GroundingScores grounding_scores(const std::vector<double>& raw_phi, const model::MultimodalSequence& seq) {
  const auto phi = min_max_normalize(raw_phi);
  GroundingScores s;
  if (!seq.grounding_indices.empty()) s.spatial_grounding = spatial_grounding(phi, seq);
  double m = 0.0, t = 0.0;
  for (auto i : seq.modality_indices) m += phi.at(i);
  for (auto j : seq.text_indices) t += phi.at(j);
  s.modality_reliance = modality_reliance(m, t);
  return s;
}

const char* to_string(Answer a) {
  switch (a) {
    case Answer::yes: return "yes";
    case Answer::no: return "no";
    case Answer::unparseable: return "unparseable";
  }
  return "unparseable";
}

Answer parse_answer(const std::vector<int>& tokens) {
  for (int t : tokens) {
    if (t == model::Vocabulary::yes) return Answer::yes;
    if (t == model::Vocabulary::no) return Answer::no;
  }
  return Answer::unparseable;
}

PopeScore pope_score(const std::vector<Answer>& predictions, const std::vector<bool>& labels) {
  if (predictions.size() != labels.size()) throw ContractError("pope_score: predictions and labels differ in length");
  PopeScore s;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predictions[i] == Answer::unparseable) ++s.unparseable;
    const bool said_yes = predictions[i] == Answer::yes;
    if (said_yes && labels[i]) ++s.counts.true_positive;
    else if (said_yes) ++s.counts.false_positive;
    else if (labels[i]) ++s.counts.false_negative;
    else ++s.counts.true_negative;
  }
  const auto& c = s.counts;
  const double total = static_cast<double>(c.total());
  if (total > 0) {
    s.accuracy = static_cast<double>(c.true_positive + c.true_negative) / total;
    s.yes_ratio = static_cast<double>(c.true_positive + c.false_positive) / total;
  }
  if (c.true_positive + c.false_positive > 0) {
    s.precision = static_cast<double>(c.true_positive) / static_cast<double>(c.true_positive + c.false_positive);
  }
  if (c.true_positive + c.false_negative > 0) {
    s.recall = static_cast<double>(c.true_positive) / static_cast<double>(c.true_positive + c.false_negative);
  }
  if (s.precision + s.recall > 0.0) s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

std::vector<int> extract_mentions(const std::vector<int>& tokens) {
  std::vector<int> out;
  for (int t : tokens) {
    if (model::Vocabulary::is_object(t) && std::find(out.begin(), out.end(), t) == out.end()) out.push_back(t);
  }
  return out;
}

ChairScore chair_score(const std::vector<std::vector<int>>& mentions, const std::vector<std::vector<int>>& ground_truth) {
  if (mentions.size() != ground_truth.size()) throw ContractError("chair_score: captions and ground truth differ in length");
  ChairScore s;
  s.captions = mentions.size();
  for (std::size_t i = 0; i < mentions.size(); ++i) {
    const std::set<int> said(mentions[i].begin(), mentions[i].end());
    const std::set<int> truth(ground_truth[i].begin(), ground_truth[i].end());
    std::size_t bad = 0;
    for (int m : said) bad += !truth.contains(m);
    for (int g : truth) s.recalled += said.contains(g);
    s.mentions += said.size();
    s.hallucinated_mentions += bad;
    s.hallucinated_captions += bad > 0;
    s.ground_truth += truth.size();
  }
  if (s.captions) s.chair_s = static_cast<double>(s.hallucinated_captions) / static_cast<double>(s.captions);
  if (s.mentions) s.chair_i = static_cast<double>(s.hallucinated_mentions) / static_cast<double>(s.mentions);
  s.recall = s.ground_truth ? static_cast<double>(s.recalled) / static_cast<double>(s.ground_truth) : 1.0;
  return s;
}

OverheadReport overhead_report(const std::vector<TimedRun>& vanilla, const std::vector<TimedRun>& lime) {
  if (vanilla.size() != lime.size() || vanilla.empty()) {
    throw ContractError("overhead_report: both arms need the same, non-zero number of runs");
  }
  OverheadReport r;
  double vt = 0.0, vs = 0.0, lt = 0.0, ls = 0.0;
  for (std::size_t i = 0; i < vanilla.size(); ++i) {
    for (const auto* run : {&vanilla[i], &lime[i]}) {
      if (!(run->seconds > 0.0) || run->tokens == 0) throw DomainError("overhead_report: zero-duration or empty run");
    }
    const double v = static_cast<double>(vanilla[i].tokens) / vanilla[i].seconds;
    const double l = static_cast<double>(lime[i].tokens) / lime[i].seconds;
    r.per_run_slowdown.push_back(v / l);
    vt += static_cast<double>(vanilla[i].tokens);
    vs += vanilla[i].seconds;
    lt += static_cast<double>(lime[i].tokens);
    ls += lime[i].seconds;
  }
  r.vanilla_tokens_per_second = vt / vs;
  r.lime_tokens_per_second = lt / ls;
  r.slowdown = r.vanilla_tokens_per_second / r.lime_tokens_per_second;
  r.peak_memory_bytes = peak_memory_bytes();
  return r;
}

std::size_t peak_memory_bytes() {
  std::ifstream status("/proc/self/status");
  std::string line;
  while (std::getline(status, line)) {
    if (line.rfind("VmHWM:", 0) == 0) return static_cast<std::size_t>(std::stoull(line.substr(6))) * 1024;
  }
  return 0;
}

nlohmann::json to_json(const PopeScore& s) {
  return {{"accuracy", s.accuracy},
          {"precision", s.precision},
          {"recall", s.recall},
          {"f1", s.f1},
          {"yes_ratio", s.yes_ratio},
          {"tp", s.counts.true_positive},
          {"fp", s.counts.false_positive},
          {"tn", s.counts.true_negative},
          {"fn", s.counts.false_negative},
          {"unparseable", s.unparseable}};
}

nlohmann::json to_json(const ChairScore& s) {
  return {{"chair_s", s.chair_s},
          {"chair_i", s.chair_i},
          {"recall", s.recall},
          {"captions", s.captions},
          {"hallucinated_captions", s.hallucinated_captions},
          {"mentions", s.mentions},
          {"hallucinated_mentions", s.hallucinated_mentions},
          {"ground_truth", s.ground_truth},
          {"recalled", s.recalled}};
}

nlohmann::json to_json(const OverheadReport& r) {
  return {{"vanilla_tokens_per_second", r.vanilla_tokens_per_second},
          {"lime_tokens_per_second", r.lime_tokens_per_second},
          {"slowdown", r.slowdown},
          {"per_run_slowdown", r.per_run_slowdown},
          {"peak_memory_bytes", r.peak_memory_bytes}};
}

}  // namespace lime::metrics
