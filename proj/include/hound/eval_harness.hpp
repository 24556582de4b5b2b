#pragma once

// C-way K-shot episodes, accuracy / macro-F1 and multi-run aggregation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "hound/errors.hpp"
#include "hound/prompting.hpp"
#include "hound/rng.hpp"
#include "hound/tag_data.hpp"

namespace hound {

struct Episode {
  std::vector<ClassId> classes;  // ascending
  std::vector<std::pair<NodeId, ClassId>> support;
  std::vector<std::pair<NodeId, ClassId>> query;       // ascending node id
  std::vector<std::pair<NodeId, ClassId>> validation;  // empty unless requested

  bool operator==(const Episode&) const = default;
};

// Uniform class subset, K uniform support nodes per class, every remaining
// node of those classes in the query set. With `with_validation`, another K
// per class is drawn from an independent stream and withheld from the query.
inline Episode sample_episode(const TextAttributedGraph& g, std::size_t ways, std::size_t shots,
                              std::uint64_t seed, bool with_validation = false) {
  if (ways == 0) throw ValidationError("episode needs at least one class");
  std::map<ClassId, std::vector<NodeId>> members;
  for (NodeId i = 0; i < g.num_nodes; ++i) members[g.labels[i]].push_back(i);
  const std::size_t needed = (with_validation ? 2 * shots : shots) + 1;
  std::vector<ClassId> eligible;
  for (const auto& [c, nodes] : members)
    if (nodes.size() >= needed) eligible.push_back(c);
  if (eligible.size() < ways) {
    throw ValidationError("episode needs " + std::to_string(ways) + " classes with at least " +
                          std::to_string(needed) + " nodes each, graph has " +
                          std::to_string(eligible.size()));
  }

  Rng rng = Rng::stream(seed, "episode");
  Rng val_rng = Rng::stream(seed, "episode.validation");
  Episode ep;
  for (auto idx : rng.sample(eligible.size(), ways)) ep.classes.push_back(eligible[idx]);
  std::sort(ep.classes.begin(), ep.classes.end());

  std::set<NodeId> held;
  for (ClassId c : ep.classes) {
    const auto& nodes = members[c];
    for (auto idx : rng.sample(nodes.size(), shots)) {
      ep.support.emplace_back(nodes[idx], c);
      held.insert(nodes[idx]);
    }
  }
  if (with_validation) {
    for (ClassId c : ep.classes) {
      std::vector<NodeId> rest;
      for (NodeId n : members[c])
        if (!held.count(n)) rest.push_back(n);
      for (auto idx : val_rng.sample(rest.size(), shots)) ep.validation.emplace_back(rest[idx], c);
    }
    for (const auto& [n, c] : ep.validation) held.insert(n);
  }
  for (ClassId c : ep.classes)
    for (NodeId n : members[c])
      if (!held.count(n)) ep.query.emplace_back(n, c);
  std::sort(ep.query.begin(), ep.query.end());
  return ep;
}

struct Scores {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

// Macro-F1 averages per-class F1 over the classes present in the truths; a
// present class that is never predicted correctly contributes 0.
inline Scores evaluate(const std::vector<ClassId>& predictions, const std::vector<ClassId>& truths) {
  if (predictions.empty()) throw ValidationError("evaluate: no predictions");
  if (predictions.size() != truths.size()) {
    throw ShapeError("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                     std::to_string(truths.size()) + " truths");
  }
  std::map<ClassId, std::size_t> tp, fp, fn;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    fn[truths[i]];  // register every present class
    if (predictions[i] == truths[i]) {
      ++correct;
      ++tp[truths[i]];
    } else {
      ++fp[predictions[i]];
      ++fn[truths[i]];
    }
  }
  double f1_sum = 0.0;
  for (const auto& [c, misses] : fn) {
    const double t = static_cast<double>(tp[c]);
    const double denom = 2.0 * t + static_cast<double>(fp[c]) + static_cast<double>(misses);
    f1_sum += denom > 0.0 ? 2.0 * t / denom : 0.0;
  }
  return {static_cast<double>(correct) / static_cast<double>(truths.size()),
          f1_sum / static_cast<double>(fn.size())};
}

struct MetricsReport {
  std::vector<Scores> runs;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  double mean_f1 = 0.0;
  double std_f1 = 0.0;
};

inline std::pair<double, double> mean_and_sample_std(const std::vector<double>& xs) {
  if (xs.empty()) throw ValidationError("mean_and_sample_std: no values");
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

inline MetricsReport summarize(std::vector<Scores> runs) {
  MetricsReport r;
  std::vector<double> acc, f1;
  for (const auto& s : runs) {
    acc.push_back(s.accuracy);
    f1.push_back(s.macro_f1);
  }
  std::tie(r.mean_accuracy, r.std_accuracy) = mean_and_sample_std(acc);
  std::tie(r.mean_f1, r.std_f1) = mean_and_sample_std(f1);
  r.runs = std::move(runs);
  return r;
}

// Per-run lines `run<TAB>acc<TAB>f1`, then a `mean±std` footer; 4 decimals.
inline std::string format_report(const MetricsReport& r) {
  std::string out;
  char buf[128];
  for (std::size_t i = 0; i < r.runs.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu\t%.4f\t%.4f\n", i, r.runs[i].accuracy, r.runs[i].macro_f1);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "mean±std\t%.4f±%.4f\t%.4f±%.4f\n", r.mean_accuracy, r.std_accuracy,
                r.mean_f1, r.std_f1);
  out += buf;
  return out;
}

struct TaskConfig {
  std::size_t ways = 5;
  std::size_t shots = 0;  // 0 = zero-shot
  std::size_t num_runs = 5;
  std::uint64_t base_seed = 1;
  bool prob_average = false;  // zero-shot only: combine with the negative encoder
  std::string prompt_template = kDefaultTemplate;
  TuneConfig tune;
};

struct QueryPrediction {
  NodeId node = 0;
  ClassId truth = 0;
  Prediction prediction;
};

struct RunOutput {
  Episode episode;
  Scores scores;
  std::vector<QueryPrediction> predictions;
};

// One episode: zero-shot with the discrete template when shots == 0,
// otherwise tune a continuous prompt on the support set first.
inline RunOutput run_episode(const TextAttributedGraph& g, const TrainedModel& model,
                             const Tensor& node_embeddings, const TaskConfig& task, std::uint64_t seed) {
  RunOutput out;
  out.episode = sample_episode(g, task.ways, task.shots, seed);
  const ClassPromptSet prompts = make_class_prompts(g, out.episode.classes, task.prompt_template);
  Classifier classifier;
  if (task.shots > 0) {
    TuneConfig tc = task.tune;
    tc.seed = seed;
    const TuneResult tuned = few_shot_tune(model, node_embeddings, out.episode.support, prompts, tc);
    classifier = make_classifier(model, prompts, Mode::FewShot, &tuned.prompt);
  } else {
    classifier = make_classifier(model, prompts, Mode::ZeroShot, nullptr, task.prob_average);
  }
  std::vector<ClassId> preds, truths;
  for (const auto& [node, label] : out.episode.query) {
    QueryPrediction q{node, label, classifier.predict(node_embeddings.row_values(node))};
    preds.push_back(q.prediction.predicted);
    truths.push_back(label);
    out.predictions.push_back(std::move(q));
  }
  out.scores = evaluate(preds, truths);
  return out;
}

// Run r uses seed base_seed + r for episode sampling and prompt tuning.
inline MetricsReport run_trials(const TextAttributedGraph& g, const TrainedModel& model, const TaskConfig& task,
                                std::vector<RunOutput>* outputs = nullptr) {
  if (task.num_runs == 0) throw ValidationError("run_trials: num_runs must be at least 1");
  const Tensor embeddings = embed_nodes(model, g);
  std::vector<Scores> scores;
  for (std::size_t r = 0; r < task.num_runs; ++r) {
    RunOutput run = run_episode(g, model, embeddings, task, task.base_seed + r);
    scores.push_back(run.scores);
    if (outputs) outputs->push_back(std::move(run));
  }
  return summarize(std::move(scores));
}

// `node_id<TAB>true_label<TAB>pred_label<TAB>p_0..p_{C-1}`
inline std::string format_predictions(const std::vector<QueryPrediction>& preds) {
  std::string out;
  char buf[64];
  for (const auto& q : preds) {
    out += std::to_string(q.node) + '\t' + std::to_string(q.truth) + '\t' +
           std::to_string(q.prediction.predicted);
    for (double p : q.prediction.p) {
      std::snprintf(buf, sizeof buf, "\t%.9g", p);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

}  // namespace hound
