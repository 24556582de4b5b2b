#pragma once

// Class-description prompts, zero-shot probabilities, probability-average
// decisions and few-shot tuning of continuous prompt vectors.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hound/diff_engine.hpp"
#include "hound/encoders.hpp"
#include "hound/errors.hpp"
#include "hound/pretrain.hpp"
#include "hound/rng.hpp"
#include "hound/tag_data.hpp"
#include "hound/text_pipeline.hpp"

namespace hound {

inline constexpr const char* kDefaultTemplate = "a node of {class_name}";

struct ClassPromptSet {
  std::vector<ClassId> classes;
  std::vector<std::string> descriptions;  // one per class, same order

  std::size_t size() const { return classes.size(); }
  std::size_t index_of(ClassId c) const {
    auto it = std::find(classes.begin(), classes.end(), c);
    if (it == classes.end()) throw ValidationError("class " + std::to_string(c) + " not in prompt set");
    return static_cast<std::size_t>(it - classes.begin());
  }
};

inline std::string apply_template(const std::string& pattern, const std::string& class_name) {
  static const std::string slot = "{class_name}";
  std::string out = pattern;
  for (auto pos = out.find(slot); pos != std::string::npos; pos = out.find(slot, pos + class_name.size())) {
    out.replace(pos, slot.size(), class_name);
  }
  return out;
}

inline ClassPromptSet make_class_prompts(const TextAttributedGraph& g, const std::vector<ClassId>& classes,
                                         const std::string& pattern = kDefaultTemplate) {
  ClassPromptSet set;
  for (ClassId c : classes) {
    if (c >= g.num_classes()) throw ValidationError("class " + std::to_string(c) + " out of range");
    set.classes.push_back(c);
    set.descriptions.push_back(apply_template(pattern, g.class_names[c]));
  }
  return set;
}

// One unit row per class: encoder(D_c), or encoder([e_1..e_M, D_c]) when
// prompt vectors are given.
inline Tensor class_embeddings(const ClassPromptSet& prompts, const Vocab& vocab,
                               const TextEncoderParams& encoder, const PromptVectors* prompt = nullptr) {
  if (prompts.size() == 0) throw ValidationError("class_embeddings: no classes");
  const std::size_t m = prompt ? prompt->length() : 0;
  std::vector<TokenSeq> batch;
  for (std::size_t c = 0; c < prompts.size(); ++c) {
    const auto words = split_words(prompts.descriptions[c]);
    if (words.empty()) {
      throw ValidationError("class description " + std::to_string(c) + " has no tokens");
    }
    if (m + words.size() > encoder.config.max_len) {
      throw ValidationError("class description " + std::to_string(c) + " needs " +
                            std::to_string(m + words.size()) + " positions, max_len is " +
                            std::to_string(encoder.config.max_len));
    }
    batch.push_back(tokenize(prompts.descriptions[c], vocab, encoder.config.max_len));
  }
  return encode_with_prompt(batch, encoder, prompt);
}

// softmax_c(sim(node, g_c) / tau)
inline std::vector<double> zero_shot_probs(std::span<const double> node, const Tensor& class_embs,
                                           double tau) {
  if (class_embs.rows() < 2) throw ValidationError("zero_shot_probs: need at least 2 classes");
  if (node.size() != class_embs.cols()) {
    throw ShapeError("zero_shot_probs: node dimension " + std::to_string(node.size()) +
                     " vs class embeddings " + class_embs.shape_string());
  }
  Tensor n(1, node.size(), {node.begin(), node.end()});
  Tensor logits = scale(cosine_matrix(n, class_embs), 1.0 / tau);
  Tensor p = softmax_rows(logits);
  return {p.values().begin(), p.values().end()};
}

inline std::size_t argmax(const std::vector<double>& v) {
  // Lowest index wins ties.
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// argmax_c (p_c + 1 - p_neg_c) / 2, lowest index on ties.
inline std::size_t probability_average(const std::vector<double>& p, const std::vector<double>& p_neg) {
  if (p.size() != p_neg.size()) {
    throw ShapeError("probability_average: lengths " + std::to_string(p.size()) + " and " +
                     std::to_string(p_neg.size()));
  }
  if (p.empty()) throw ShapeError("probability_average: empty input");
  std::vector<double> score(p.size());
  for (std::size_t c = 0; c < p.size(); ++c) score[c] = (p[c] + 1.0 - p_neg[c]) / 2.0;
  return argmax(score);
}

// ---------------------------------------------------------------------------
// Few-shot prompt tuning

struct TuneConfig {
  std::size_t prompt_len = 8;
  std::size_t epochs = 50;
  double learning_rate = 0.01;
  std::uint64_t seed = 1;
};

struct TuneResult {
  PromptVectors prompt;  // best by support accuracy, latest on ties
  std::vector<double> loss_trace;      // support cross-entropy per evaluation
  std::vector<double> accuracy_trace;  // support accuracy per evaluation
  std::size_t best_epoch = 0;
};

// Mean cross-entropy of the class probabilities against the labels, plus
// support accuracy. `nodes` are fixed node embeddings, `targets` index into
// the class rows.
inline std::pair<Tensor, double> support_objective(const Tensor& nodes, const std::vector<std::size_t>& targets,
                                                   const Tensor& class_embs, double tau) {
  const std::size_t n = nodes.rows(), c = class_embs.rows();
  Tensor logits = scale(cosine_matrix(nodes, class_embs), 1.0 / tau);
  std::vector<double> onehot(n * c, 0.0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    onehot[i * c + targets[i]] = 1.0;
    std::vector<double> row = logits.row_values(i);
    if (argmax(row) == targets[i]) ++correct;
  }
  Tensor picked = matmul(mul(logits, Tensor(n, c, std::move(onehot))),
                         Tensor(c, 1, std::vector<double>(c, 1.0)));
  Tensor loss = mean_all(sub(logsumexp_rows(logits), picked));
  return {loss, static_cast<double>(correct) / static_cast<double>(n)};
}

// Tunes M prompt vectors in front of each class description; every model
// parameter stays frozen.
inline TuneResult few_shot_tune(const TrainedModel& model, const Tensor& node_embeddings,
                                const std::vector<std::pair<NodeId, ClassId>>& support,
                                const ClassPromptSet& prompts, const TuneConfig& config) {
  if (support.empty()) throw ValidationError("few_shot_tune: empty support set");
  if (config.prompt_len == 0) throw ValidationError("few_shot_tune: prompt_len must be at least 1");
  std::vector<std::size_t> rows, targets;
  for (const auto& [node, label] : support) {
    rows.push_back(node);
    targets.push_back(prompts.index_of(label));
  }
  const Tensor nodes = detach(gather_rows(node_embeddings, rows));
  const double tau = model.tau();

  Rng rng = Rng::stream(config.seed, "prompt");
  PromptVectors prompt = init_prompt(config.prompt_len, model.sizes.model_dim, rng);
  ParamSet trainable;
  trainable.add("prompt.vectors", prompt.vectors);
  AdamState adam;

  TuneResult result;
  double best_acc = -1.0;
  for (std::size_t epoch = 0;; ++epoch) {
    const Tensor classes = class_embeddings(prompts, model.vocab, model.text, &prompt);
    auto [loss, acc] = support_objective(nodes, targets, classes, tau);
    result.loss_trace.push_back(loss.item());
    result.accuracy_trace.push_back(acc);
    if (acc >= best_acc) {
      best_acc = acc;
      result.best_epoch = epoch;
      result.prompt = {detach(prompt.vectors)};
    }
    if (epoch == config.epochs) break;
    optimizer_step(trainable, backward(loss, trainable), config.learning_rate, adam);
  }
  result.prompt.vectors = Tensor::parameter(result.prompt.vectors.rows(), result.prompt.vectors.cols(),
                                            {result.prompt.vectors.values().begin(),
                                             result.prompt.vectors.values().end()});
  return result;
}

// ---------------------------------------------------------------------------
// Prediction

struct Prediction {
  std::vector<double> p;
  std::optional<std::vector<double>> p_neg;
  ClassId predicted = 0;
};

// Class embeddings for one prompt set, computed once and reused per node.
struct Classifier {
  ClassPromptSet prompts;
  Tensor positive;
  std::optional<Tensor> negative;
  double tau = 1.0;

  Prediction predict(std::span<const double> node) const {
    Prediction out;
    out.p = zero_shot_probs(node, positive, tau);
    std::size_t idx;
    if (negative) {
      out.p_neg = zero_shot_probs(node, *negative, tau);
      idx = probability_average(out.p, *out.p_neg);
    } else {
      idx = argmax(out.p);
    }
    out.predicted = prompts.classes[idx];
    return out;
  }
};

// Few-shot: plain probabilities with the tuned prompt. Zero-shot: discrete
// template, combined with the negative encoder when prob_average is set.
inline Classifier make_classifier(const TrainedModel& model, const ClassPromptSet& prompts, Mode mode,
                                  const PromptVectors* tuned_prompt = nullptr, bool prob_average = true) {
  Classifier c;
  c.prompts = prompts;
  c.tau = model.tau();
  if (mode == Mode::FewShot) {
    if (!tuned_prompt) throw ValidationError("few-shot prediction needs a tuned prompt");
    c.positive = detach(class_embeddings(prompts, model.vocab, model.text, tuned_prompt));
    return c;
  }
  c.positive = detach(class_embeddings(prompts, model.vocab, model.text));
  if (prob_average) {
    if (model.mode != Mode::ZeroShot) {
      throw ValidationError("probability-average needs a zero-shot pre-trained model; the negative "
                            "encoder of a few-shot model is untrained");
    }
    c.negative = detach(class_embeddings(prompts, model.vocab, model.negtext, &model.negprompt));
  }
  return c;
}

inline Prediction predict(const TrainedModel& model, const Tensor& node_embeddings, NodeId node,
                          const ClassPromptSet& prompts, Mode mode,
                          const PromptVectors* tuned_prompt = nullptr, bool prob_average = true) {
  if (node >= node_embeddings.rows()) throw ValidationError("node " + std::to_string(node) + " out of range");
  return make_classifier(model, prompts, mode, tuned_prompt, prob_average)
      .predict(node_embeddings.row_values(node));
}

}  // namespace hound
