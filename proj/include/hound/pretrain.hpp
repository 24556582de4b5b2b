#pragma once

// Joint pre-training of the graph encoder, the text encoder and (in
// zero-shot mode) the negative text encoder with its learnable prompt.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "hound/augmentation.hpp"
#include "hound/diff_engine.hpp"
#include "hound/encoders.hpp"
#include "hound/errors.hpp"
#include "hound/losses.hpp"
#include "hound/rng.hpp"
#include "hound/tag_data.hpp"
#include "hound/text_pipeline.hpp"

namespace hound {

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t step = 0;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
};

// One bias-corrected adaptive-moment update, applied in parameter-name order:
//   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
//   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
inline void optimizer_step(ParamSet& params, const Gradients& grads, double learning_rate,
                           AdamState& state) {
  for (const auto& [name, t] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ShapeError("optimizer_step: no gradient for " + name);
    if (it->second.size() != t.size()) {
      throw ShapeError("optimizer_step: gradient for " + name + " has " +
                       std::to_string(it->second.size()) + " values, parameter has " +
                       std::to_string(t.size()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (auto& [name, param] : params) {
    const auto& g = grads.at(name);
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    auto& p = param.mutable_values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Model

struct EncoderSizes {
  std::size_t vocab_size = 1000;  // upper bound; the built vocabulary may be smaller
  std::size_t max_len = 32;
  std::size_t graph_layers = 2;
  std::size_t feature_dim = 32;
  std::size_t dim = 32;
  std::size_t text_layers = 2;
  std::size_t heads = 2;
  std::size_t model_dim = 32;
  std::size_t ff_dim = 64;
  std::size_t neg_prompt_len = 8;
};

struct PretrainConfig {
  Mode mode = Mode::ZeroShot;
  std::size_t steps = 500;
  std::size_t batch_size = 16;
  double learning_rate = 2e-4;
  LossWeights weights;
  PerturbConfig perturb;
  std::size_t num_matches = 1;
  std::size_t bank_capacity = 4096;
  std::uint64_t seed = 1;
  EncoderSizes sizes;
};

inline void validate_config(const PretrainConfig& c) {
  if (c.batch_size < 2) throw ValidationError("batch_size must be at least 2");
  if (c.steps == 0) throw ValidationError("steps must be at least 1");
  if (!(c.learning_rate > 0.0)) throw ValidationError("learning_rate must be positive");
  if (c.num_matches == 0) throw ValidationError("num_matches must be at least 1");
  if (c.bank_capacity == 0) throw ValidationError("bank_capacity must be positive");
  if (!(c.weights.tau_init > 0.0)) throw ValidationError("tau_init must be positive");
  if (c.weights.alpha < 0.0 || c.weights.beta < 0.0 || c.weights.margin < 0.0) {
    throw ValidationError("alpha, beta and margin must be non-negative");
  }
  if (c.sizes.neg_prompt_len == 0) throw ValidationError("neg_prompt_len must be at least 1");
  if (c.sizes.neg_prompt_len >= c.sizes.max_len) {
    throw ValidationError("neg_prompt_len must be smaller than max_len");
  }
  validate_config(c.perturb);
}

struct StepMetrics {
  std::size_t step = 0;
  double contrastive = 0.0;
  double node_perturbation = 0.0;
  double text_matching = 0.0;
  double margin = 0.0;
  double semantics_opposite = 0.0;
  double total = 0.0;
};

// `step<TAB>L_CL<TAB>L_NP<TAB>L_TM<TAB>L_ML<TAB>L_SO<TAB>total`, 9 significant digits.
inline std::string format_metrics(const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu\t%.8e\t%.8e\t%.8e\t%.8e\t%.8e\t%.8e", m.step, m.contrastive,
                m.node_perturbation, m.text_matching, m.margin, m.semantics_opposite, m.total);
  return buf;
}

inline constexpr const char* kGraphPrefix = "graph.";
inline constexpr const char* kTextPrefix = "text.";
inline constexpr const char* kNegTextPrefix = "negtext.";
inline constexpr const char* kNegPromptPrefix = "negprompt.";
inline constexpr const char* kTemperatureName = "temperature.log_tau";

struct TrainedModel {
  Mode mode = Mode::ZeroShot;
  EncoderSizes sizes;
  std::uint64_t feature_seed = 0;
  Vocab vocab;
  GraphEncoderParams graph;
  TextEncoderParams text;
  TextEncoderParams negtext;
  PromptVectors negprompt;
  Tensor log_tau;
  ParamSet params;
  std::vector<StepMetrics> trace;

  double tau() const { return std::exp(log_tau.item()); }

  // Parameters of the negative branch only.
  ParamSet negative_params() const { return params.select({kNegTextPrefix, kNegPromptPrefix}); }
  // Everything except the negative branch.
  ParamSet positive_params() const {
    return params.select({kGraphPrefix, kTextPrefix, "temperature."});
  }
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights from the "init" stream;
// the negative encoder is an independent draw.
inline TrainedModel init_params(const PretrainConfig& config, const Vocab& vocab, std::uint64_t seed) {
  TrainedModel m;
  m.mode = config.mode;
  m.sizes = config.sizes;
  m.feature_seed = seed;
  m.vocab = vocab;
  Rng rng = Rng::stream(seed, "init");
  const auto& s = config.sizes;
  m.graph = init_graph_encoder({s.graph_layers, s.feature_dim, s.dim}, rng);
  const TextEncoderConfig tc{vocab.size(), s.max_len, s.text_layers, s.heads,
                             s.model_dim, s.ff_dim, s.dim};
  m.text = init_text_encoder(tc, rng);
  m.negtext = init_text_encoder(tc, rng);
  m.negprompt = init_prompt(s.neg_prompt_len, s.model_dim, rng);
  m.log_tau = Tensor::parameter(1, 1, {std::log(config.weights.tau_init)});
  m.graph.add_to(m.params, kGraphPrefix);
  m.text.add_to(m.params, kTextPrefix);
  m.negtext.add_to(m.params, kNegTextPrefix);
  m.params.add(std::string(kNegPromptPrefix) + "vectors", m.negprompt.vectors);
  m.params.add(kTemperatureName, m.log_tau);
  return m;
}

inline std::vector<TokenSeq> select_rows(const std::vector<TokenSeq>& all,
                                         const std::vector<std::size_t>& ids) {
  std::vector<TokenSeq> out;
  out.reserve(ids.size());
  for (auto i : ids) out.push_back(all[i]);
  return out;
}

inline Tensor embed_nodes(const TrainedModel& model, const TextAttributedGraph& g) {
  const Tensor features = node_features(g, model.vocab, model.sizes.feature_dim, model.feature_seed);
  return detach(encode_nodes(g, features, model.graph));
}

using StepCallback = std::function<void(const StepMetrics&)>;

inline TrainedModel pretrain(const TextAttributedGraph& graph, const PretrainConfig& config,
                             const StepCallback& on_step = {}, std::ostream* log = nullptr) {
  validate_config(config);
  require_valid(graph);
  if (config.batch_size > graph.num_nodes) {
    throw ValidationError("batch_size " + std::to_string(config.batch_size) + " exceeds " +
                          std::to_string(graph.num_nodes) + " nodes");
  }
  const Vocab vocab = build_vocab(graph.texts, config.sizes.vocab_size);
  TrainedModel model = init_params(config, vocab, config.seed);

  const double gamma = effective_gamma(config.weights, config.mode);
  const bool use_perturbation = config.weights.alpha != 0.0;
  const bool use_matching = config.weights.beta != 0.0;
  const bool use_negation = gamma != 0.0;

  ParamSet active = use_negation ? model.params : model.positive_params();
  AdamState adam;

  const SparseMatrix adjacency = normalized_adjacency(graph.num_nodes, graph.edges);
  const Tensor features = node_features(graph, vocab, config.sizes.feature_dim, model.feature_seed);
  const auto tokens = batch_texts(graph.texts, vocab, config.sizes.max_len);
  const auto neg_tokens =
      batch_texts(graph.texts, vocab, config.sizes.max_len - config.sizes.neg_prompt_len);

  Rng batch_rng = Rng::stream(config.seed, "batch");
  Rng perturb_rng = Rng::stream(config.seed, "perturb");
  TextBank bank(config.bank_capacity);

  for (std::size_t step = 1; step <= config.steps; ++step) {
    const auto ids = batch_rng.sample(graph.num_nodes, config.batch_size);
    const Tensor tau = temperature(model.log_tau);

    const Tensor nodes = gather_rows(encode_nodes(adjacency, features, model.graph), ids);
    const Tensor texts = encode_texts(select_rows(tokens, ids), model.text);

    LossComponents c;
    c.contrastive = contrastive_loss(nodes, texts, tau);

    if (use_perturbation) {
      std::vector<Tensor> views;
      for (std::size_t v = 0; v < config.perturb.num_views; ++v) {
        const auto edges = perturb(graph, config.perturb, perturb_rng.next());
        views.push_back(gather_rows(
            encode_nodes(normalized_adjacency(graph.num_nodes, edges), features, model.graph), ids));
      }
      c.node_perturbation = node_perturbation_loss(views, texts, tau);
    }

    if (use_matching) {
      bank.push(ids, detach(texts));
      try {
        std::vector<Tensor> matched;
        matched.reserve(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) {
          const auto hits = bank.topk(texts.row_values(i), config.num_matches, ids[i]);
          std::vector<double> flat;
          for (const auto& h : hits) flat.insert(flat.end(), h.vector.begin(), h.vector.end());
          matched.emplace_back(hits.size(), texts.cols(), std::move(flat));
        }
        c.text_matching = text_matching_loss(nodes, matched, texts, tau);
      } catch (const EmptyBankError&) {
        if (log) *log << "step " << step << ": text bank has no candidates, text matching skipped\n";
      }
    }

    if (use_negation) {
      const Tensor neg =
          encode_negative_texts(select_rows(neg_tokens, ids), model.negtext, model.negprompt);
      c.margin = margin_loss(nodes, neg, config.weights.margin);
      c.semantics_opposite = semantics_opposite_loss(texts, neg);
    }

    const Tensor total = total_loss(c, config.weights, config.mode);
    StepMetrics m;
    m.step = step;
    auto value = [](const Tensor& t) { return t.defined() ? t.item() : 0.0; };
    m.contrastive = value(c.contrastive);
    m.node_perturbation = value(c.node_perturbation);
    m.text_matching = value(c.text_matching);
    m.margin = value(c.margin);
    m.semantics_opposite = value(c.semantics_opposite);
    m.total = total.item();
    if (!std::isfinite(m.total)) {
      throw NumericError("non-finite loss at step " + std::to_string(step));
    }

    const Gradients grads = backward(total, active);
    optimizer_step(active, grads, config.learning_rate, adam);
    model.trace.push_back(m);
    if (on_step) on_step(m);
  }
  for (const auto& [name, t] : model.params) {
    if (!all_finite(t.values())) throw NumericError("parameter " + name + " became non-finite");
  }
  return model;
}

// Writes the parameter checkpoint and the vocabulary next to it.
inline void save_model(const TrainedModel& m, const std::string& checkpoint_path,
                       const std::string& vocab_path) {
  save_checkpoint(m.params, checkpoint_path);
  save_vocab(m.vocab, vocab_path);
}

// Rebuilds the architecture from `config` and the vocabulary, then loads
// parameter values from the checkpoint.
inline TrainedModel load_model(const PretrainConfig& config, const std::string& checkpoint_path,
                               const std::string& vocab_path) {
  const Vocab vocab = load_vocab(vocab_path);
  TrainedModel m = init_params(config, vocab, config.seed);
  load_checkpoint_into(m.params, checkpoint_path);
  return m;
}

}  // namespace hound
