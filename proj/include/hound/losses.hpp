#pragma once

// Training objectives over batches of node and text embeddings.
//
// Every similarity is cosine, divided by the shared temperature tau. The
// softmax-style denominators run over j != i only, so the contrastive terms
// can go negative.

#include <optional>
#include <string>
#include <vector>

#include "hound/diff_engine.hpp"
#include "hound/errors.hpp"

namespace hound {

enum class Mode { FewShot, ZeroShot };

inline std::string to_string(Mode m) { return m == Mode::FewShot ? "fewshot" : "zeroshot"; }

inline Mode parse_mode(const std::string& s) {
  if (s == "fewshot") return Mode::FewShot;
  if (s == "zeroshot") return Mode::ZeroShot;
  throw ConfigError("mode must be fewshot or zeroshot, got '" + s + "'");
}

struct LossWeights {
  double alpha = 1.0;
  double beta = 1.0;
  // Ablation override; when empty gamma follows the mode (0 few-shot, 1 zero-shot).
  std::optional<double> gamma;
  double margin = 0.2;
  double tau_init = 0.07;
};

inline double effective_gamma(const LossWeights& w, Mode mode) {
  if (w.gamma) return *w.gamma;
  return mode == Mode::ZeroShot ? 1.0 : 0.0;
}

// tau = exp(log_tau), always positive.
inline Tensor temperature(const Tensor& log_tau) { return exp(log_tau); }

namespace detail {

inline void require_pairs(const Tensor& a, const Tensor& b, const char* what, std::size_t min_rows) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": batches not aligned " + a.shape_string() + " vs " +
                     b.shape_string());
  }
  if (a.rows() < min_rows) {
    throw ValidationError(std::string(what) + ": batch needs at least " +
                          std::to_string(min_rows) + " rows, got " + std::to_string(a.rows()));
  }
}

inline std::vector<bool> off_diagonal(std::size_t b) {
  std::vector<bool> mask(b * b, true);
  for (std::size_t i = 0; i < b; ++i) mask[i * b + i] = false;
  return mask;
}

// log sum_{j != i} exp(sim(n_i, t_j) / tau), one row per i.
inline Tensor negative_log_partition(const Tensor& nodes, const Tensor& texts, const Tensor& tau) {
  return logsumexp_rows(div_scalar(cosine_matrix(nodes, texts), tau), off_diagonal(nodes.rows()));
}

}  // namespace detail

inline Tensor contrastive_loss(const Tensor& nodes, const Tensor& texts, const Tensor& tau) {
  detail::require_pairs(nodes, texts, "contrastive_loss", 2);
  Tensor positive = div_scalar(cosine_rows(nodes, texts), tau);
  return mean_all(sub(detail::negative_log_partition(nodes, texts, tau), positive));
}

// Mean over views of the contrastive loss with perturbed node embeddings.
inline Tensor node_perturbation_loss(const std::vector<Tensor>& perturbed_nodes, const Tensor& texts,
                                     const Tensor& tau) {
  if (perturbed_nodes.empty()) throw ValidationError("node_perturbation_loss: no views");
  std::vector<Tensor> per_view;
  per_view.reserve(perturbed_nodes.size());
  for (const auto& view : perturbed_nodes) per_view.push_back(contrastive_loss(view, texts, tau));
  return mean_all(concat_rows(per_view));
}

// matched[i] holds the K_i retrieved text vectors for node i as a [K_i, d]
// constant tensor.
inline Tensor text_matching_loss(const Tensor& nodes, const std::vector<Tensor>& matched,
                                 const Tensor& texts, const Tensor& tau) {
  detail::require_pairs(nodes, texts, "text_matching_loss", 2);
  if (matched.size() != nodes.rows()) {
    throw ShapeError("text_matching_loss: " + std::to_string(matched.size()) +
                     " match lists for " + std::to_string(nodes.rows()) + " nodes");
  }
  std::vector<Tensor> numerators;
  numerators.reserve(matched.size());
  for (std::size_t i = 0; i < matched.size(); ++i) {
    if (!matched[i].defined() || matched[i].rows() == 0) {
      throw ValidationError("text_matching_loss: node " + std::to_string(i) + " has no matches");
    }
    Tensor sims = cosine_matrix(slice_rows(nodes, i, 1), matched[i]);
    numerators.push_back(logsumexp_rows(div_scalar(sims, tau)));
  }
  return mean_all(sub(detail::negative_log_partition(nodes, texts, tau), concat_rows(numerators)));
}

// (1/|B|) sum_i (1/(|B|-1)) sum_{j != i} max(0, m + sim(n_i, neg_i) - sim(n_i, neg_j)).
inline Tensor margin_loss(const Tensor& nodes, const Tensor& neg_texts, double margin) {
  detail::require_pairs(nodes, neg_texts, "margin_loss", 2);
  const std::size_t b = nodes.rows();
  Tensor own = cosine_rows(nodes, neg_texts);  // [B,1]
  Tensor own_wide = matmul(own, Tensor(1, b, std::vector<double>(b, 1.0)));
  Tensor others = cosine_matrix(nodes, neg_texts);
  Tensor hinge = relu(add_const(sub(own_wide, others), margin));
  std::vector<double> mask(b * b, 1.0);
  for (std::size_t i = 0; i < b; ++i) mask[i * b + i] = 0.0;
  Tensor masked = mul(hinge, Tensor(b, b, std::move(mask)));
  return scale(sum_all(masked), 1.0 / static_cast<double>(b * (b - 1)));
}

// Hinge arguments of margin_loss, row-major over (i, j != i). Used to keep
// gradient checks off the kinks.
inline std::vector<double> margin_hinge_arguments(const Tensor& nodes, const Tensor& neg_texts,
                                                  double margin) {
  detail::require_pairs(nodes, neg_texts, "margin_hinge_arguments", 2);
  const std::size_t b = nodes.rows();
  Tensor own = cosine_rows(nodes, neg_texts);
  Tensor others = cosine_matrix(nodes, neg_texts);
  std::vector<double> out;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j)
      if (i != j) out.push_back(margin + own(i, 0) - others(i, j));
  return out;
}

// -(1/|B|) sum_i ||t_i - neg_i||_2
inline Tensor semantics_opposite_loss(const Tensor& texts, const Tensor& neg_texts) {
  detail::require_pairs(texts, neg_texts, "semantics_opposite_loss", 1);
  return scale(mean_all(row_norm(sub(texts, neg_texts))), -1.0);
}

struct LossComponents {
  Tensor contrastive;
  Tensor node_perturbation;
  Tensor text_matching;
  Tensor margin;
  Tensor semantics_opposite;
};

// L_CL + alpha L_NP + beta L_TM + gamma (L_ML + L_SO). Terms with zero weight
// or no value are left out of the graph.
inline Tensor total_loss(const LossComponents& c, const LossWeights& w, Mode mode) {
  if (!c.contrastive.defined()) throw ValidationError("total_loss: contrastive term missing");
  Tensor total = c.contrastive;
  auto accumulate = [&total](const Tensor& term, double weight) {
    if (weight == 0.0 || !term.defined()) return;
    total = add(total, weight == 1.0 ? term : scale(term, weight));
  };
  accumulate(c.node_perturbation, w.alpha);
  accumulate(c.text_matching, w.beta);
  const double gamma = effective_gamma(w, mode);
  accumulate(c.margin, gamma);
  accumulate(c.semantics_opposite, gamma);
  return total;
}

}  // namespace hound
