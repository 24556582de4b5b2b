#pragma once

// Finite-difference checks of every training objective on small random
// batches. Embeddings are free parameters, so the check covers the loss
// algebra independently of the encoders.

#include <cstdint>
#include <string>
#include <vector>

#include "hound/diff_engine.hpp"
#include "hound/losses.hpp"
#include "hound/rng.hpp"

namespace hound {

struct LossCheck {
  std::string name;
  GradCheckResult result;
};

struct LossCheckConfig {
  std::size_t batch = 4;
  std::size_t dim = 8;
  std::size_t views = 2;
  std::size_t matches = 2;
  double eps = 1e-5;
  LossWeights weights{0.5, 0.7, 1.0, 0.2, 0.07};
};

inline Tensor random_parameter(std::size_t rows, std::size_t cols, Rng& rng) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::parameter(rows, cols, std::move(v));
}

// Returns one entry per loss, then "composite".
inline std::vector<LossCheck> check_loss_gradients(std::uint64_t seed, const LossCheckConfig& cfg = {}) {
  Rng rng = Rng::stream(seed, "gradcheck");
  const std::size_t b = cfg.batch, d = cfg.dim;
  ParamSet ps;
  ps.add("nodes", random_parameter(b, d, rng));
  ps.add("texts", random_parameter(b, d, rng));
  ps.add("neg", random_parameter(b, d, rng));
  for (std::size_t v = 0; v < cfg.views; ++v) ps.add("view" + std::to_string(v), random_parameter(b, d, rng));
  ps.add("log_tau", Tensor::parameter(1, 1, {std::log(0.5 + rng.uniform())}));

  // Retrieved texts are bank constants: no gradient flows into them.
  std::vector<Tensor> matched;
  for (std::size_t i = 0; i < b; ++i) {
    Tensor m = random_parameter(cfg.matches, d, rng);
    matched.push_back(normalize_rows(detach(m)));
  }

  auto tau = [](const ParamSet& p) { return temperature(p.at("log_tau")); };
  auto views = [&cfg](const ParamSet& p) {
    std::vector<Tensor> out;
    for (std::size_t v = 0; v < cfg.views; ++v) out.push_back(p.at("view" + std::to_string(v)));
    return out;
  };
  const double margin = cfg.weights.margin;
  auto hinge_args = [margin](const ParamSet& p) {
    return margin_hinge_arguments(p.at("nodes"), p.at("neg"), margin);
  };
  auto components = [&](const ParamSet& p) {
    LossComponents c;
    c.contrastive = contrastive_loss(p.at("nodes"), p.at("texts"), tau(p));
    c.node_perturbation = node_perturbation_loss(views(p), p.at("texts"), tau(p));
    c.text_matching = text_matching_loss(p.at("nodes"), matched, p.at("texts"), tau(p));
    c.margin = margin_loss(p.at("nodes"), p.at("neg"), margin);
    c.semantics_opposite = semantics_opposite_loss(p.at("texts"), p.at("neg"));
    return c;
  };

  std::vector<LossCheck> out;
  auto run = [&](const std::string& name, const LossFn& fn, const KinkProbe& probe = {}) {
    out.push_back({name, grad_check(fn, ps, cfg.eps, probe)});
  };
  run("contrastive", [&](const ParamSet& p) { return components(p).contrastive; });
  run("node_perturbation", [&](const ParamSet& p) { return components(p).node_perturbation; });
  run("text_matching", [&](const ParamSet& p) { return components(p).text_matching; });
  run("margin", [&](const ParamSet& p) { return components(p).margin; }, hinge_args);
  run("semantics_opposite", [&](const ParamSet& p) { return components(p).semantics_opposite; });
  run("composite", [&](const ParamSet& p) { return total_loss(components(p), cfg.weights, Mode::ZeroShot); },
      hinge_args);
  return out;
}

}  // namespace hound
