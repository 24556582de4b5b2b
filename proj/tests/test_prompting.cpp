#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "hound/prompting.hpp"
#include "oracle_fixtures.hpp"
#include "test_support.hpp"

using namespace hound;
using namespace hound::test::oracle;

namespace {

PretrainConfig tiny_config(Mode mode) {
  PretrainConfig c;
  c.mode = mode;
  c.steps = 3;
  c.batch_size = 8;
  c.sizes.vocab_size = 200;
  c.sizes.max_len = 24;
  c.sizes.feature_dim = 8;
  c.sizes.dim = 8;
  c.sizes.text_layers = 1;
  c.sizes.heads = 2;
  c.sizes.model_dim = 8;
  c.sizes.ff_dim = 16;
  c.sizes.neg_prompt_len = 3;
  return c;
}

TextAttributedGraph toy_graph() {
  SynthConfig s;
  s.num_nodes = 40;
  s.num_classes = 3;
  s.intra_edge_prob = 0.3;
  s.inter_edge_prob = 0.01;
  return synth_tag(s, 11);
}

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

TEST(Template, AppliesClassName) {
  EXPECT_EQ(apply_template(kDefaultTemplate, "theory"), "a node of theory");
  EXPECT_EQ(apply_template("{class_name} or {class_name}", "x"), "x or x");
  auto g = toy_graph();
  auto p = make_class_prompts(g, {2, 0});
  EXPECT_EQ(p.classes, (std::vector<ClassId>{2, 0}));
  EXPECT_EQ(p.descriptions[0], "a node of " + g.class_names[2]);
  EXPECT_EQ(p.index_of(0), 1u);
  EXPECT_THROW(p.index_of(1), ValidationError);
  EXPECT_THROW(make_class_prompts(g, {3}), ValidationError);
}

// ---------------------------------------------------------------------------

TEST(ClassEmbeddings, NoPromptEqualsPlainEncoder) {
  auto g = toy_graph();
  auto m = init_params(tiny_config(Mode::ZeroShot), build_vocab(g.texts, 200), 2);
  auto prompts = make_class_prompts(g, {0, 1, 2});
  Tensor a = class_embeddings(prompts, m.vocab, m.text);
  Tensor b = encode_texts(batch_texts(prompts.descriptions, m.vocab, m.sizes.max_len), m.text);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.values()[i], b.values()[i]);
}

TEST(ClassEmbeddings, IdenticalDescriptionsIdenticalRows) {
  TextAttributedGraph g{2, {}, {"x y", "y z"}, {0, 1}, {"same", "same"}};
  hound::Rng rng(3);
  auto vocab = build_vocab(g.texts, 50);
  auto enc = init_text_encoder({vocab.size(), 8, 1, 2, 8, 8, 4}, rng);
  auto prompt = init_prompt(2, 8, rng);
  Tensor e = class_embeddings(make_class_prompts(g, {0, 1}), vocab, enc, &prompt);
  for (std::size_t j = 0; j < e.cols(); ++j) EXPECT_EQ(e(0, j), e(1, j));
}

TEST(ClassEmbeddings, OnePromptVectorMatchesOracle) {
  // "alpha" is the most frequent word, so it gets token id 2.
  TextAttributedGraph g{2, {}, {"alpha alpha", "alpha beta"}, {0, 1}, {"alpha", "beta"}};
  auto vocab = build_vocab(g.texts, 4);
  ASSERT_EQ(vocab.id("alpha"), 2u);
  auto enc = oracle_text_encoder();
  PromptVectors prompt{Tensor::parameter(1, 3, hound::test::fill_values(21, 1, 3))};
  ClassPromptSet set{{0}, {"alpha"}};
  Tensor e = class_embeddings(set, vocab, enc, &prompt);
  EXPECT_NEAR(e(0, 0), kTextPrompt1[0], 1e-12);
  EXPECT_NEAR(e(0, 1), kTextPrompt1[1], 1e-12);
  Tensor plain = class_embeddings(set, vocab, enc);
  EXPECT_NEAR(plain(0, 0), kTextSingle[0], 1e-12);
}

TEST(ClassEmbeddings, OverflowAndEmptyDescriptions) {
  TextAttributedGraph g{1, {}, {"a b c d"}, {0}, {"a"}};
  hound::Rng rng(4);
  auto vocab = build_vocab(g.texts, 50);
  auto enc = init_text_encoder({vocab.size(), 4, 1, 1, 4, 4, 2}, rng);
  auto prompt = init_prompt(2, 4, rng);
  EXPECT_NO_THROW(class_embeddings(ClassPromptSet{{0}, {"a b"}}, vocab, enc, &prompt));
  EXPECT_THROW(class_embeddings(ClassPromptSet{{0}, {"a b c"}}, vocab, enc, &prompt), ValidationError);
  EXPECT_THROW(class_embeddings(ClassPromptSet{{0}, {"  "}}, vocab, enc), ValidationError);
  EXPECT_THROW(class_embeddings(ClassPromptSet{}, vocab, enc), ValidationError);
}

// ---------------------------------------------------------------------------

TEST(ZeroShotProbs, SimilaritiesOneAndZero) {
  Tensor classes(2, 2, {1, 0, 0, 1});
  std::vector<double> node{1, 0};
  auto p = zero_shot_probs(node, classes, 1.0);
  EXPECT_NEAR(p[0], std::exp(1.0) / (std::exp(1.0) + 1.0), 1e-15);
  EXPECT_NEAR(p[0], 0.7311, 5e-5);
  EXPECT_NEAR(p[1], 0.2689, 5e-5);
  EXPECT_GT(zero_shot_probs(node, classes, 0.01)[0], 1 - 1e-10);
}

TEST(ZeroShotProbs, IdenticalClassesAreUniform) {
  Tensor classes(4, 2, {0.6, 0.8, 0.6, 0.8, 0.6, 0.8, 0.6, 0.8});
  std::vector<double> node{0, 1};
  for (double x : zero_shot_probs(node, classes, 0.07)) EXPECT_NEAR(x, 0.25, 1e-15);
}

TEST(ZeroShotProbs, SumsToOneAndPermutesWithClasses) {
  hound::Rng rng(5);
  for (int k = 0; k < 20; ++k) {
    Tensor classes = hound::test::unit_rows(5, 4, rng);
    Tensor node = hound::test::unit_rows(1, 4, rng);
    auto p = zero_shot_probs(node.row_values(0), classes, 0.1);
    EXPECT_NEAR(sum(p), 1.0, 1e-9);
    const std::vector<std::size_t> perm = {3, 1, 4, 0, 2};
    std::vector<double> rows;
    for (auto r : perm) {
      auto v = classes.row_values(r);
      rows.insert(rows.end(), v.begin(), v.end());
    }
    auto q = zero_shot_probs(node.row_values(0), Tensor(5, 4, rows), 0.1);
    for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(q[c], p[perm[c]], 1e-15);
  }
}

TEST(ZeroShotProbs, Errors) {
  std::vector<double> node{1, 0};
  EXPECT_THROW(zero_shot_probs(node, Tensor(1, 2, {1, 0}), 1.0), ValidationError);
  EXPECT_THROW(zero_shot_probs(node, Tensor(2, 3, {1, 0, 0, 0, 1, 0}), 1.0), ShapeError);
}

// ---------------------------------------------------------------------------

TEST(ProbabilityAverage, Examples) {
  EXPECT_EQ(probability_average({0.9, 0.1}, {0.1, 0.9}), 0u);
  EXPECT_EQ(probability_average({0.5, 0.5}, {0.5, 0.5}), 0u);
  EXPECT_EQ(probability_average({0.6, 0.4}, {0.7, 0.3}), 1u);
  EXPECT_THROW(probability_average({0.5, 0.5}, {1.0}), ShapeError);
}

TEST(ProbabilityAverage, InvariantToCommonShift) {
  hound::Rng rng(6);
  for (int k = 0; k < 200; ++k) {
    std::vector<double> p(4), q(4);
    for (auto& x : p) x = rng.uniform();
    for (auto& x : q) x = rng.uniform();
    const double shift = rng.uniform(-3.0, 3.0);
    auto ps = p, qs = q;
    for (auto& x : ps) x += shift;
    for (auto& x : qs) x += shift;
    EXPECT_EQ(probability_average(p, q), probability_average(ps, qs));
  }
}

// ---------------------------------------------------------------------------

TEST(FewShotTune, FrozenModelAndDecreasingLoss) {
  auto g = toy_graph();
  auto model = pretrain(g, tiny_config(Mode::FewShot));
  const auto before = checksum(model.params);
  const Tensor nodes = embed_nodes(model, g);
  std::vector<std::pair<NodeId, ClassId>> support;
  for (NodeId v = 0; v < g.num_nodes && support.size() < 9; ++v) support.emplace_back(v, g.labels[v]);
  TuneConfig tc;
  auto r = few_shot_tune(model, nodes, support, make_class_prompts(g, {0, 1, 2}), tc);
  EXPECT_EQ(checksum(model.params), before);
  ASSERT_EQ(r.loss_trace.size(), tc.epochs + 1);
  EXPECT_LT(r.loss_trace.back(), r.loss_trace.front());
  EXPECT_EQ(r.prompt.vectors.rows(), tc.prompt_len);
  EXPECT_TRUE(r.prompt.vectors.requires_grad());
  // Best accuracy, latest epoch on ties.
  const double best = *std::max_element(r.accuracy_trace.begin(), r.accuracy_trace.end());
  EXPECT_EQ(r.accuracy_trace[r.best_epoch], best);
  for (std::size_t e = r.best_epoch + 1; e < r.accuracy_trace.size(); ++e) EXPECT_LT(r.accuracy_trace[e], best);
}

TEST(FewShotTune, Deterministic) {
  auto g = toy_graph();
  auto model = init_params(tiny_config(Mode::FewShot), build_vocab(g.texts, 200), 3);
  const Tensor nodes = embed_nodes(model, g);
  std::vector<std::pair<NodeId, ClassId>> support = {{0, g.labels[0]}, {5, g.labels[5]}, {9, g.labels[9]}};
  TuneConfig tc;
  tc.epochs = 5;
  auto a = few_shot_tune(model, nodes, support, make_class_prompts(g, {0, 1, 2}), tc);
  auto b = few_shot_tune(model, nodes, support, make_class_prompts(g, {0, 1, 2}), tc);
  EXPECT_EQ(a.loss_trace, b.loss_trace);
}

TEST(FewShotTune, Errors) {
  auto g = toy_graph();
  auto model = init_params(tiny_config(Mode::FewShot), build_vocab(g.texts, 200), 3);
  const Tensor nodes = embed_nodes(model, g);
  auto prompts = make_class_prompts(g, {0, 1, 2});
  EXPECT_THROW(few_shot_tune(model, nodes, {}, prompts, TuneConfig{}), ValidationError);
  TuneConfig zero;
  zero.prompt_len = 0;
  EXPECT_THROW(few_shot_tune(model, nodes, {{0, g.labels[0]}}, prompts, zero), ValidationError);
}

TEST(SupportObjective, MatchesCrossEntropyByHand) {
  Tensor nodes(2, 2, {1, 0, 0, 1});
  Tensor classes(2, 2, {1, 0, 0.6, 0.8});
  auto [loss, acc] = support_objective(nodes, {0, 0}, classes, 0.5);
  const double l0 = -std::log(std::exp(2.0) / (std::exp(2.0) + std::exp(1.2)));
  const double l1 = -std::log(std::exp(0.0) / (std::exp(0.0) + std::exp(1.6)));
  EXPECT_NEAR(loss.item(), (l0 + l1) / 2, 1e-14);
  EXPECT_EQ(acc, 0.5);
}

// ---------------------------------------------------------------------------

TEST(Predict, FewShotUsesArgmaxWithoutNegative) {
  auto g = toy_graph();
  auto model = init_params(tiny_config(Mode::FewShot), build_vocab(g.texts, 200), 3);
  const Tensor nodes = embed_nodes(model, g);
  auto prompts = make_class_prompts(g, {0, 1, 2});
  hound::Rng rng(7);
  auto prompt = init_prompt(4, model.sizes.model_dim, rng);
  for (NodeId v = 0; v < 10; ++v) {
    auto p = predict(model, nodes, v, prompts, Mode::FewShot, &prompt);
    EXPECT_FALSE(p.p_neg.has_value());
    EXPECT_EQ(p.predicted, prompts.classes[argmax(p.p)]);
    EXPECT_NEAR(sum(p.p), 1.0, 1e-9);
  }
  EXPECT_THROW(predict(model, nodes, 0, prompts, Mode::FewShot), ValidationError);
  EXPECT_THROW(predict(model, nodes, 40, prompts, Mode::FewShot, &prompt), ValidationError);
}

TEST(Predict, ZeroShotAppliesProbabilityAverage) {
  auto g = toy_graph();
  auto model = init_params(tiny_config(Mode::ZeroShot), build_vocab(g.texts, 200), 3);
  const Tensor nodes = embed_nodes(model, g);
  auto prompts = make_class_prompts(g, {2, 0, 1});
  for (NodeId v = 0; v < 10; ++v) {
    auto p = predict(model, nodes, v, prompts, Mode::ZeroShot);
    ASSERT_TRUE(p.p_neg.has_value());
    EXPECT_NEAR(sum(*p.p_neg), 1.0, 1e-9);
    EXPECT_EQ(p.predicted, prompts.classes[probability_average(p.p, *p.p_neg)]);
    auto plain = predict(model, nodes, v, prompts, Mode::ZeroShot, nullptr, false);
    EXPECT_FALSE(plain.p_neg.has_value());
    EXPECT_EQ(plain.p, p.p);
  }
}

TEST(Predict, ProbabilityAverageRejectsFewShotModel) {
  auto g = toy_graph();
  auto model = init_params(tiny_config(Mode::FewShot), build_vocab(g.texts, 200), 3);
  const Tensor nodes = embed_nodes(model, g);
  EXPECT_THROW(predict(model, nodes, 0, make_class_prompts(g, {0, 1}), Mode::ZeroShot, nullptr, true),
               ValidationError);
}

TEST(Predict, HandFixedTwoClassChain) {
  // Node [0.8, 0.6]: positive sims 0.96 and 1.0, negative sims 0.8 and -0.6.
  Classifier c;
  c.prompts = {{4, 7}, {"a", "b"}};
  c.positive = Tensor(2, 2, {0.6, 0.8, 0.8, 0.6});
  c.negative = Tensor(2, 2, {1, 0, 0, -1});
  c.tau = 0.5;
  std::vector<double> node{0.8, 0.6};
  const double s0 = 0.6 * 0.8 + 0.8 * 0.6, s1 = 0.8 * 0.8 + 0.6 * 0.6;
  const double n0 = 0.8, n1 = -0.6;
  const double p0 = 1.0 / (1.0 + std::exp((s1 - s0) / 0.5));
  const double q0 = 1.0 / (1.0 + std::exp((n1 - n0) / 0.5));
  auto pred = c.predict(node);
  EXPECT_NEAR(pred.p[0], p0, 1e-14);
  EXPECT_NEAR((*pred.p_neg)[0], q0, 1e-14);
  const double score0 = (p0 + 1 - q0) / 2, score1 = ((1 - p0) + 1 - (1 - q0)) / 2;
  EXPECT_EQ(pred.predicted, score0 >= score1 ? 4u : 7u);
  EXPECT_EQ(pred.predicted, 7u);
}
