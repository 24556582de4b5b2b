#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "hound/pretrain.hpp"
#include "test_support.hpp"

using namespace hound;

namespace {

// Small model so each run stays well under a second.
PretrainConfig small_config(Mode mode, std::size_t steps) {
  PretrainConfig c;
  c.mode = mode;
  c.steps = steps;
  c.batch_size = 8;
  c.learning_rate = 1e-3;
  c.sizes.vocab_size = 200;
  c.sizes.max_len = 12;
  c.sizes.graph_layers = 2;
  c.sizes.feature_dim = 8;
  c.sizes.dim = 8;
  c.sizes.text_layers = 1;
  c.sizes.heads = 2;
  c.sizes.model_dim = 8;
  c.sizes.ff_dim = 16;
  c.sizes.neg_prompt_len = 3;
  c.bank_capacity = 64;
  return c;
}

TextAttributedGraph small_graph(std::uint64_t seed = 3) {
  SynthConfig s;
  s.num_nodes = 60;
  s.num_classes = 3;
  s.intra_edge_prob = 0.2;
  s.inter_edge_prob = 0.01;
  return synth_tag(s, seed);
}

std::vector<std::vector<double>> snapshot(const ParamSet& ps) {
  std::vector<std::vector<double>> out;
  for (const auto& [name, t] : ps) out.emplace_back(t.values().begin(), t.values().end());
  return out;
}

}  // namespace

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamSet ps;
  ps.add("p", Tensor::parameter(1, 1, {1.0}));
  AdamState st;
  optimizer_step(ps, {{"p", {1.0}}}, 0.1, st);
  EXPECT_NEAR(ps.at("p").item(), 0.9, 1e-8);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ParamSet ps;
  ps.add("a", Tensor::parameter(1, 3, {0.5, -2.0, 3.0}));
  AdamState st;
  for (int k = 0; k < 3; ++k) optimizer_step(ps, {{"a", {0.0, 0.0, 0.0}}}, 0.1, st);
  const auto a = ps.at("a").values();
  EXPECT_EQ(std::vector<double>(a.begin(), a.end()), (std::vector<double>{0.5, -2.0, 3.0}));
}

TEST(Adam, SecondStepByHand) {
  ParamSet ps;
  ps.add("p", Tensor::parameter(1, 1, {1.0}));
  AdamState st;
  optimizer_step(ps, {{"p", {1.0}}}, 0.1, st);
  optimizer_step(ps, {{"p", {-2.0}}}, 0.1, st);
  const double m = 0.9 * 0.1 + 0.1 * -2.0;
  const double v = 0.999 * 0.001 + 0.001 * 4.0;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
  const double want = (1.0 - 0.1 * 1.0 / (1.0 + 1e-8)) - 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
  EXPECT_NEAR(ps.at("p").item(), want, 1e-15);
}

TEST(Adam, ShapeMismatch) {
  ParamSet ps;
  ps.add("p", Tensor::parameter(1, 2, {1.0, 2.0}));
  AdamState st;
  EXPECT_THROW(optimizer_step(ps, {{"p", {1.0}}}, 0.1, st), ShapeError);
  EXPECT_THROW(optimizer_step(ps, {{"q", {1.0, 1.0}}}, 0.1, st), ShapeError);
}

TEST(Adam, IdenticalRunsIdenticalState) {
  auto run = [] {
    ParamSet ps;
    ps.add("p", Tensor::parameter(1, 2, {1.0, 2.0}));
    AdamState st;
    for (int k = 0; k < 5; ++k) optimizer_step(ps, {{"p", {0.3 * k, -0.1}}}, 0.01, st);
    const auto p = ps.at("p").values();
    return std::make_pair(std::vector<double>(p.begin(), p.end()), st.second_moment.at("p"));
  };
  EXPECT_EQ(run(), run());
}

// ---------------------------------------------------------------------------

TEST(InitParams, DeterministicPerSeed) {
  auto g = small_graph();
  auto c = small_config(Mode::ZeroShot, 1);
  auto v = build_vocab(g.texts, c.sizes.vocab_size);
  EXPECT_EQ(snapshot(init_params(c, v, 4).params), snapshot(init_params(c, v, 4).params));
  EXPECT_NE(snapshot(init_params(c, v, 4).params), snapshot(init_params(c, v, 5).params));
}

TEST(InitParams, NegativeEncoderIsIndependentDraw) {
  auto g = small_graph();
  auto c = small_config(Mode::ZeroShot, 1);
  auto m = init_params(c, build_vocab(g.texts, 200), 4);
  const auto a = m.text.token_embedding.values(), b = m.negtext.token_embedding.values();
  EXPECT_FALSE(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  EXPECT_NEAR(m.tau(), 0.07, 1e-15);
}

TEST(InitParams, InitialEmbeddingsFiniteAndNonZero) {
  auto g = small_graph();
  auto c = small_config(Mode::ZeroShot, 1);
  auto m = init_params(c, build_vocab(g.texts, 200), 4);
  Tensor nodes = embed_nodes(m, g);
  Tensor texts = encode_texts(batch_texts(g.texts, m.vocab, c.sizes.max_len), m.text);
  for (const Tensor* t : {&nodes, &texts}) {
    EXPECT_TRUE(all_finite(t->values()));
    for (std::size_t r = 0; r < t->rows(); ++r) {
      double s = 0;
      for (double x : t->row_values(r)) s += x * x;
      EXPECT_GT(s, 0.0);
    }
  }
}

TEST(InitParams, WeightsWithinFanInBound) {
  auto g = small_graph();
  auto c = small_config(Mode::ZeroShot, 1);
  auto m = init_params(c, build_vocab(g.texts, 200), 4);
  const double bound = 1.0 / std::sqrt(static_cast<double>(c.sizes.feature_dim));
  for (double x : m.graph.weights[0].values()) EXPECT_LE(std::abs(x), bound);
}

// ---------------------------------------------------------------------------

TEST(Pretrain, TraceLengthAndFiniteness) {
  auto m = pretrain(small_graph(), small_config(Mode::ZeroShot, 6));
  ASSERT_EQ(m.trace.size(), 6u);
  for (std::size_t i = 0; i < m.trace.size(); ++i) {
    EXPECT_EQ(m.trace[i].step, i + 1);
    EXPECT_TRUE(std::isfinite(m.trace[i].total));
  }
  for (const auto& [name, t] : m.params) EXPECT_TRUE(all_finite(t.values())) << name;
}

TEST(Pretrain, BitIdenticalReruns) {
  auto g = small_graph();
  auto a = pretrain(g, small_config(Mode::ZeroShot, 5));
  auto b = pretrain(g, small_config(Mode::ZeroShot, 5));
  for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_EQ(format_metrics(a.trace[i]), format_metrics(b.trace[i]));
  EXPECT_EQ(snapshot(a.params), snapshot(b.params));
}

TEST(Pretrain, FewShotLeavesNegativeBranchUntouched) {
  auto g = small_graph();
  auto c = small_config(Mode::FewShot, 5);
  const auto before = checksum(init_params(c, build_vocab(g.texts, c.sizes.vocab_size), c.seed).negative_params());
  auto m = pretrain(g, c);
  EXPECT_EQ(checksum(m.negative_params()), before);
  for (const auto& s : m.trace) {
    EXPECT_EQ(s.margin, 0.0);
    EXPECT_EQ(s.semantics_opposite, 0.0);
  }
}

TEST(Pretrain, ZeroShotTrainsNegativeBranch) {
  auto g = small_graph();
  auto c = small_config(Mode::ZeroShot, 3);
  const auto before = checksum(init_params(c, build_vocab(g.texts, c.sizes.vocab_size), c.seed).negative_params());
  auto m = pretrain(g, c);
  EXPECT_NE(checksum(m.negative_params()), before);
  EXPECT_NE(m.trace.back().margin, 0.0);
  EXPECT_LT(m.trace.back().semantics_opposite, 0.0);
}

TEST(Pretrain, TextMatchingActiveFromFirstStep) {
  auto m = pretrain(small_graph(), small_config(Mode::FewShot, 2));
  EXPECT_NE(m.trace[0].text_matching, 0.0);
}

// With every auxiliary weight at zero the loop reduces to a plain
// contrastive trainer on the same batches.
TEST(Pretrain, ZeroAuxiliaryWeightsMatchPlainContrastiveTrainer) {
  auto g = small_graph();
  auto c = small_config(Mode::ZeroShot, 8);
  c.weights.alpha = 0.0;
  c.weights.beta = 0.0;
  c.weights.gamma = 0.0;
  auto trained = pretrain(g, c);

  const Vocab vocab = build_vocab(g.texts, c.sizes.vocab_size);
  TrainedModel m = init_params(c, vocab, c.seed);
  ParamSet active = m.positive_params();
  AdamState adam;
  const auto adj = normalized_adjacency(g.num_nodes, g.edges);
  const Tensor features = node_features(g, vocab, c.sizes.feature_dim, c.seed);
  const auto tokens = batch_texts(g.texts, vocab, c.sizes.max_len);
  Rng batch_rng = Rng::stream(c.seed, "batch");
  for (std::size_t step = 0; step < c.steps; ++step) {
    const auto ids = batch_rng.sample(g.num_nodes, c.batch_size);
    std::vector<TokenSeq> rows;
    for (auto i : ids) rows.push_back(tokens[i]);
    Tensor loss = contrastive_loss(gather_rows(encode_nodes(adj, features, m.graph), ids), encode_texts(rows, m.text),
                                   temperature(m.log_tau));
    EXPECT_NEAR(trained.trace[step].contrastive, loss.item(), 1e-10) << "step " << step + 1;
    EXPECT_NEAR(trained.trace[step].total, loss.item(), 1e-10);
    optimizer_step(active, backward(loss, active), c.learning_rate, adam);
  }
}

TEST(Pretrain, Errors) {
  auto g = small_graph();
  auto c = small_config(Mode::FewShot, 1);
  c.batch_size = 61;
  EXPECT_THROW(pretrain(g, c), ValidationError);
  c.batch_size = 1;
  EXPECT_THROW(pretrain(g, c), ValidationError);
  c = small_config(Mode::FewShot, 0);
  EXPECT_THROW(pretrain(g, c), ValidationError);
  c = small_config(Mode::FewShot, 1);
  c.sizes.neg_prompt_len = c.sizes.max_len;
  EXPECT_THROW(pretrain(g, c), ValidationError);
}

TEST(Pretrain, NonFiniteLossAbortsWithStep) {
  auto c = small_config(Mode::FewShot, 3);
  c.learning_rate = 1e300;
  try {
    pretrain(small_graph(), c);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(Pretrain, MetricsLineFormat) {
  StepMetrics m{3, 1.0, 0.5, -0.25, 0.0, -1.5, 2.0};
  EXPECT_EQ(format_metrics(m),
            "3\t1.00000000e+00\t5.00000000e-01\t-2.50000000e-01\t0.00000000e+00\t-1.50000000e+00\t2.00000000e+00");
}

TEST(Pretrain, CheckpointRoundTrip) {
  hound::test::TempDir dir("pretrain");
  auto c = small_config(Mode::ZeroShot, 2);
  auto m = pretrain(small_graph(), c);
  const auto ckpt = (dir.path() / "model.ckpt").string();
  const auto vocab = (dir.path() / "vocab.txt").string();
  save_model(m, ckpt, vocab);
  auto back = load_model(c, ckpt, vocab);
  EXPECT_EQ(snapshot(back.params), snapshot(m.params));
  EXPECT_EQ(back.tau(), m.tau());
}

// Default sizes on the default 300-node, 5-class synthetic graph.
TEST(Pretrain, DefaultRunReducesContrastiveLoss) {
  const auto g = synth_tag(SynthConfig{}, 1);
  PretrainConfig c;
  c.mode = Mode::FewShot;
  auto m = pretrain(g, c);
  ASSERT_EQ(m.trace.size(), 500u);
  EXPECT_LT(m.trace.back().contrastive, m.trace.front().contrastive);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    first += m.trace[i].contrastive;
    last += m.trace[480 + i].contrastive;
  }
  EXPECT_LT(last, first - 20 * 0.5);
  for (const auto& s : m.trace) EXPECT_TRUE(std::isfinite(s.total));
}
