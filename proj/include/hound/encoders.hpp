#pragma once

// Graph encoder (normalized-propagation GCN), transformer text encoder and
// the prompted variant that prepends learnable vectors at the embedding level.

#include <cmath>
#include <string>
#include <vector>

#include "hound/diff_engine.hpp"
#include "hound/errors.hpp"
#include "hound/rng.hpp"
#include "hound/tag_data.hpp"
#include "hound/text_pipeline.hpp"

namespace hound {

namespace detail {

inline Tensor uniform_param(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  std::vector<double> v(rows * cols);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::parameter(rows, cols, std::move(v));
}

// Weight of shape [fan_in, fan_out] with bound 1/sqrt(fan_in).
inline Tensor linear_weight(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return uniform_param(fan_in, fan_out, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

inline Tensor constant_param(std::size_t rows, std::size_t cols, double value) {
  return Tensor::parameter(rows, cols, std::vector<double>(rows * cols, value));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Graph encoder

struct GraphEncoderConfig {
  std::size_t num_layers = 2;
  std::size_t input_dim = 32;
  std::size_t dim = 32;
};

struct GraphEncoderParams {
  GraphEncoderConfig config;
  std::vector<Tensor> weights;  // layer l: [in_l, dim]

  void add_to(ParamSet& ps, const std::string& prefix) const {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      ps.add(prefix + "layer" + std::to_string(l) + ".weight", weights[l]);
    }
  }
};

inline GraphEncoderParams init_graph_encoder(const GraphEncoderConfig& c, Rng& rng) {
  if (c.num_layers == 0) throw ValidationError("graph encoder needs at least one layer");
  GraphEncoderParams p{c, {}};
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    p.weights.push_back(detail::linear_weight(l == 0 ? c.input_dim : c.dim, c.dim, rng));
  }
  return p;
}

// D^-1/2 (A + I) D^-1/2 with A the symmetric expansion of the unordered
// edge list. Column indices are sorted within each row.
inline SparseMatrix normalized_adjacency(std::size_t num_nodes, const std::vector<Edge>& edges) {
  std::vector<std::vector<std::size_t>> nbrs(num_nodes);
  for (std::size_t i = 0; i < num_nodes; ++i) nbrs[i].push_back(i);
  for (const auto& [u, v] : edges) {
    if (u >= num_nodes || v >= num_nodes) {
      throw ValidationError("edge (" + std::to_string(u) + "," + std::to_string(v) +
                            ") out of range for " + std::to_string(num_nodes) + " nodes");
    }
    if (u == v) continue;
    nbrs[u].push_back(v);
    nbrs[v].push_back(u);
  }
  SparseMatrix s;
  s.rows = s.cols = num_nodes;
  s.row_start.assign(num_nodes + 1, 0);
  std::vector<double> inv_sqrt_deg(num_nodes);
  for (std::size_t i = 0; i < num_nodes; ++i) {
    std::sort(nbrs[i].begin(), nbrs[i].end());
    nbrs[i].erase(std::unique(nbrs[i].begin(), nbrs[i].end()), nbrs[i].end());
    inv_sqrt_deg[i] = 1.0 / std::sqrt(static_cast<double>(nbrs[i].size()));
  }
  for (std::size_t i = 0; i < num_nodes; ++i) {
    for (std::size_t j : nbrs[i]) {
      s.col_index.push_back(j);
      s.value.push_back(inv_sqrt_deg[i] * inv_sqrt_deg[j]);
    }
    s.row_start[i + 1] = s.col_index.size();
  }
  return s;
}

// Frozen input features: mean of the node's token rows from a seeded random
// table. UNK tokens use the UNK row.
inline Tensor node_features(const TextAttributedGraph& g, const Vocab& vocab, std::size_t dim,
                            std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "features");
  std::vector<double> table(vocab.size() * dim);
  for (double& x : table) x = rng.uniform(-1.0, 1.0);
  std::vector<double> out(g.num_nodes * dim, 0.0);
  for (NodeId i = 0; i < g.num_nodes; ++i) {
    auto words = split_words(g.texts[i]);
    for (const auto& w : words) {
      const TokenId t = vocab.id(w);
      for (std::size_t j = 0; j < dim; ++j) out[i * dim + j] += table[t * dim + j];
    }
    if (!words.empty()) {
      for (std::size_t j = 0; j < dim; ++j) out[i * dim + j] /= static_cast<double>(words.size());
    }
  }
  return Tensor(g.num_nodes, dim, std::move(out));
}

// H <- relu(Â H W) between layers, no activation after the last, then
// row-normalize.
inline Tensor encode_nodes(const SparseMatrix& adjacency, const Tensor& features,
                           const GraphEncoderParams& p) {
  if (features.rows() != adjacency.rows) {
    throw ShapeError("encode_nodes: " + std::to_string(features.rows()) +
                     " feature rows for " + std::to_string(adjacency.rows) + " nodes");
  }
  Tensor h = features;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    h = spmm(adjacency, matmul(h, p.weights[l]));
    if (l + 1 < p.weights.size()) h = relu(h);
  }
  return normalize_rows(h);
}

inline Tensor encode_nodes(const TextAttributedGraph& g, const Tensor& features,
                           const GraphEncoderParams& p) {
  return encode_nodes(normalized_adjacency(g.num_nodes, g.edges), features, p);
}

// ---------------------------------------------------------------------------
// Text encoder

struct TextEncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t max_len = 32;
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t model_dim = 32;
  std::size_t ff_dim = 64;
  std::size_t out_dim = 32;
};

struct TransformerLayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;
};

struct TextEncoderParams {
  TextEncoderConfig config;
  Tensor token_embedding;     // [vocab, model_dim]
  Tensor position_embedding;  // [max_len, model_dim]
  std::vector<TransformerLayerParams> layers;
  Tensor final_gain, final_bias;
  Tensor projection;  // [model_dim, out_dim]

  void add_to(ParamSet& ps, const std::string& prefix) const {
    ps.add(prefix + "token_embedding", token_embedding);
    ps.add(prefix + "position_embedding", position_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& L = layers[l];
      const std::string q = prefix + "layer" + std::to_string(l) + ".";
      ps.add(q + "ln1.gain", L.ln1_gain);
      ps.add(q + "ln1.bias", L.ln1_bias);
      ps.add(q + "attn.wq", L.wq);
      ps.add(q + "attn.bq", L.bq);
      ps.add(q + "attn.wk", L.wk);
      ps.add(q + "attn.bk", L.bk);
      ps.add(q + "attn.wv", L.wv);
      ps.add(q + "attn.bv", L.bv);
      ps.add(q + "attn.wo", L.wo);
      ps.add(q + "attn.bo", L.bo);
      ps.add(q + "ln2.gain", L.ln2_gain);
      ps.add(q + "ln2.bias", L.ln2_bias);
      ps.add(q + "ff.w1", L.w1);
      ps.add(q + "ff.b1", L.b1);
      ps.add(q + "ff.w2", L.w2);
      ps.add(q + "ff.b2", L.b2);
    }
    ps.add(prefix + "final_ln.gain", final_gain);
    ps.add(prefix + "final_ln.bias", final_bias);
    ps.add(prefix + "projection", projection);
  }
};

inline TextEncoderParams init_text_encoder(const TextEncoderConfig& c, Rng& rng) {
  if (c.vocab_size < 2) throw ValidationError("text encoder vocab_size must be at least 2");
  if (c.num_heads == 0 || c.model_dim % c.num_heads != 0) {
    throw ValidationError("model_dim " + std::to_string(c.model_dim) +
                          " is not divisible by num_heads " + std::to_string(c.num_heads));
  }
  if (c.max_len == 0) throw ValidationError("max_len must be at least 1");
  const double emb_bound = 1.0 / std::sqrt(static_cast<double>(c.model_dim));
  const std::size_t d = c.model_dim;
  TextEncoderParams p;
  p.config = c;
  p.token_embedding = detail::uniform_param(c.vocab_size, d, emb_bound, rng);
  p.position_embedding = detail::uniform_param(c.max_len, d, emb_bound, rng);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    TransformerLayerParams L;
    L.ln1_gain = detail::constant_param(1, d, 1.0);
    L.ln1_bias = detail::constant_param(1, d, 0.0);
    L.wq = detail::linear_weight(d, d, rng);
    L.bq = detail::uniform_param(1, d, emb_bound, rng);
    L.wk = detail::linear_weight(d, d, rng);
    L.bk = detail::uniform_param(1, d, emb_bound, rng);
    L.wv = detail::linear_weight(d, d, rng);
    L.bv = detail::uniform_param(1, d, emb_bound, rng);
    L.wo = detail::linear_weight(d, d, rng);
    L.bo = detail::uniform_param(1, d, emb_bound, rng);
    L.ln2_gain = detail::constant_param(1, d, 1.0);
    L.ln2_bias = detail::constant_param(1, d, 0.0);
    L.w1 = detail::linear_weight(d, c.ff_dim, rng);
    L.b1 = detail::uniform_param(1, c.ff_dim, emb_bound, rng);
    L.w2 = detail::linear_weight(c.ff_dim, d, rng);
    L.b2 = detail::uniform_param(1, d, 1.0 / std::sqrt(static_cast<double>(c.ff_dim)), rng);
    p.layers.push_back(std::move(L));
  }
  p.final_gain = detail::constant_param(1, d, 1.0);
  p.final_bias = detail::constant_param(1, d, 0.0);
  p.projection = detail::linear_weight(d, c.out_dim, rng);
  return p;
}

// Learnable vectors prepended to a token sequence ([M, model_dim]).
struct PromptVectors {
  Tensor vectors;

  std::size_t length() const { return vectors.defined() ? vectors.rows() : 0; }
};

inline PromptVectors init_prompt(std::size_t length, std::size_t model_dim, Rng& rng) {
  if (length == 0) throw ValidationError("prompt length must be at least 1");
  return {detail::uniform_param(length, model_dim,
                                1.0 / std::sqrt(static_cast<double>(model_dim)), rng)};
}

namespace detail {

inline Tensor transformer_layer(const Tensor& x, const TransformerLayerParams& L,
                                const std::vector<std::size_t>& offsets,
                                const std::vector<std::size_t>& lengths, std::size_t heads) {
  const std::size_t d = x.cols();
  const std::size_t dh = d / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor a = layer_norm(x, L.ln1_gain, L.ln1_bias);
  Tensor q = add_row(matmul(a, L.wq), L.bq);
  Tensor k = add_row(matmul(a, L.wk), L.bk);
  Tensor v = add_row(matmul(a, L.wv), L.bv);

  // Attention stays inside each sequence; only real positions are present,
  // so padding never enters as a key.
  std::vector<Tensor> per_seq;
  per_seq.reserve(offsets.size());
  for (std::size_t s = 0; s < offsets.size(); ++s) {
    Tensor qs = slice_rows(q, offsets[s], lengths[s]);
    Tensor ks = slice_rows(k, offsets[s], lengths[s]);
    Tensor vs = slice_rows(v, offsets[s], lengths[s]);
    std::vector<Tensor> head_out;
    head_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor qh = slice_cols(qs, h * dh, dh);
      Tensor kh = slice_cols(ks, h * dh, dh);
      Tensor vh = slice_cols(vs, h * dh, dh);
      Tensor att = softmax_rows(scale(matmul(qh, transpose(kh)), scale_factor));
      head_out.push_back(matmul(att, vh));
    }
    per_seq.push_back(heads == 1 ? head_out.front() : concat_cols(head_out));
  }
  Tensor attended = per_seq.size() == 1 ? per_seq.front() : concat_rows(per_seq);
  Tensor h1 = add(x, add_row(matmul(attended, L.wo), L.bo));

  Tensor b = layer_norm(h1, L.ln2_gain, L.ln2_bias);
  Tensor ff = add_row(matmul(relu(add_row(matmul(b, L.w1), L.b1)), L.w2), L.b2);
  return add(h1, ff);
}

}  // namespace detail

// Shared encoding path: optional prompt rows at positions 0..M-1, then the
// real tokens, then pre-norm transformer layers, masked mean pooling over the
// real positions, projection and row normalization.
inline Tensor encode_with_prompt(const std::vector<TokenSeq>& batch, const TextEncoderParams& p,
                                 const PromptVectors* prompt) {
  if (batch.empty()) throw ShapeError("text encoder: empty batch");
  const std::size_t m = prompt ? prompt->length() : 0;
  if (prompt && m > 0 && prompt->vectors.cols() != p.config.model_dim) {
    throw ShapeError("prompt width " + std::to_string(prompt->vectors.cols()) +
                     " differs from model_dim " + std::to_string(p.config.model_dim));
  }
  std::vector<std::size_t> offsets, lengths;
  std::vector<Tensor> rows;
  std::size_t offset = 0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto& seq = batch[s];
    const std::size_t n = seq.length();
    if (n == 0) throw ValidationError("text encoder: row " + std::to_string(s) + " has no tokens");
    if (m + n > p.config.max_len) {
      throw ValidationError("text encoder: row " + std::to_string(s) + " needs " +
                            std::to_string(m + n) + " positions, max_len is " +
                            std::to_string(p.config.max_len));
    }
    std::vector<std::size_t> ids(seq.ids.begin(), seq.ids.begin() + static_cast<std::ptrdiff_t>(n));
    Tensor tokens = gather_rows(p.token_embedding, ids);
    Tensor seq_in = m > 0 ? concat_rows({prompt->vectors, tokens}) : tokens;
    rows.push_back(add(seq_in, slice_rows(p.position_embedding, 0, m + n)));
    offsets.push_back(offset);
    lengths.push_back(m + n);
    offset += m + n;
  }
  Tensor x = rows.size() == 1 ? rows.front() : concat_rows(rows);
  for (const auto& layer : p.layers) {
    x = detail::transformer_layer(x, layer, offsets, lengths, p.config.num_heads);
  }
  x = layer_norm(x, p.final_gain, p.final_bias);
  std::vector<Tensor> pooled;
  pooled.reserve(batch.size());
  for (std::size_t s = 0; s < batch.size(); ++s) {
    pooled.push_back(mean_rows(slice_rows(x, offsets[s], lengths[s])));
  }
  Tensor out = pooled.size() == 1 ? pooled.front() : concat_rows(pooled);
  return normalize_rows(matmul(out, p.projection));
}

inline Tensor encode_texts(const std::vector<TokenSeq>& batch, const TextEncoderParams& p) {
  return encode_with_prompt(batch, p, nullptr);
}

inline Tensor encode_negative_texts(const std::vector<TokenSeq>& batch,
                                    const TextEncoderParams& negative_encoder,
                                    const PromptVectors& negative_prompt) {
  return encode_with_prompt(batch, negative_encoder, &negative_prompt);
}

}  // namespace hound
