#pragma once

// Fixtures shared with tests/oracles/encoder_oracle.py.

#include <vector>

#include "hound/encoders.hpp"
#include "test_support.hpp"

namespace hound::test::oracle {

// Values from tests/oracles/encoder_oracle.py.
inline const std::vector<double> kGcnPath = {0.9980573529216975, 0.06230184811812706, 0.9964364153720062,
                                      0.0843473183959432, 0.9941426151914255,  0.10807617989341242};
inline const std::vector<double> kTextSingle = {0.9720591002086506, 0.2347362470977772};
inline const std::vector<double> kTextPrompt1 = {0.9538518400943843, 0.3002776500983002};
inline const std::vector<double> kTextTwo = {0.9629425523327406, 0.2697065829877113};

// Tiny 1-layer, 1-head encoder with every tensor filled in registration order.
inline TextEncoderParams oracle_text_encoder() {
  hound::Rng rng(1);
  auto p = init_text_encoder({4, 4, 1, 1, 3, 4, 2}, rng);
  auto& L = p.layers[0];
  std::vector<Tensor*> order = {&p.token_embedding, &p.position_embedding, &L.ln1_gain, &L.ln1_bias,
                                &L.wq, &L.bq, &L.wk, &L.bk, &L.wv, &L.bv, &L.wo, &L.bo,
                                &L.ln2_gain, &L.ln2_bias, &L.w1, &L.b1, &L.w2, &L.b2,
                                &p.final_gain, &p.final_bias, &p.projection};
  for (std::size_t k = 0; k < order.size(); ++k) hound::test::fill(*order[k], static_cast<double>(k));
  return p;
}

inline TokenSeq seq(std::vector<TokenId> ids, std::size_t max_len) {
  TokenSeq s{std::vector<TokenId>(max_len, kPadId), std::vector<bool>(max_len, false)};
  for (std::size_t i = 0; i < ids.size(); ++i) {
    s.ids[i] = ids[i];
    s.mask[i] = true;
  }
  return s;
}

}  // namespace hound::test::oracle
