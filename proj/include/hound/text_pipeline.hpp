#pragma once

// Whitespace tokenizer, frequency-ranked vocabulary and fixed-length
// token sequences.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "hound/errors.hpp"

namespace hound {

using TokenId = std::size_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kUnkToken = "<unk>";

class Vocab {
 public:
  Vocab() : tokens_{kPadToken, kUnkToken} {}

  std::size_t size() const { return tokens_.size(); }

  TokenId id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnkId : it->second;
  }
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  const std::string& token(TokenId id) const { return tokens_.at(id); }

  // Appends a non-reserved token; no-op if already present.
  void add(const std::string& token) {
    if (ids_.emplace(token, tokens_.size()).second) tokens_.push_back(token);
  }

  // Non-reserved tokens in id order.
  std::vector<std::string> entries() const { return {tokens_.begin() + 2, tokens_.end()}; }

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) {
    std::transform(w.begin(), w.end(), w.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(std::move(w));
  }
  return out;
}

// Keeps the max_size - 2 most frequent tokens; ties go to the
// lexicographically smaller token.
inline Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t max_size) {
  if (max_size < 2) throw ValidationError("build_vocab: max_size must be at least 2");
  std::map<std::string, std::size_t> counts;
  for (const auto& text : corpus)
    for (auto& w : split_words(text)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (std::size_t i = 0; i < ranked.size() && v.size() < max_size; ++i) v.add(ranked[i].first);
  return v;
}

// One token per line; line k holds id k + 2.
inline void save_vocab(const Vocab& v, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write vocabulary " + path.string());
  for (const auto& t : v.entries()) os << t << '\n';
  if (!os) throw IoError("write failed: " + path.string());
}

inline Vocab load_vocab(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open vocabulary " + path.string());
  Vocab v;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty() || v.contains(line)) {
      throw IoError(path.string() + ":" + std::to_string(n) + ": empty or duplicate token");
    }
    v.add(line);
  }
  return v;
}

struct TokenSeq {
  std::vector<TokenId> ids;
  std::vector<bool> mask;

  std::size_t length() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  }
  bool operator==(const TokenSeq&) const = default;
};

inline TokenSeq tokenize(const std::string& text, const Vocab& vocab, std::size_t max_len) {
  if (max_len == 0) throw ValidationError("tokenize: max_len must be at least 1");
  TokenSeq seq{std::vector<TokenId>(max_len, kPadId), std::vector<bool>(max_len, false)};
  auto words = split_words(text);
  const std::size_t n = std::min(words.size(), max_len);
  for (std::size_t i = 0; i < n; ++i) {
    seq.ids[i] = vocab.id(words[i]);
    seq.mask[i] = true;
  }
  return seq;
}

inline std::vector<TokenSeq> batch_texts(const std::vector<std::string>& texts, const Vocab& vocab,
                                         std::size_t max_len) {
  if (texts.empty()) throw ValidationError("batch_texts: empty text list");
  std::vector<TokenSeq> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(tokenize(t, vocab, max_len));
  return out;
}

}  // namespace hound
