#pragma once

// Edge perturbation for alternative node views, and the bounded FIFO bank of
// detached text embeddings with exact top-K cosine retrieval.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "hound/diff_engine.hpp"
#include "hound/errors.hpp"
#include "hound/rng.hpp"
#include "hound/tag_data.hpp"

namespace hound {

struct PerturbConfig {
  double drop_prob = 0.2;
  double add_prob = 0.1;
  std::size_t num_views = 1;
};

inline void validate_config(const PerturbConfig& c) {
  if (!(c.drop_prob >= 0.0 && c.drop_prob <= 1.0)) throw ValidationError("drop_prob must lie in [0,1]");
  if (!(c.add_prob >= 0.0 && c.add_prob <= 1.0)) throw ValidationError("add_prob must lie in [0,1]");
  if (c.num_views == 0) throw ValidationError("num_views must be at least 1");
}

// Drops each edge independently with drop_prob, then adds
// round(add_prob * |E|) distinct pairs drawn uniformly from the graph's
// non-edges. Result is sorted, smaller id first.
inline std::vector<Edge> perturb(const TextAttributedGraph& g, const PerturbConfig& config,
                                 std::uint64_t seed) {
  validate_config(config);
  Rng rng(seed);
  std::set<Edge> original;
  for (const auto& [u, v] : g.edges) original.insert(std::minmax(u, v));

  std::set<Edge> out;
  for (const auto& e : original) {
    if (!rng.bernoulli(config.drop_prob)) out.insert(e);
  }

  const std::size_t n = g.num_nodes;
  const std::size_t total_pairs = n < 2 ? 0 : n * (n - 1) / 2;
  const std::size_t non_edges = total_pairs - original.size();
  std::size_t to_add = static_cast<std::size_t>(
      std::llround(config.add_prob * static_cast<double>(original.size())));
  to_add = std::min(to_add, non_edges);

  if (to_add > 0 && non_edges < 2 * to_add) {
    std::vector<Edge> candidates;
    candidates.reserve(non_edges);
    for (NodeId u = 0; u < n; ++u)
      for (NodeId v = u + 1; v < n; ++v)
        if (!original.count({u, v})) candidates.emplace_back(u, v);
    for (std::size_t idx : rng.sample(candidates.size(), to_add)) out.insert(candidates[idx]);
  } else {
    std::set<Edge> added;
    while (added.size() < to_add) {
      NodeId u = rng.index(n), v = rng.index(n);
      if (u == v) continue;
      Edge e = std::minmax(u, v);
      if (original.count(e)) continue;
      added.insert(e);
    }
    out.insert(added.begin(), added.end());
  }
  return {out.begin(), out.end()};
}

// ---------------------------------------------------------------------------

class EmptyBankError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BankMatch {
  std::size_t id = 0;
  double similarity = 0.0;
  std::vector<double> vector;
};

class TextBank {
 public:
  struct Entry {
    std::size_t id;
    std::vector<double> vector;
  };

  explicit TextBank(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ValidationError("text bank capacity must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::deque<Entry>& entries() const { return entries_; }

  // Appends detached copies of the rows in order, evicting the oldest
  // entries beyond capacity.
  void push(const std::vector<std::size_t>& ids, const Tensor& batch) {
    if (ids.size() != batch.rows()) {
      throw ShapeError("bank push: " + std::to_string(ids.size()) + " ids for " +
                       std::to_string(batch.rows()) + " rows");
    }
    if (batch.rows() == 0) return;
    if (!entries_.empty() && entries_.front().vector.size() != batch.cols()) {
      throw ShapeError("bank push: row dimension " + std::to_string(batch.cols()) +
                       " differs from stored dimension " +
                       std::to_string(entries_.front().vector.size()));
    }
    for (std::size_t r = 0; r < batch.rows(); ++r) {
      auto row = batch.row_values(r);
      double sq = 0.0;
      for (double x : row) sq += x * x;
      if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
        throw ValidationError("bank push: row " + std::to_string(r) + " is not unit-norm");
      }
      entries_.push_back({ids[r], std::move(row)});
    }
    while (entries_.size() > capacity_) entries_.pop_front();
  }

  // Exact top-K by cosine similarity; ties go to the older entry. Every entry
  // carrying exclude_id is skipped.
  std::vector<BankMatch> topk(std::span<const double> query, std::size_t k,
                              std::optional<std::size_t> exclude_id = std::nullopt) const {
    if (k == 0) throw ValidationError("bank topk: K must be at least 1");
    if (!entries_.empty() && query.size() != entries_.front().vector.size()) {
      throw ShapeError("bank topk: query dimension " + std::to_string(query.size()) +
                       " differs from stored dimension " +
                       std::to_string(entries_.front().vector.size()));
    }
    std::vector<std::pair<double, std::size_t>> scored;  // (similarity, age rank)
    scored.reserve(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (exclude_id && entries_[i].id == *exclude_id) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < query.size(); ++j) dot += query[j] * entries_[i].vector[j];
      scored.emplace_back(dot, i);
    }
    if (scored.empty()) throw EmptyBankError("bank topk: no entries available after exclusion");
    const std::size_t take = std::min(k, scored.size());
    auto better = [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    };
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take),
                      scored.end(), better);
    std::vector<BankMatch> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
      const auto& e = entries_[scored[i].second];
      out.push_back({e.id, scored[i].first, e.vector});
    }
    return out;
  }

  // Checkpoint support in the named-tensor container format.
  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write bank " + path);
    const std::size_t d = entries_.empty() ? 0 : entries_.front().vector.size();
    std::vector<double> ids, vals;
    for (const auto& e : entries_) {
      ids.push_back(static_cast<double>(e.id));
      vals.insert(vals.end(), e.vector.begin(), e.vector.end());
    }
    write_tensor_block(os, "bank.capacity", Tensor::scalar(static_cast<double>(capacity_)));
    write_tensor_block(os, "bank.ids", Tensor(entries_.size(), 1, ids));
    write_tensor_block(os, "bank.vectors", Tensor(entries_.size(), d, vals));
    if (!os) throw IoError("write failed: " + path);
  }

  static TextBank load(const std::string& path) {
    const auto blocks = read_checkpoint(path);
    auto get = [&](const char* name) -> const Tensor& {
      auto it = blocks.find(name);
      if (it == blocks.end()) throw IoError(path + ": missing " + name);
      return it->second;
    };
    TextBank bank(static_cast<std::size_t>(get("bank.capacity").item()));
    const Tensor& ids = get("bank.ids");
    const Tensor& vecs = get("bank.vectors");
    if (ids.rows() != vecs.rows()) throw IoError(path + ": bank id/vector row mismatch");
    for (std::size_t r = 0; r < ids.rows(); ++r) {
      bank.entries_.push_back({static_cast<std::size_t>(ids(r, 0)), vecs.row_values(r)});
    }
    return bank;
  }

 private:
  std::size_t capacity_;
  std::deque<Entry> entries_;
};

}  // namespace hound
