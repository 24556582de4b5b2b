#pragma once

// Text-attributed graphs: data model, validation, TSV IO and a
// planted-partition generator with keyword texts.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hound/errors.hpp"
#include "hound/rng.hpp"

namespace hound {

using NodeId = std::size_t;
using ClassId = std::size_t;
using Edge = std::pair<NodeId, NodeId>;

struct TextAttributedGraph {
  std::size_t num_nodes = 0;
  std::vector<Edge> edges;  // unordered pairs, stored once
  std::vector<std::string> texts;
  std::vector<ClassId> labels;
  std::vector<std::string> class_names;

  std::size_t num_classes() const { return class_names.size(); }

  bool operator==(const TextAttributedGraph&) const = default;
};

struct Violation {
  std::string field;
  std::size_t index = 0;
  std::string message;
};

inline bool has_token(const std::string& s) {
  return std::any_of(s.begin(), s.end(), [](unsigned char c) { return !std::isspace(c); });
}

inline std::vector<Violation> validate(const TextAttributedGraph& g) {
  std::vector<Violation> out;
  if (g.texts.size() != g.num_nodes) {
    out.push_back({"texts", g.texts.size(),
                   "has " + std::to_string(g.texts.size()) + " entries, expected " +
                       std::to_string(g.num_nodes)});
  }
  if (g.labels.size() != g.num_nodes) {
    out.push_back({"labels", g.labels.size(),
                   "has " + std::to_string(g.labels.size()) + " entries, expected " +
                       std::to_string(g.num_nodes)});
  }
  for (std::size_t i = 0; i < g.texts.size(); ++i) {
    if (!has_token(g.texts[i])) out.push_back({"texts", i, "text is missing"});
    if (g.texts[i].find_first_of("\t\n\r") != std::string::npos) {
      out.push_back({"texts", i, "text contains tab or newline"});
    }
  }
  for (std::size_t i = 0; i < g.labels.size(); ++i) {
    if (g.labels[i] >= g.class_names.size()) {
      out.push_back({"labels", i,
                     "label " + std::to_string(g.labels[i]) + " has no class name"});
    }
  }
  for (std::size_t c = 0; c < g.class_names.size(); ++c) {
    if (g.class_names[c].find_first_of("\t\n\r") != std::string::npos) {
      out.push_back({"class_names", c, "class name contains tab or newline"});
    }
  }
  std::set<Edge> seen;
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    const auto [u, v] = g.edges[e];
    const std::string pair = "(" + std::to_string(u) + "," + std::to_string(v) + ")";
    if (u >= g.num_nodes || v >= g.num_nodes) {
      out.push_back({"edges", e, "endpoint out of range in " + pair});
      continue;
    }
    if (u == v) {
      out.push_back({"edges", e, "self-loop " + pair});
      continue;
    }
    if (!seen.insert(std::minmax(u, v)).second) {
      out.push_back({"edges", e, "duplicate pair " + pair});
    }
  }
  return out;
}

inline std::string describe(const std::vector<Violation>& vs) {
  std::string s;
  for (const auto& v : vs) {
    if (!s.empty()) s += "; ";
    s += v.field + "[" + std::to_string(v.index) + "]: " + v.message;
  }
  return s;
}

inline void require_valid(const TextAttributedGraph& g) {
  auto vs = validate(g);
  if (!vs.empty()) throw ValidationError("invalid graph: " + describe(vs));
}

// ---------------------------------------------------------------------------
// Files: nodes.tsv (id, label, text), edges.tsv (src < dst), classes.tsv.

inline constexpr const char* kNodesFile = "nodes.tsv";
inline constexpr const char* kEdgesFile = "edges.tsv";
inline constexpr const char* kClassesFile = "classes.tsv";

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line, std::size_t max_fields) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (out.size() + 1 < max_fields) {
    auto tab = line.find('\t', start);
    if (tab == std::string::npos) break;
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  out.push_back(line.substr(start));
  return out;
}

inline std::size_t parse_index(const std::string& s, const std::string& where) {
  if (s.empty() || !std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); })) {
    throw IoError(where + ": expected a non-negative integer, got '" + s + "'");
  }
  return static_cast<std::size_t>(std::stoull(s));
}

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot open " + p.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

}  // namespace detail

inline TextAttributedGraph load_tag(const std::filesystem::path& dir) {
  TextAttributedGraph g;
  const auto class_lines = detail::read_lines(dir / kClassesFile);
  for (std::size_t r = 0; r < class_lines.size(); ++r) {
    const std::string where = (dir / kClassesFile).string() + " record " + std::to_string(r);
    auto f = detail::split_tabs(class_lines[r], 2);
    if (f.size() != 2) throw IoError(where + ": expected class_id<TAB>class_name");
    if (detail::parse_index(f[0], where) != r) {
      throw IoError(where + ": class ids must be 0..C-1 in order");
    }
    g.class_names.push_back(f[1]);
  }

  const auto node_lines = detail::read_lines(dir / kNodesFile);
  for (std::size_t r = 0; r < node_lines.size(); ++r) {
    const std::string where = (dir / kNodesFile).string() + " record " + std::to_string(r);
    auto f = detail::split_tabs(node_lines[r], 3);
    if (f.size() != 3) throw IoError(where + ": expected id<TAB>label<TAB>text");
    if (detail::parse_index(f[0], where) != r) {
      throw IoError(where + ": node ids must be 0..N-1 in order");
    }
    const auto label = detail::parse_index(f[1], where);
    if (label >= g.class_names.size()) {
      throw IoError(where + ": label " + std::to_string(label) + " out of range");
    }
    g.labels.push_back(label);
    g.texts.push_back(f[2]);
  }
  g.num_nodes = g.texts.size();

  const auto edge_lines = detail::read_lines(dir / kEdgesFile);
  for (std::size_t r = 0; r < edge_lines.size(); ++r) {
    const std::string where = (dir / kEdgesFile).string() + " record " + std::to_string(r);
    auto f = detail::split_tabs(edge_lines[r], 2);
    if (f.size() != 2) throw IoError(where + ": expected src<TAB>dst");
    const auto u = detail::parse_index(f[0], where);
    const auto v = detail::parse_index(f[1], where);
    if (u >= g.num_nodes || v >= g.num_nodes) {
      throw IoError(where + ": edge (" + std::to_string(u) + "," + std::to_string(v) +
                    ") endpoint out of range for " + std::to_string(g.num_nodes) + " nodes");
    }
    if (u >= v) throw IoError(where + ": edge must satisfy src < dst");
    g.edges.emplace_back(u, v);
  }

  auto vs = validate(g);
  if (!vs.empty()) throw IoError("invalid graph in " + dir.string() + ": " + describe(vs));
  return g;
}

inline void save_tag(const TextAttributedGraph& g, const std::filesystem::path& dir) {
  require_valid(g);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  auto open = [&](const char* name) {
    std::ofstream os(dir / name, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + (dir / name).string());
    return os;
  };
  {
    auto os = open(kNodesFile);
    for (std::size_t i = 0; i < g.num_nodes; ++i) os << i << '\t' << g.labels[i] << '\t' << g.texts[i] << '\n';
    if (!os) throw IoError("write failed: " + (dir / kNodesFile).string());
  }
  {
    auto os = open(kEdgesFile);
    for (const auto& [u, v] : g.edges) os << std::min(u, v) << '\t' << std::max(u, v) << '\n';
    if (!os) throw IoError("write failed: " + (dir / kEdgesFile).string());
  }
  {
    auto os = open(kClassesFile);
    for (std::size_t c = 0; c < g.class_names.size(); ++c) os << c << '\t' << g.class_names[c] << '\n';
    if (!os) throw IoError("write failed: " + (dir / kClassesFile).string());
  }
}

// ---------------------------------------------------------------------------
// Synthetic generator

struct SynthConfig {
  std::size_t num_nodes = 300;
  std::size_t num_classes = 5;
  double intra_edge_prob = 0.05;
  double inter_edge_prob = 0.005;
  std::size_t keywords_per_class = 8;
  std::size_t text_length = 12;
  double noise_word_prob = 0.2;
};

inline constexpr const char* kNoiseWord = "the";

inline std::string keyword(ClassId c, std::size_t k) {
  return "c" + std::to_string(c) + "k" + std::to_string(k);
}

inline void validate_config(const SynthConfig& c) {
  auto prob = [](double p, const char* key) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw ValidationError(std::string(key) + " must lie in [0,1], got " + std::to_string(p));
    }
  };
  prob(c.intra_edge_prob, "intra_edge_prob");
  prob(c.inter_edge_prob, "inter_edge_prob");
  prob(c.noise_word_prob, "noise_word_prob");
  if (c.num_nodes == 0) throw ValidationError("num_nodes must be positive");
  if (c.num_classes == 0) throw ValidationError("num_classes must be positive");
  if (c.keywords_per_class == 0) throw ValidationError("keywords_per_class must be positive");
  if (c.text_length == 0) throw ValidationError("text_length must be positive");
  if (c.num_classes > c.num_nodes) throw ValidationError("num_classes exceeds num_nodes");
}

// Planted partition: balanced labels in shuffled order, every pair linked with
// the intra- or inter-class probability, texts drawn from the class keyword
// pool with per-token noise. Class names are the keyword lists.
inline TextAttributedGraph synth_tag(const SynthConfig& config, std::uint64_t seed) {
  validate_config(config);
  Rng labels_rng = Rng::stream(seed, "synth.labels");
  Rng edges_rng = Rng::stream(seed, "synth.edges");
  Rng text_rng = Rng::stream(seed, "synth.texts");

  TextAttributedGraph g;
  g.num_nodes = config.num_nodes;
  for (ClassId c = 0; c < config.num_classes; ++c) {
    std::string name;
    for (std::size_t k = 0; k < config.keywords_per_class; ++k) {
      if (k) name += ' ';
      name += keyword(c, k);
    }
    g.class_names.push_back(name);
  }
  g.labels.resize(config.num_nodes);
  for (NodeId i = 0; i < config.num_nodes; ++i) g.labels[i] = i % config.num_classes;
  labels_rng.shuffle(g.labels);

  for (NodeId u = 0; u < config.num_nodes; ++u) {
    for (NodeId v = u + 1; v < config.num_nodes; ++v) {
      const double p = g.labels[u] == g.labels[v] ? config.intra_edge_prob : config.inter_edge_prob;
      if (edges_rng.bernoulli(p)) g.edges.emplace_back(u, v);
    }
  }

  g.texts.resize(config.num_nodes);
  for (NodeId i = 0; i < config.num_nodes; ++i) {
    std::string text;
    for (std::size_t t = 0; t < config.text_length; ++t) {
      if (t) text += ' ';
      const std::size_t k = text_rng.index(config.keywords_per_class);
      text += text_rng.bernoulli(config.noise_word_prob) ? kNoiseWord : keyword(g.labels[i], k);
    }
    g.texts[i] = text;
  }
  return g;
}

}  // namespace hound
