#pragma once

// Flat `key = value` run configuration. `#` starts a comment, unknown keys
// are rejected, and print_config output parses back to the same values.

#include <cerrno>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "hound/errors.hpp"
#include "hound/eval_harness.hpp"
#include "hound/losses.hpp"
#include "hound/pretrain.hpp"
#include "hound/prompting.hpp"
#include "hound/tag_data.hpp"

namespace hound {

struct RunConfig {
  std::uint64_t seed = 1;
  SynthConfig synth;
  PretrainConfig pretrain;
  TaskConfig task;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Shortest %g form that reads back to the same double.
inline std::string fmt_double(double v) {
  char buf[40];
  for (int precision = 1; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline double parse_double(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || errno == ERANGE) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  if (v.empty() || v[0] == '-') throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  const unsigned long long out = std::strtoull(v.c_str(), &end, 10);
  if (*end != '\0' || errno == ERANGE) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

struct Field {
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

inline Field size_field(std::string key, std::size_t& ref) {
  return {key, [&ref] { return std::to_string(ref); },
          [&ref, key](const std::string& v) { ref = static_cast<std::size_t>(parse_uint(key, v)); }};
}

inline Field seed_field(std::string key, std::uint64_t& ref) {
  return {key, [&ref] { return std::to_string(ref); },
          [&ref, key](const std::string& v) { ref = parse_uint(key, v); }};
}

inline Field double_field(std::string key, double& ref) {
  return {key, [&ref] { return fmt_double(ref); },
          [&ref, key](const std::string& v) { ref = parse_double(key, v); }};
}

inline Field bool_field(std::string key, bool& ref) {
  return {key, [&ref] { return std::string(ref ? "true" : "false"); },
          [&ref, key](const std::string& v) { ref = parse_bool(key, v); }};
}

// Field table bound to one RunConfig instance, in print order.
inline std::vector<Field> fields(RunConfig& c) {
  auto& s = c.synth;
  auto& p = c.pretrain;
  auto& z = c.pretrain.sizes;
  auto& t = c.task;
  std::vector<Field> f;
  f.push_back(seed_field("seed", c.seed));

  f.push_back(size_field("synth.num_nodes", s.num_nodes));
  f.push_back(size_field("synth.num_classes", s.num_classes));
  f.push_back(double_field("synth.intra_edge_prob", s.intra_edge_prob));
  f.push_back(double_field("synth.inter_edge_prob", s.inter_edge_prob));
  f.push_back(size_field("synth.keywords_per_class", s.keywords_per_class));
  f.push_back(size_field("synth.text_length", s.text_length));
  f.push_back(double_field("synth.noise_word_prob", s.noise_word_prob));

  f.push_back({"pretrain.mode", [&p] { return to_string(p.mode); },
               [&p](const std::string& v) { p.mode = parse_mode(v); }});
  f.push_back(size_field("pretrain.steps", p.steps));
  f.push_back(size_field("pretrain.batch_size", p.batch_size));
  f.push_back(double_field("pretrain.learning_rate", p.learning_rate));
  f.push_back(double_field("pretrain.alpha", p.weights.alpha));
  f.push_back(double_field("pretrain.beta", p.weights.beta));
  f.push_back({"pretrain.gamma",
               [&p] { return p.weights.gamma ? fmt_double(*p.weights.gamma) : std::string("auto"); },
               [&p](const std::string& v) {
                 if (v == "auto") {
                   p.weights.gamma.reset();
                 } else {
                   p.weights.gamma = parse_double("pretrain.gamma", v);
                 }
               }});
  f.push_back(double_field("pretrain.margin", p.weights.margin));
  f.push_back(double_field("pretrain.tau_init", p.weights.tau_init));
  f.push_back(double_field("pretrain.drop_prob", p.perturb.drop_prob));
  f.push_back(double_field("pretrain.add_prob", p.perturb.add_prob));
  f.push_back(size_field("pretrain.num_views", p.perturb.num_views));
  f.push_back(size_field("pretrain.num_matches", p.num_matches));
  f.push_back(size_field("pretrain.bank_capacity", p.bank_capacity));

  f.push_back(size_field("model.vocab_size", z.vocab_size));
  f.push_back(size_field("model.max_len", z.max_len));
  f.push_back(size_field("model.graph_layers", z.graph_layers));
  f.push_back(size_field("model.feature_dim", z.feature_dim));
  f.push_back(size_field("model.dim", z.dim));
  f.push_back(size_field("model.text_layers", z.text_layers));
  f.push_back(size_field("model.heads", z.heads));
  f.push_back(size_field("model.model_dim", z.model_dim));
  f.push_back(size_field("model.ff_dim", z.ff_dim));
  f.push_back(size_field("model.neg_prompt_len", z.neg_prompt_len));

  f.push_back(size_field("task.ways", t.ways));
  f.push_back(size_field("task.shots", t.shots));
  f.push_back(size_field("task.num_runs", t.num_runs));
  f.push_back(bool_field("task.prob_average", t.prob_average));
  f.push_back({"task.template", [&t] { return t.prompt_template; },
               [&t](const std::string& v) {
                 if (v.empty()) throw ConfigError("task.template: must not be empty");
                 t.prompt_template = v;
               }});
  f.push_back(size_field("tune.prompt_len", t.tune.prompt_len));
  f.push_back(size_field("tune.epochs", t.tune.epochs));
  f.push_back(double_field("tune.learning_rate", t.tune.learning_rate));
  return f;
}

}  // namespace detail

inline void set_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (auto& f : detail::fields(c)) {
    if (f.key == key) {
      f.set(value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

// `key=value`, as given to --set.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set_value(c, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

inline void parse_config(RunConfig& c, std::istream& in, const std::string& source = "<config>") {
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.find('=') == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      apply_override(c, line);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  RunConfig c;
  parse_config(c, in, path);
  return c;
}

inline std::string print_config(const RunConfig& config) {
  RunConfig copy = config;
  std::string out;
  for (const auto& f : detail::fields(copy)) out += f.key + " = " + f.get() + "\n";
  return out;
}

// Range checks; the message names the offending key.
inline void validate_run_config(const RunConfig& c) {
  auto wrap = [](const char* section, const auto& check) {
    try {
      check();
    } catch (const ValidationError& e) {
      throw ConfigError(std::string(section) + "." + e.what());
    }
  };
  wrap("synth", [&] { validate_config(c.synth); });
  wrap("pretrain", [&] { validate_config(c.pretrain); });
  const auto& z = c.pretrain.sizes;
  if (z.model_dim % z.heads != 0) throw ConfigError("model.heads must divide model.model_dim");
  if (c.task.ways < 2) throw ConfigError("task.ways must be at least 2");
  if (c.task.num_runs == 0) throw ConfigError("task.num_runs must be at least 1");
  if (c.task.tune.prompt_len == 0) throw ConfigError("tune.prompt_len must be at least 1");
  if (!(c.task.tune.learning_rate > 0.0)) throw ConfigError("tune.learning_rate must be positive");
}

// Pretrain and task seeds follow the global seed.
inline RunConfig resolved(RunConfig c) {
  c.pretrain.seed = c.seed;
  c.task.base_seed = c.seed;
  return c;
}

}  // namespace hound
