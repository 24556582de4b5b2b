// hound: synth / pretrain / tune / eval / gradcheck on text-attributed graphs.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hound/config.hpp"
#include "hound/eval_harness.hpp"
#include "hound/loss_gradcheck.hpp"
#include "hound/pretrain.hpp"
#include "hound/prompting.hpp"
#include "hound/tag_data.hpp"

namespace fs = std::filesystem;
using namespace hound;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

constexpr const char* kCheckpointFile = "model.ckpt";
constexpr const char* kVocabFile = "vocab.txt";
constexpr const char* kConfigFile = "config.txt";
constexpr const char* kMetricsFile = "metrics.tsv";
constexpr const char* kReportFile = "report.tsv";
constexpr const char* kPromptFile = "prompt.ckpt";
constexpr const char* kTuneTraceFile = "tune.tsv";

constexpr double kGradTolerance = 1e-4;

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string mode;
  bool prob_average = false;
  bool print_config = false;
  std::vector<std::string> overrides;
  std::string data;
  std::string checkpoint;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config_path, "config file (key = value)");
  cmd->add_option("--seed", o.seed, "global seed");
  cmd->add_option("--out", o.out, "output directory")->capture_default_str();
  cmd->add_option("--mode", o.mode, "pre-training mode")->check(CLI::IsMember({"fewshot", "zeroshot"}));
  cmd->add_flag("--prob-average", o.prob_average, "zero-shot: combine with the negative encoder");
  cmd->add_flag("--print-config", o.print_config, "print the resolved config and exit");
  cmd->add_option("--set", o.overrides, "override a config key, key=value (repeatable)");
}

RunConfig build_config(const Options& o) {
  RunConfig c = o.config_path.empty() ? RunConfig{} : load_config(o.config_path);
  for (const auto& kv : o.overrides) apply_override(c, kv);
  if (o.seed) c.seed = *o.seed;
  if (!o.mode.empty()) c.pretrain.mode = parse_mode(o.mode);
  if (o.prob_average) c.task.prob_average = true;
  validate_run_config(c);
  return resolved(c);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

TextAttributedGraph input_graph(const Options& o, const RunConfig& c) {
  if (!o.data.empty()) return load_tag(o.data);
  return synth_tag(c.synth, c.seed);
}

// Architecture and seeds come from the config saved next to the checkpoint.
TrainedModel load_trained(const std::string& dir) {
  if (dir.empty()) throw IoError("--checkpoint is required");
  const fs::path d(dir);
  if (!fs::exists(d / kCheckpointFile)) throw IoError("no checkpoint at " + (d / kCheckpointFile).string());
  const RunConfig saved = resolved(load_config((d / kConfigFile).string()));
  return load_model(saved.pretrain, (d / kCheckpointFile).string(), (d / kVocabFile).string());
}

int cmd_synth(const Options& o, const RunConfig& c) {
  const auto g = synth_tag(c.synth, c.seed);
  save_tag(g, o.out);
  std::cout << "wrote " << g.num_nodes << " nodes, " << g.edges.size() << " edges, " << g.num_classes()
            << " classes to " << o.out << "\n";
  return kExitOk;
}

int cmd_pretrain(const Options& o, const RunConfig& c) {
  const auto g = input_graph(o, c);
  const fs::path out(o.out);
  make_dir(out);
  std::ofstream metrics(out / kMetricsFile, std::ios::binary | std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + (out / kMetricsFile).string());
  metrics << "step\tcontrastive\tnode_perturbation\ttext_matching\tmargin\tsemantics_opposite\ttotal\n";
  const auto model = pretrain(
      g, c.pretrain, [&metrics](const StepMetrics& m) { metrics << format_metrics(m) << '\n'; }, &std::cerr);
  if (!metrics) throw IoError("write failed: " + (out / kMetricsFile).string());
  save_model(model, (out / kCheckpointFile).string(), (out / kVocabFile).string());
  write_file(out / kConfigFile, print_config(c));
  const auto& last = model.trace.back();
  std::printf("mode %s, %zu steps, final loss %.6f, tau %.6f\n", to_string(c.pretrain.mode).c_str(),
              c.pretrain.steps, last.total, model.tau());
  return kExitOk;
}

int cmd_tune(const Options& o, const RunConfig& c) {
  if (c.task.shots == 0) throw ConfigError("task.shots must be at least 1 for tune");
  const auto g = input_graph(o, c);
  const auto model = load_trained(o.checkpoint);
  const auto ep = sample_episode(g, c.task.ways, c.task.shots, c.task.base_seed);
  std::cout << "support size " << ep.support.size() << "\n";
  const auto prompts = make_class_prompts(g, ep.classes, c.task.prompt_template);
  TuneConfig tc = c.task.tune;
  tc.seed = c.task.base_seed;
  const auto tuned = few_shot_tune(model, embed_nodes(model, g), ep.support, prompts, tc);

  const fs::path out(o.out);
  make_dir(out);
  ParamSet ps;
  ps.add("prompt.vectors", tuned.prompt.vectors);
  save_checkpoint(ps, (out / kPromptFile).string());
  std::string trace = "epoch\tloss\taccuracy\n";
  char buf[96];
  for (std::size_t e = 0; e < tuned.loss_trace.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%zu\t%.8e\t%.4f\n", e, tuned.loss_trace[e], tuned.accuracy_trace[e]);
    trace += buf;
  }
  write_file(out / kTuneTraceFile, trace);
  std::printf("best epoch %zu, support accuracy %.4f\n", tuned.best_epoch,
              tuned.accuracy_trace[tuned.best_epoch]);
  return kExitOk;
}

int cmd_eval(const Options& o, const RunConfig& c) {
  const auto model = load_trained(o.checkpoint);
  const auto g = input_graph(o, c);
  std::vector<RunOutput> runs;
  const auto report = run_trials(g, model, c.task, &runs);
  const fs::path out(o.out);
  make_dir(out);
  for (std::size_t r = 0; r < runs.size(); ++r) {
    std::cout << "run " << r << ": " << c.task.ways << "-way " << c.task.shots << "-shot, support size "
              << runs[r].episode.support.size() << ", query size " << runs[r].episode.query.size() << "\n";
    write_file(out / ("predictions_run" + std::to_string(r) + ".tsv"), format_predictions(runs[r].predictions));
  }
  const std::string text = format_report(report);
  write_file(out / kReportFile, text);
  std::cout << text;
  return kExitOk;
}

int cmd_gradcheck(const RunConfig& c) {
  bool ok = true;
  for (const auto& check : check_loss_gradients(c.seed)) {
    const bool pass = check.result.max_relative_error < kGradTolerance;
    ok = ok && pass;
    std::printf("%s\t%.6e\tchecked %zu\texcluded %zu\t%s\n", check.name.c_str(),
                check.result.max_relative_error, check.result.checked, check.result.excluded,
                pass ? "ok" : "FAIL");
  }
  return ok ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"contrastive graph-text pre-training and prompting"};
  app.require_subcommand(1);
  Options o;
  auto* synth = app.add_subcommand("synth", "generate a synthetic text-attributed graph");
  auto* pre = app.add_subcommand("pretrain", "pre-train the encoders");
  auto* tune = app.add_subcommand("tune", "tune continuous prompts on one few-shot episode");
  auto* eval = app.add_subcommand("eval", "run C-way K-shot evaluation episodes");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every loss");
  for (auto* cmd : {synth, pre, tune, eval, grad}) add_common(cmd, o);
  for (auto* cmd : {pre, tune, eval}) cmd->add_option("--data", o.data, "dataset directory (default: synthesize)");
  for (auto* cmd : {tune, eval}) cmd->add_option("--checkpoint", o.checkpoint, "pretrain output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const RunConfig c = build_config(o);
    if (o.print_config) {
      std::cout << print_config(c);
      return kExitOk;
    }
    if (synth->parsed()) return cmd_synth(o, c);
    if (pre->parsed()) return cmd_pretrain(o, c);
    if (tune->parsed()) return cmd_tune(o, c);
    if (eval->parsed()) return cmd_eval(o, c);
    return cmd_gradcheck(c);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
