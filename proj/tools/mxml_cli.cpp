#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "mxml/error.hpp"
#include "mxml/harness.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> episodes;
  std::optional<std::size_t> threads;
  std::optional<bool> transductive;
  std::string mode;
};

void add_common(CLI::App* cmd, Overrides& o, bool needs_config = true) {
  auto* c = cmd->add_option("--config", o.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  if (needs_config) c->required();
  cmd->add_option("--seed", o.seed, "master seed, overrides the config");
  cmd->add_option("--out", o.out, "output directory, overrides the config");
  cmd->add_option("--episodes", o.episodes, "evaluation episodes per meta-test domain");
  cmd->add_option("--threads", o.threads, "worker threads");
  cmd->add_option("--transductive", o.transductive, "score learners with the query density term");
  cmd->add_option("--mode", o.mode, "normalized or paper_literal")->check(CLI::IsMember({"normalized", "paper_literal"}));
}

mxml::ExperimentConfig resolve(const Overrides& o) {
  std::ifstream in(o.config);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw mxml::ConfigError(o.config + " is not valid JSON: " + e.what());
  }
  // Derived seeds hang off the master seed, so it has to be in place before
  // parsing.
  if (o.seed) j["seed"] = *o.seed;
  auto cfg = mxml::parse_config(j, std::filesystem::path(o.config).parent_path());
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (o.episodes) cfg.eval.episodes = *o.episodes;
  if (o.threads) cfg.eval.threads = *o.threads;
  if (o.transductive) cfg.transductive = *o.transductive;
  if (!o.mode.empty()) cfg.mode = mxml::parse_combination_mode(o.mode);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixtures of few-shot meta-learners weighted by a weight prediction network"};
  app.require_subcommand(1);

  Overrides o;
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "suppress progress messages");

  auto* train_base = app.add_subcommand("train-base", "train the per-domain learners and the pooled baseline");
  add_common(train_base, o);
  auto* train_wpn = app.add_subcommand("train-wpn", "train the weight prediction network on frozen learners");
  add_common(train_wpn, o);
  auto* eval = app.add_subcommand("eval", "evaluate every model on shared episodes and write the CSVs");
  add_common(eval, o);
  auto* report = app.add_subcommand("report", "render report.md from results.csv and coefficients.csv");
  add_common(report, o, false);
  auto* run = app.add_subcommand("run", "train-base, train-wpn, eval and report in one go");
  add_common(run, o);

  CLI11_PARSE(app, argc, argv);

  mxml::StageLog log;
  if (!quiet) log.info = [](const std::string& msg) { std::cerr << msg << '\n'; };

  try {
    if (report->parsed()) {
      std::filesystem::path dir = o.out;
      if (dir.empty()) {
        if (o.config.empty()) throw mxml::ConfigError("report needs --out or --config");
        dir = resolve(o).output_dir;
      }
      mxml::report_stage(dir);
      std::cout << (dir / "report.md").string() << '\n';
      return 0;
    }
    const auto cfg = resolve(o);
    if (train_base->parsed()) {
      mxml::train_base_stage(cfg, log);
    } else if (train_wpn->parsed()) {
      mxml::train_wpn_stage(cfg, log);
    } else if (eval->parsed()) {
      mxml::eval_stage(cfg, log);
    } else if (run->parsed()) {
      mxml::run_experiment(cfg, log);
    }
    std::cout << cfg.output_dir.string() << '\n';
  } catch (const mxml::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
