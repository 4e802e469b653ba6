#pragma once

// Experiment driver: configuration, the out-of-distribution and
// in-distribution protocols, paired evaluation and report files.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mxml/base_learners.hpp"
#include "mxml/episodes.hpp"
#include "mxml/mixture.hpp"

namespace mxml {

enum class Protocol { OutOfDistribution, InDistribution };

std::string to_string(Protocol p);

// A synthetic generator or a CSV feature file.
struct DomainEntry {
  DomainSpec spec;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> csv;

  const std::string& name() const { return spec.name; }
  Domain build() const;
};

// Which target classes the WPN sees under the in-distribution protocol, on
// top of every other domain's WPN split.
enum class TargetWpnClasses { None, Train, Validation };

struct EvalSettings {
  std::size_t n_way = 10;
  std::size_t k_shot = 5;
  std::size_t n_query = 15;
  std::size_t episodes = 600;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct BaselineToggles {
  bool dataset_specific = true;
  bool single = true;
  bool uniform = true;
  bool non_transductive = true;
};

struct ExperimentConfig {
  Protocol protocol = Protocol::OutOfDistribution;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "mxml_out";

  std::vector<DomainEntry> train_domains;
  std::vector<DomainEntry> test_domains;  // out-of-distribution only
  std::optional<DomainEntry> target;      // in-distribution only

  SplitConfig split;
  std::vector<double> id_fractions = {0.64, 0.16, 0.20};
  TargetWpnClasses target_wpn_classes = TargetWpnClasses::Train;

  std::string learner_kind = "protonet";
  TrainConfig learner;

  std::size_t d_z = 128;
  double lambda = 0.1;
  WpnTrainConfig wpn;
  CombinationMode mode = CombinationMode::Normalized;
  bool transductive = true;

  EvalSettings eval;
  BaselineToggles baselines;

  // Unknown keys met while parsing; reported by problems().
  std::vector<std::string> parse_issues;

  // Every violation, one message each.
  std::vector<std::string> problems() const;
  // Throws ConfigError listing problems() when there are any.
  void validate() const;
};

// Relative paths inside the document resolve against `base_dir`.
ExperimentConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json config_to_json(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Evaluation

struct CoefficientStat {
  std::string learner;
  double mean = 0.0;
  double std = 0.0;
  std::size_t episodes = 0;
};

struct EvalResult {
  std::string model;
  std::string train_domains;
  std::string test_domain;
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::size_t queries = 0;
  std::size_t episodes = 0;
  double mean_acc = 0.0;  // percent
  double ci95 = 0.0;      // 1.96 sd / sqrt(episodes)
  std::vector<double> episode_acc;
  std::vector<CoefficientStat> coefficients;  // ensembles only
  std::vector<std::vector<double>> episode_coefficients;
};

struct EpisodeVerdict {
  double accuracy = 0.0;  // percent
  std::vector<double> coefficients;
};

// A model evaluated from the cached outputs of every learner on the episode.
struct EvalModel {
  std::string name;
  std::string train_domains;
  std::vector<std::string> coefficient_names;  // empty unless the model reports coefficients
  std::function<EpisodeVerdict(const Episode&, std::span<const LearnerOutput>)> judge;
};

// Mean and 1.96 sd / sqrt(n) with the sample standard deviation.
std::pair<double, double> mean_ci95(std::span<const double> values);

// Every model sees the same episodes; episode e draws from the substream
// derive_seed(seed, "eval", e). Learner outputs are computed once per episode.
std::vector<EvalResult> evaluate_models(std::span<const EvalModel> models,
                                        std::span<const std::shared_ptr<const BaseLearner>> learners,
                                        const Domain& domain, std::span<const int> classes, const EvalSettings& eval,
                                        std::uint64_t seed);

// Single model or ensemble.
using Predictor = std::function<MixturePrediction(const Episode&)>;
EvalResult evaluate(const std::string& name, const Predictor& predict, const Domain& domain,
                    std::span<const int> classes, const EvalSettings& eval, std::uint64_t seed);

// Exact two-sided binomial sign test over paired differences, ties dropped.
struct SignTest {
  std::size_t wins = 0;
  std::size_t losses = 0;
  std::size_t ties = 0;
  double p_value = 1.0;
};
SignTest sign_test(std::span<const double> a, std::span<const double> b);

// ---------------------------------------------------------------------------
// Reports

void write_results_csv(std::span<const EvalResult> results, const std::filesystem::path& path);
void write_coefficients_csv(std::span<const EvalResult> results, const std::filesystem::path& path);
void write_episodes_csv(std::span<const EvalResult> results, const std::filesystem::path& path);
// test_domain,model,episode,learner,weight at full precision.
void write_episode_coefficients_csv(std::span<const EvalResult> results, const std::filesystem::path& path);

// Rows of results.csv back as results without per-episode data.
std::vector<EvalResult> read_results_csv(const std::filesystem::path& path);
std::vector<std::pair<std::string, CoefficientStat>> read_coefficients_csv(const std::filesystem::path& path);

std::string render_report(std::span<const EvalResult> results,
                          std::span<const std::pair<std::string, CoefficientStat>> coefficients,
                          const std::string& preamble = "");
// results.csv, coefficients.csv and report.md under `dir`.
void emit_report(std::span<const EvalResult> results, const std::filesystem::path& dir,
                 const std::string& preamble = "");

// ---------------------------------------------------------------------------
// Pipeline stages. Each stage reads what the previous one left in
// cfg.output_dir, so they can run as separate commands.

struct StageLog {
  std::function<void(const std::string&)> info = [](const std::string&) {};
};

void train_base_stage(const ExperimentConfig& cfg, const StageLog& log = {});
void train_wpn_stage(const ExperimentConfig& cfg, const StageLog& log = {});
std::vector<EvalResult> eval_stage(const ExperimentConfig& cfg, const StageLog& log = {});
void report_stage(const std::filesystem::path& dir);
std::vector<EvalResult> run_experiment(const ExperimentConfig& cfg, const StageLog& log = {});

}  // namespace mxml
