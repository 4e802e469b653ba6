#pragma once

// Mixtures of frozen base learners weighted per episode by the WPN, the WPN
// training loop, and the two ensemble baselines (uniform averaging and a
// single learner pooled over all training domains).

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mxml/base_learners.hpp"
#include "mxml/episodes.hpp"
#include "mxml/wpn.hpp"

namespace mxml {

// normalized:    p = sum_m softmax(w)_m p_m
// paper_literal: p = softmax_c(sum_m w_m p_m) with raw scores
enum class CombinationMode { Normalized, PaperLiteral };

std::string to_string(CombinationMode mode);
CombinationMode parse_combination_mode(const std::string& name);

struct MixtureCoefficients {
  std::vector<double> raw;
  std::vector<double> normalized;  // softmax(raw), also reported in paper_literal mode
};

MixtureCoefficients coefficients_from_scores(std::span<const double> scores);

// Graph-building combination of M learner outputs under raw scores [M].
Tensor combine_log_probs(const Tensor& scores, std::span<const LearnerOutput> outputs, CombinationMode mode);

struct MixtureForward {
  Tensor log_probs;  // [L x N]
  Tensor scores;     // [M]
};

MixtureForward mxml_forward(const WpnParams& wpn, std::span<const LearnerOutput> outputs, CombinationMode mode,
                            bool transductive);

struct EnsembleModel {
  std::vector<std::shared_ptr<const BaseLearner>> learners;
  WpnParams wpn;
  CombinationMode mode = CombinationMode::Normalized;
  bool transductive = true;

  std::vector<LearnerOutput> member_outputs(const Episode& episode) const;
};

struct MixturePrediction {
  Tensor probs;  // [L x N]
  MixtureCoefficients coefficients;
};

MixturePrediction mxml_predict(const EnsembleModel& ensemble, const Episode& episode);
// Same from member outputs computed beforehand.
MixturePrediction mxml_combine(const WpnParams& wpn, std::span<const LearnerOutput> outputs, CombinationMode mode,
                               bool transductive);

Tensor uniform_average(std::span<const LearnerOutput> outputs);
Tensor uniform_average_predict(std::span<const std::shared_ptr<const BaseLearner>> learners, const Episode& episode);

// ---------------------------------------------------------------------------
// Training

// One domain together with the class subset episodes may draw from.
struct DomainClasses {
  const Domain* domain = nullptr;
  std::vector<int> classes;
};

struct WpnTrainConfig {
  std::size_t steps = 2000;
  double lr = 1e-4;
  std::size_t n_way = 10;
  std::size_t k_shot = 5;
  std::size_t n_query = 15;
  std::uint64_t seed = 0;
};

struct WpnTrainResult {
  WpnParams wpn;
  std::vector<double> loss_curve;  // one entry per step
};

// Learner parameters are only ever read. The ensemble's own wpn is the
// starting point.
WpnTrainResult train_wpn(const EnsembleModel& ensemble, std::span<const DomainClasses> domains,
                         const WpnTrainConfig& cfg);

// Mean query cross-entropy of the mixture over a fixed list of episodes.
double mixture_cross_entropy(const EnsembleModel& ensemble, std::span<const Episode> episodes);

// Episodes draw their source domain uniformly at random; with one domain this
// is exactly the single-domain trainer.
LearnerTrainResult single_pooled_train(std::span<const DomainClasses> domains, const TrainConfig& cfg,
                                       const std::string& kind);

// ---------------------------------------------------------------------------
// Ensemble manifest: JSON listing member checkpoints (paths relative to the
// manifest), the WPN checkpoint, mode and transductive flag.

struct ManifestMember {
  std::filesystem::path checkpoint;
  std::string kind;
  std::string domain;
};

struct EnsembleManifest {
  std::vector<ManifestMember> members;
  std::filesystem::path wpn_checkpoint;
  CombinationMode mode = CombinationMode::Normalized;
  bool transductive = true;
};

void save_manifest(const EnsembleManifest& manifest, const std::filesystem::path& path);
EnsembleManifest load_manifest(const std::filesystem::path& path);
EnsembleModel load_ensemble(const std::filesystem::path& manifest_path);

}  // namespace mxml
