#pragma once

// Dataset-specific few-shot learners: a prototypical network and a
// first-order MAML learner on top of a dense encoder. Both report per-query
// class log-probabilities together with the L2-normalized support and query
// embeddings consumed by the weight prediction network.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mxml/checkpoint.hpp"
#include "mxml/episodes.hpp"
#include "mxml/tensor.hpp"

namespace mxml {

// Dense layers d_in -> hidden... -> d_h with ReLU between layers (not after
// the last). A single layer size means no layers: the identity map.
class Encoder {
 public:
  Encoder() = default;
  Encoder(std::vector<std::size_t> layer_sizes, std::uint64_t seed);
  static Encoder identity(std::size_t dim);

  std::size_t input_dim() const { return sizes_.front(); }
  std::size_t output_dim() const { return sizes_.back(); }
  const std::vector<std::size_t>& layer_sizes() const { return sizes_; }

  // Raw (unnormalized) features for each row of x.
  Tensor forward(const Tensor& x) const;

  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  Encoder clone(bool requires_grad) const;

  void write(Checkpoint& ckpt) const;
  static Encoder read(const Checkpoint& ckpt);

 private:
  std::vector<std::size_t> sizes_{1};
  std::vector<Tensor> params_;  // weight [in x out], bias [out], per layer
};

// l2_normalize(encoder.forward(x)).
Tensor encode(const Encoder& encoder, const Tensor& x);
Tensor encode(const Encoder& encoder, const std::vector<Instance>& instances);

struct EpisodeRepresentation {
  Tensor support;  // [N*K x d_h], label-major
  Tensor query;    // [L x d_h]
  std::size_t n_way = 0;
  std::size_t k_shot = 0;

  // Embeddings of the support instances labeled n: [K x d_h].
  Tensor group(std::size_t n) const;
};

struct LearnerOutput {
  Tensor log_probs;  // [L x N]
  EpisodeRepresentation rep;
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t episodes_per_epoch = 100;
  std::size_t n_way = 10;
  std::size_t k_shot = 5;
  std::size_t n_query = 15;
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t d_h = 64;
  double lr_initial = 1e-3;
  double lr_final = 1e-4;
  double decay_at = 0.7;  // fraction of epochs after which lr_final applies
  std::size_t meta_batch = 2;
  std::size_t inner_steps = 5;
  double inner_lr = 3e-2;
  std::uint64_t seed = 0;

  double lr_at(std::size_t epoch) const;
  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double mean_acc = 0.0;
};

void write_training_curve(const std::vector<EpochStats>& curve, const std::filesystem::path& path);

class BaseLearner {
 public:
  virtual ~BaseLearner() = default;
  virtual std::string kind() const = 0;
  virtual std::size_t input_dim() const = 0;
  // Pure: never modifies the learner. Safe to call concurrently.
  virtual LearnerOutput predict(const Episode& episode) const = 0;
  virtual Checkpoint to_checkpoint() const = 0;
};

std::shared_ptr<BaseLearner> learner_from_checkpoint(const Checkpoint& ckpt);
std::shared_ptr<BaseLearner> load_learner(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Prototypical network

class ProtoNetModel final : public BaseLearner {
 public:
  ProtoNetModel() = default;
  explicit ProtoNetModel(Encoder encoder, std::uint64_t seed = 0) : encoder(std::move(encoder)), seed(seed) {}

  std::string kind() const override { return "protonet"; }
  std::size_t input_dim() const override { return encoder.input_dim(); }
  LearnerOutput predict(const Episode& episode) const override;
  Checkpoint to_checkpoint() const override;

  Encoder encoder;
  std::uint64_t seed = 0;
};

struct ProtoForward {
  Tensor log_probs;
  Tensor support_emb;
  Tensor query_emb;
};

// Graph-building forward pass: prototypes are the means of the normalized
// support embeddings, logits are negative squared distances.
ProtoForward proto_forward(const Encoder& encoder, const Episode& episode);
LearnerOutput proto_predict(const ProtoNetModel& model, const Episode& episode);

// Mean query cross-entropy, and accuracy, of [L x N] log-probabilities.
Tensor query_cross_entropy(const Tensor& log_probs, const std::vector<std::size_t>& labels);
double query_accuracy(const Tensor& log_probs, const std::vector<std::size_t>& labels);

using EpisodeSource = std::function<Episode(Rng& rng)>;

template <typename Model>
struct TrainResult {
  Model model;
  std::vector<EpochStats> curve;
};

TrainResult<ProtoNetModel> proto_train(const Domain& domain, const std::vector<int>& base_classes,
                                       const TrainConfig& cfg);
TrainResult<ProtoNetModel> proto_train(const EpisodeSource& source, std::size_t d_in, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// First-order MAML

class FomamlModel final : public BaseLearner {
 public:
  FomamlModel() = default;
  FomamlModel(Encoder encoder, std::size_t inner_steps, double inner_lr, std::uint64_t seed = 0)
      : encoder(std::move(encoder)), inner_steps(inner_steps), inner_lr(inner_lr), seed(seed) {}

  std::string kind() const override { return "fomaml"; }
  std::size_t input_dim() const override { return encoder.input_dim(); }
  LearnerOutput predict(const Episode& episode) const override;
  Checkpoint to_checkpoint() const override;

  Encoder encoder;
  std::size_t inner_steps = 5;
  double inner_lr = 3e-2;
  std::uint64_t seed = 0;
};

// Episode-local parameters: a copy of the encoder plus a linear head over the
// raw encoder features, width N, starting from zeros.
struct AdaptedParams {
  Encoder encoder;
  Tensor head_weight;  // [d_h x N]
  Tensor head_bias;    // [N]

  Tensor logits(const Tensor& x) const;
  std::vector<Tensor> all_params() const;
};

// `steps` plain gradient-descent updates on the support cross-entropy. The
// model is never modified.
AdaptedParams fomaml_adapt(const FomamlModel& model, const Episode& episode, std::size_t steps, double inner_lr);
// Support cross-entropy of adapted parameters (no graph).
double fomaml_support_loss(const AdaptedParams& params, const Episode& episode);
LearnerOutput fomaml_predict(const FomamlModel& model, const Episode& episode);

TrainResult<FomamlModel> fomaml_train(const Domain& domain, const std::vector<int>& base_classes,
                                      const TrainConfig& cfg);
TrainResult<FomamlModel> fomaml_train(const EpisodeSource& source, std::size_t d_in, const TrainConfig& cfg);

// Dispatch on kind ("protonet" or "fomaml").
struct LearnerTrainResult {
  std::shared_ptr<BaseLearner> learner;
  std::vector<EpochStats> curve;
};
LearnerTrainResult train_learner(const std::string& kind, const EpisodeSource& source, std::size_t d_in,
                                 const TrainConfig& cfg);

}  // namespace mxml
