#pragma once

// Weight prediction network. For one base learner and one episode it maps
// each class's support embeddings to a diagonal Gaussian in a latent space,
// projects the query embeddings into the same space, and scores the learner
// as
//
//   w = 1/N^2 sum_{i,j} KL(q_i || q_j) + lambda * sum_k logsumexp_n log q_n(z_k)
//
// The second term is dropped in the non-transductive setting.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mxml/base_learners.hpp"
#include "mxml/checkpoint.hpp"
#include "mxml/tensor.hpp"

namespace mxml {

inline const double kMinLogVar = std::log(1e-6);
inline const double kMaxLogVar = std::log(1e6);

struct WpnParams {
  std::size_t d_h = 64;
  std::size_t d_z = 128;
  double lambda = 0.1;
  Tensor class_weight;  // [d_h x 2*d_z]; columns [0, d_z) give mu, [d_z, 2*d_z) log variance
  Tensor class_bias;    // [2*d_z]
  Tensor query_weight;  // [d_h x d_z], no bias: the query projection is linear

  // Symmetric uniform fan-in initialization.
  static WpnParams init(std::size_t d_h, std::size_t d_z, double lambda, std::uint64_t seed);
  static WpnParams zeros(std::size_t d_h, std::size_t d_z, double lambda);

  std::vector<Tensor> params() const { return {class_weight, class_bias, query_weight}; }
  WpnParams clone(bool requires_grad) const;

  Checkpoint to_checkpoint(std::uint64_t seed) const;
  static WpnParams from_checkpoint(const Checkpoint& ckpt);
};

struct ClassGaussian {
  Tensor mu;       // [d_z]
  Tensor log_var;  // [d_z], clamped to [ln 1e-6, ln 1e6]
  std::size_t label = 0;
  std::size_t learner = 0;
};

// The N class Gaussians of one episode stacked row-wise.
struct ClassGaussians {
  Tensor mu;       // [N x d_z]
  Tensor log_var;  // [N x d_z]

  std::size_t size() const { return mu.rows(); }
};

ClassGaussian encode_class_distribution(const WpnParams& wpn, const Tensor& group, std::size_t label = 0,
                                        std::size_t learner = 0);
ClassGaussians encode_class_distributions(const WpnParams& wpn, const EpisodeRepresentation& rep);
ClassGaussians stack_gaussians(std::span<const ClassGaussian> gaussians);

// [L x d_h] -> [L x d_z].
Tensor encode_query_latent(const WpnParams& wpn, const Tensor& queries);

// Closed-form KL(p || q) between diagonal Gaussians, built from elementwise
// ops.
Tensor kl_diag_gaussian(const ClassGaussian& p, const ClassGaussian& q);
// [N x N] matrix of KL(i || j) as one fused op.
Tensor pairwise_kl_matrix(const ClassGaussians& g);
// Mean over all N^2 ordered pairs, diagonal included.
Tensor pairwise_kl_term(const ClassGaussians& g);
Tensor pairwise_kl_term(std::span<const ClassGaussian> gaussians);

// [L x N] diagonal Gaussian log-densities of each latent under each class.
Tensor gaussian_log_density(const Tensor& z, const ClassGaussians& g);
// sum_k logsumexp_n log q_n(z_k).
Tensor query_density_term(const Tensor& z, const ClassGaussians& g);

Tensor wpn_score(const WpnParams& wpn, const EpisodeRepresentation& rep, bool transductive);

}  // namespace mxml
