#include "mxml/wpn.hpp"

#include <random>

#include "mxml/error.hpp"
#include "mxml/rng.hpp"

namespace mxml {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)

void require_finite(const Tensor& t, const char* what) {
  for (double x : t.values()) {
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite input");
  }
}

// Dense layer on the class means, split into (mu, clamped log variance).
ClassGaussians class_head(const WpnParams& wpn, const Tensor& pooled) {
  const Tensor out = add_row(matmul(pooled, wpn.class_weight), wpn.class_bias);
  return {slice_cols(out, 0, wpn.d_z), clamp(slice_cols(out, wpn.d_z, 2 * wpn.d_z), kMinLogVar, kMaxLogVar)};
}

void check_pair(const ClassGaussians& g, const char* what) {
  if (g.mu.dim() != 2 || g.mu.shape() != g.log_var.shape()) {
    throw ShapeError(std::string(what) + ": mean/log-variance shape mismatch " + shape_to_string(g.mu.shape()) +
                     " vs " + shape_to_string(g.log_var.shape()));
  }
  require_finite(g.mu, what);
  require_finite(g.log_var, what);
}

}  // namespace

// ---------------------------------------------------------------------------
// Parameters

WpnParams WpnParams::init(std::size_t d_h, std::size_t d_z, double lambda, std::uint64_t seed) {
  if (d_h == 0 || d_z == 0) throw ShapeError("WPN dimensions must be positive");
  if (!(lambda >= 0.0)) throw ConfigError("WPN lambda must be nonnegative");
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_h));
  std::uniform_real_distribution<double> uni(-bound, bound);
  auto draw = [&](std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = uni(rng);
    return v;
  };
  WpnParams p;
  p.d_h = d_h;
  p.d_z = d_z;
  p.lambda = lambda;
  p.class_weight = Tensor::matrix(d_h, 2 * d_z, draw(d_h * 2 * d_z), true);
  p.class_bias = Tensor::vector(draw(2 * d_z), true);
  p.query_weight = Tensor::matrix(d_h, d_z, draw(d_h * d_z), true);
  return p;
}

WpnParams WpnParams::zeros(std::size_t d_h, std::size_t d_z, double lambda) {
  if (d_h == 0 || d_z == 0) throw ShapeError("WPN dimensions must be positive");
  if (!(lambda >= 0.0)) throw ConfigError("WPN lambda must be nonnegative");
  WpnParams p;
  p.d_h = d_h;
  p.d_z = d_z;
  p.lambda = lambda;
  p.class_weight = Tensor::zeros({d_h, 2 * d_z}, true);
  p.class_bias = Tensor::zeros({2 * d_z}, true);
  p.query_weight = Tensor::zeros({d_h, d_z}, true);
  return p;
}

WpnParams WpnParams::clone(bool requires_grad) const {
  WpnParams p = *this;
  p.class_weight = class_weight.clone_leaf(requires_grad);
  p.class_bias = class_bias.clone_leaf(requires_grad);
  p.query_weight = query_weight.clone_leaf(requires_grad);
  return p;
}

Checkpoint WpnParams::to_checkpoint(std::uint64_t seed) const {
  Checkpoint ckpt;
  ckpt.model_kind = "wpn";
  ckpt.rng_seed = seed;
  ckpt.architecture = {{"d_h", d_h}, {"d_z", d_z}, {"lambda", lambda}};
  ckpt.add("class_encoder.weight", class_weight);
  ckpt.add("class_encoder.bias", class_bias);
  ckpt.add("query_projection.weight", query_weight);
  return ckpt;
}

WpnParams WpnParams::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.model_kind != "wpn") throw CheckpointError("checkpoint holds a '" + ckpt.model_kind + "' model, not a WPN");
  WpnParams p;
  try {
    p.d_h = ckpt.architecture.at("d_h").get<std::size_t>();
    p.d_z = ckpt.architecture.at("d_z").get<std::size_t>();
    p.lambda = ckpt.architecture.at("lambda").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("WPN checkpoint architecture incomplete: ") + e.what());
  }
  p.class_weight = ckpt.tensor("class_encoder.weight", {p.d_h, 2 * p.d_z}, true);
  p.class_bias = ckpt.tensor("class_encoder.bias", {2 * p.d_z}, true);
  p.query_weight = ckpt.tensor("query_projection.weight", {p.d_h, p.d_z}, true);
  return p;
}

// ---------------------------------------------------------------------------
// Encoders

ClassGaussian encode_class_distribution(const WpnParams& wpn, const Tensor& group, std::size_t label,
                                        std::size_t learner) {
  if (group.dim() != 2 || group.cols() != wpn.d_h) {
    throw ShapeError("class group must be [K x " + std::to_string(wpn.d_h) + "], got " + shape_to_string(group.shape()));
  }
  const auto g = class_head(wpn, group_mean(group, group.rows()));
  return {reshape(g.mu, {wpn.d_z}), reshape(g.log_var, {wpn.d_z}), label, learner};
}

ClassGaussians encode_class_distributions(const WpnParams& wpn, const EpisodeRepresentation& rep) {
  if (rep.support.dim() != 2 || rep.support.cols() != wpn.d_h) {
    throw ShapeError("support embeddings must have dimension " + std::to_string(wpn.d_h) + ", got " +
                     shape_to_string(rep.support.shape()));
  }
  return class_head(wpn, group_mean(rep.support, rep.k_shot));
}

ClassGaussians stack_gaussians(std::span<const ClassGaussian> gaussians) {
  if (gaussians.empty()) throw ShapeError("no class Gaussians");
  std::vector<Tensor> mus, lvs;
  for (const auto& g : gaussians) {
    mus.push_back(reshape(g.mu, {1, g.mu.numel()}));
    lvs.push_back(reshape(g.log_var, {1, g.log_var.numel()}));
  }
  return {concat(mus), concat(lvs)};
}

Tensor encode_query_latent(const WpnParams& wpn, const Tensor& queries) {
  if (queries.dim() != 2 || queries.cols() != wpn.d_h) {
    throw ShapeError("query embeddings must be [L x " + std::to_string(wpn.d_h) + "], got " +
                     shape_to_string(queries.shape()));
  }
  return matmul(queries, wpn.query_weight);
}

// ---------------------------------------------------------------------------
// Score terms

Tensor kl_diag_gaussian(const ClassGaussian& p, const ClassGaussian& q) {
  if (p.mu.shape() != q.mu.shape() || p.log_var.shape() != q.log_var.shape() || p.mu.shape() != p.log_var.shape()) {
    throw ShapeError("kl_diag_gaussian: dimension mismatch " + shape_to_string(p.mu.shape()) + " vs " +
                     shape_to_string(q.mu.shape()));
  }
  require_finite(p.mu, "kl_diag_gaussian");
  require_finite(p.log_var, "kl_diag_gaussian");
  require_finite(q.mu, "kl_diag_gaussian");
  require_finite(q.log_var, "kl_diag_gaussian");
  // 1/2 sum [ s_p/s_q + (mu_q - mu_p)^2 / s_q - 1 + log s_q - log s_p ]
  const Tensor lv_diff = sub(q.log_var, p.log_var);
  const Tensor inv_q = exp(neg(q.log_var));
  const Tensor terms = add(add(exp(neg(lv_diff)), mul(square(sub(q.mu, p.mu)), inv_q)), add_scalar(lv_diff, -1.0));
  return scale(sum(terms), 0.5);
}

Tensor pairwise_kl_matrix(const ClassGaussians& g) {
  check_pair(g, "pairwise_kl_matrix");
  const std::size_t n = g.mu.rows(), d = g.mu.cols();
  auto mu = g.mu.values();
  auto lv = g.log_var.values();
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double a = lv[i * d + k], b = lv[j * d + k];
        const double diff = mu[j * d + k] - mu[i * d + k];
        s += std::exp(a - b) + diff * diff * std::exp(-b) - 1.0 + b - a;
      }
      out[i * n + j] = 0.5 * s;
    }
  return Tensor::from_op(
      "pairwise_kl", {n, n}, std::move(out), {g.mu, g.log_var},
      [mu_t = g.mu, lv_t = g.log_var, n, d](std::span<const double> grad, std::span<const std::span<double>> gi) {
        auto mu = mu_t.values();
        auto lv = lv_t.values();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double gij = grad[i * n + j];
            if (gij == 0.0) continue;
            for (std::size_t k = 0; k < d; ++k) {
              const double a = lv[i * d + k], b = lv[j * d + k];
              const double diff = mu[j * d + k] - mu[i * d + k];
              const double ratio = std::exp(a - b);
              const double inv_b = std::exp(-b);
              if (!gi[0].empty()) {
                gi[0][i * d + k] -= gij * diff * inv_b;
                gi[0][j * d + k] += gij * diff * inv_b;
              }
              if (!gi[1].empty()) {
                gi[1][i * d + k] += gij * 0.5 * (ratio - 1.0);
                gi[1][j * d + k] += gij * 0.5 * (1.0 - ratio - diff * diff * inv_b);
              }
            }
          }
      });
}

Tensor pairwise_kl_term(const ClassGaussians& g) {
  if (g.size() < 2) throw ShapeError("pairwise_kl_term needs at least 2 classes");
  const double n = static_cast<double>(g.size());
  return scale(sum(pairwise_kl_matrix(g)), 1.0 / (n * n));
}

Tensor pairwise_kl_term(std::span<const ClassGaussian> gaussians) {
  if (gaussians.size() < 2) throw ShapeError("pairwise_kl_term needs at least 2 classes");
  return pairwise_kl_term(stack_gaussians(gaussians));
}

Tensor gaussian_log_density(const Tensor& z, const ClassGaussians& g) {
  check_pair(g, "gaussian_log_density");
  if (z.dim() != 2 || z.cols() != g.mu.cols()) {
    throw ShapeError("gaussian_log_density: latent shape " + shape_to_string(z.shape()) + " vs class means " +
                     shape_to_string(g.mu.shape()));
  }
  const std::size_t l = z.rows(), n = g.mu.rows(), d = g.mu.cols();
  auto zv = z.values();
  auto mu = g.mu.values();
  auto lv = g.log_var.values();
  std::vector<double> out(l * n);
  for (std::size_t k = 0; k < l; ++k)
    for (std::size_t c = 0; c < n; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = zv[k * d + j] - mu[c * d + j];
        s += kLog2Pi + lv[c * d + j] + diff * diff * std::exp(-lv[c * d + j]);
      }
      out[k * n + c] = -0.5 * s;
    }
  return Tensor::from_op(
      "gaussian_log_density", {l, n}, std::move(out), {z, g.mu, g.log_var},
      [z, mu_t = g.mu, lv_t = g.log_var, l, n, d](std::span<const double> grad,
                                                  std::span<const std::span<double>> gi) {
        auto zv = z.values();
        auto mu = mu_t.values();
        auto lv = lv_t.values();
        for (std::size_t k = 0; k < l; ++k)
          for (std::size_t c = 0; c < n; ++c) {
            const double g = grad[k * n + c];
            for (std::size_t j = 0; j < d; ++j) {
              const double inv = std::exp(-lv[c * d + j]);
              const double diff = zv[k * d + j] - mu[c * d + j];
              if (!gi[0].empty()) gi[0][k * d + j] -= g * diff * inv;
              if (!gi[1].empty()) gi[1][c * d + j] += g * diff * inv;
              if (!gi[2].empty()) gi[2][c * d + j] -= g * 0.5 * (1.0 - diff * diff * inv);
            }
          }
      });
}

Tensor query_density_term(const Tensor& z, const ClassGaussians& g) {
  return sum(logsumexp(gaussian_log_density(z, g), 1));
}

Tensor wpn_score(const WpnParams& wpn, const EpisodeRepresentation& rep, bool transductive) {
  const ClassGaussians g = encode_class_distributions(wpn, rep);
  Tensor score = pairwise_kl_term(g);
  if (transductive && wpn.lambda != 0.0) {
    const Tensor z = encode_query_latent(wpn, rep.query);
    score = add(score, scale(query_density_term(z, g), wpn.lambda));
  }
  return score;
}

}  // namespace mxml
