#include "mxml/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mxml/adam.hpp"
#include "mxml/error.hpp"
#include "mxml/rng.hpp"

namespace mxml {

std::string to_string(CombinationMode mode) {
  return mode == CombinationMode::Normalized ? "normalized" : "paper_literal";
}

CombinationMode parse_combination_mode(const std::string& name) {
  if (name == "normalized") return CombinationMode::Normalized;
  if (name == "paper_literal") return CombinationMode::PaperLiteral;
  throw ConfigError("unknown combination mode '" + name + "' (expected normalized or paper_literal)");
}

MixtureCoefficients coefficients_from_scores(std::span<const double> scores) {
  MixtureCoefficients c;
  c.raw.assign(scores.begin(), scores.end());
  if (scores.empty()) return c;
  const double mx = *std::max_element(scores.begin(), scores.end());
  double s = 0.0;
  for (double w : scores) s += std::exp(w - mx);
  const double lse = mx + std::log(s);
  for (double w : scores) c.normalized.push_back(std::exp(w - lse));
  return c;
}

namespace {

void check_outputs(std::span<const LearnerOutput> outputs) {
  if (outputs.empty()) throw ShapeError("mixture needs at least one learner");
  const Shape& shape = outputs.front().log_probs.shape();
  for (const auto& o : outputs) {
    if (o.log_probs.shape() != shape) {
      throw ShapeError("learner predictions disagree in shape: " + shape_to_string(o.log_probs.shape()) + " vs " +
                       shape_to_string(shape));
    }
  }
}

// [M x L*N] with one flattened learner prediction per row.
Tensor stack_flat(std::span<const LearnerOutput> outputs, bool as_probs) {
  std::vector<Tensor> rows;
  for (const auto& o : outputs) {
    const Tensor t = as_probs ? exp(o.log_probs) : o.log_probs;
    rows.push_back(reshape(t, {1, t.numel()}));
  }
  return concat(rows);
}

}  // namespace

Tensor combine_log_probs(const Tensor& scores, std::span<const LearnerOutput> outputs, CombinationMode mode) {
  check_outputs(outputs);
  const std::size_t m = outputs.size();
  if (scores.numel() != m) {
    throw ShapeError("got " + std::to_string(scores.numel()) + " scores for " + std::to_string(m) + " learners");
  }
  const Shape out_shape = outputs.front().log_probs.shape();
  const Tensor w = reshape(scores, {m});
  if (mode == CombinationMode::Normalized) {
    // log p = logsumexp_m(log softmax(w)_m + log p_m)
    const Tensor log_coef = reshape(add_row(reshape(w, {m, 1}), reshape(neg(logsumexp(w)), {1})), {m});
    return reshape(logsumexp(add_col(stack_flat(outputs, false), log_coef), 0), out_shape);
  }
  const Tensor mixed = matmul(reshape(w, {1, m}), stack_flat(outputs, true));
  return log_softmax(reshape(mixed, out_shape));
}

MixtureForward mxml_forward(const WpnParams& wpn, std::span<const LearnerOutput> outputs, CombinationMode mode,
                            bool transductive) {
  check_outputs(outputs);
  std::vector<Tensor> scores;
  for (const auto& o : outputs) scores.push_back(wpn_score(wpn, o.rep, transductive));
  MixtureForward f;
  f.scores = concat(scores);
  f.log_probs = combine_log_probs(f.scores, outputs, mode);
  return f;
}

std::vector<LearnerOutput> EnsembleModel::member_outputs(const Episode& episode) const {
  if (learners.empty()) throw ShapeError("ensemble has no learners");
  std::vector<LearnerOutput> outs;
  outs.reserve(learners.size());
  for (const auto& l : learners) outs.push_back(l->predict(episode));
  return outs;
}

MixturePrediction mxml_combine(const WpnParams& wpn, std::span<const LearnerOutput> outputs, CombinationMode mode,
                               bool transductive) {
  NoGradGuard no_grad;
  const auto f = mxml_forward(wpn, outputs, mode, transductive);
  return {exp(f.log_probs), coefficients_from_scores(f.scores.values())};
}

MixturePrediction mxml_predict(const EnsembleModel& ensemble, const Episode& episode) {
  const auto outs = ensemble.member_outputs(episode);
  return mxml_combine(ensemble.wpn, outs, ensemble.mode, ensemble.transductive);
}

Tensor uniform_average(std::span<const LearnerOutput> outputs) {
  check_outputs(outputs);
  NoGradGuard no_grad;
  const Shape shape = outputs.front().log_probs.shape();
  std::vector<double> acc(shape_numel(shape), 0.0);
  for (const auto& o : outputs) {
    auto lp = o.log_probs.values();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += std::exp(lp[i]);
  }
  for (auto& x : acc) x /= static_cast<double>(outputs.size());
  return Tensor(shape, std::move(acc));
}

Tensor uniform_average_predict(std::span<const std::shared_ptr<const BaseLearner>> learners, const Episode& episode) {
  std::vector<LearnerOutput> outs;
  for (const auto& l : learners) outs.push_back(l->predict(episode));
  return uniform_average(outs);
}

// ---------------------------------------------------------------------------
// Training

namespace {

void check_domains(std::span<const DomainClasses> domains, std::size_t n_way) {
  if (domains.empty()) throw ConfigError("no training domains");
  for (const auto& d : domains) {
    if (d.domain == nullptr) throw ConfigError("training domain is null");
    if (d.classes.size() < n_way) {
      throw SamplingError("domain '" + d.domain->name + "' offers " + std::to_string(d.classes.size()) +
                          " classes, fewer than " + std::to_string(n_way) + "-way episodes need");
    }
  }
}

}  // namespace

WpnTrainResult train_wpn(const EnsembleModel& ensemble, std::span<const DomainClasses> domains,
                         const WpnTrainConfig& cfg) {
  if (ensemble.learners.empty()) throw ConfigError("train_wpn: ensemble has no learners");
  if (!(cfg.lr > 0.0)) throw ConfigError("train_wpn: learning rate must be positive");
  check_domains(domains, cfg.n_way);

  WpnTrainResult result{ensemble.wpn.clone(true), {}};
  std::vector<Tensor> params = result.wpn.params();
  AdamState state = make_adam_state(params, cfg.lr);
  Rng rng(derive_seed(cfg.seed, "wpn-episodes"));
  std::uniform_int_distribution<std::size_t> pick_domain(0, domains.size() - 1);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto& d = domains[pick_domain(rng)];
    const Episode ep = sample_episode(*d.domain, d.classes, cfg.n_way, cfg.k_shot, cfg.n_query, rng);
    const auto outs = ensemble.member_outputs(ep);
    {
      const auto f = mxml_forward(result.wpn, outs, ensemble.mode, ensemble.transductive);
      Tensor loss = query_cross_entropy(f.log_probs, ep.query_labels);
      if (!std::isfinite(loss.item())) {
        throw NumericError("WPN training diverged: loss " + std::to_string(loss.item()) + " at step " +
                           std::to_string(step) + " on domain '" + d.domain->name + "'");
      }
      result.loss_curve.push_back(loss.item());
      if (loss.requires_grad()) backward(loss);
    }
    adam_step(params, state);
  }
  return result;
}

double mixture_cross_entropy(const EnsembleModel& ensemble, std::span<const Episode> episodes) {
  if (episodes.empty()) throw ConfigError("mixture_cross_entropy: no episodes");
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& ep : episodes) {
    const auto outs = ensemble.member_outputs(ep);
    const auto f = mxml_forward(ensemble.wpn, outs, ensemble.mode, ensemble.transductive);
    total += query_cross_entropy(f.log_probs, ep.query_labels).item();
  }
  return total / static_cast<double>(episodes.size());
}

LearnerTrainResult single_pooled_train(std::span<const DomainClasses> domains, const TrainConfig& cfg,
                                       const std::string& kind) {
  check_domains(domains, cfg.n_way);
  const std::size_t d_in = domains.front().domain->d_in;
  for (const auto& d : domains) {
    if (d.domain->d_in != d_in) throw ShapeError("pooled training needs domains of equal input dimension");
  }
  std::vector<DomainClasses> pool(domains.begin(), domains.end());
  EpisodeSource source;
  if (pool.size() == 1) {
    source = [pool, cfg](Rng& rng) {
      return sample_episode(*pool[0].domain, pool[0].classes, cfg.n_way, cfg.k_shot, cfg.n_query, rng);
    };
  } else {
    auto domain_rng = std::make_shared<Rng>(derive_seed(cfg.seed, "pooled-domain"));
    source = [pool, cfg, domain_rng](Rng& rng) {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      const auto& d = pool[pick(*domain_rng)];
      return sample_episode(*d.domain, d.classes, cfg.n_way, cfg.k_shot, cfg.n_query, rng);
    };
  }
  return train_learner(kind, source, d_in, cfg);
}

// ---------------------------------------------------------------------------
// Manifest

void save_manifest(const EnsembleManifest& manifest, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["members"] = nlohmann::json::array();
  for (const auto& m : manifest.members) {
    j["members"].push_back({{"checkpoint", m.checkpoint.generic_string()}, {"kind", m.kind}, {"domain", m.domain}});
  }
  j["wpn"] = manifest.wpn_checkpoint.generic_string();
  j["mode"] = to_string(manifest.mode);
  j["transductive"] = manifest.transductive;
  std::ofstream out(path);
  if (!out) throw Error("cannot write ensemble manifest " + path.string());
  out << j.dump(2) << '\n';
}

EnsembleManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read ensemble manifest " + path.string());
  EnsembleManifest m;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("format_version").get<int>() != 1) throw ConfigError("unsupported ensemble manifest version");
    for (const auto& e : j.at("members")) {
      m.members.push_back({e.at("checkpoint").get<std::string>(), e.at("kind").get<std::string>(),
                           e.value("domain", std::string{})});
    }
    m.wpn_checkpoint = j.at("wpn").get<std::string>();
    m.mode = parse_combination_mode(j.value("mode", std::string("normalized")));
    m.transductive = j.value("transductive", true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed ensemble manifest " + path.string() + ": " + e.what());
  }
  if (m.members.empty()) throw ConfigError("ensemble manifest lists no members");
  return m;
}

EnsembleModel load_ensemble(const std::filesystem::path& manifest_path) {
  const auto m = load_manifest(manifest_path);
  const auto base = manifest_path.parent_path();
  EnsembleModel e;
  for (const auto& member : m.members) {
    auto learner = load_learner(base / member.checkpoint);
    if (learner->kind() != member.kind) {
      throw ConfigError("manifest says '" + member.kind + "' but " + member.checkpoint.string() + " holds '" +
                        learner->kind() + "'");
    }
    e.learners.push_back(std::move(learner));
  }
  e.wpn = WpnParams::from_checkpoint(load_params(base / m.wpn_checkpoint));
  e.mode = m.mode;
  e.transductive = m.transductive;
  return e;
}

}  // namespace mxml
