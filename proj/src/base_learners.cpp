#include "mxml/base_learners.hpp"

#include <cmath>
#include <fstream>

#include "mxml/adam.hpp"
#include "mxml/error.hpp"

namespace mxml {

// ---------------------------------------------------------------------------
// Encoder

Encoder::Encoder(std::vector<std::size_t> layer_sizes, std::uint64_t seed) : sizes_(std::move(layer_sizes)) {
  if (sizes_.empty()) throw ShapeError("encoder needs at least an input size");
  for (auto s : sizes_) {
    if (s == 0) throw ShapeError("encoder layer sizes must be positive");
  }
  Rng rng(seed);
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const std::size_t in = sizes_[l], out = sizes_[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> uni(-bound, bound);
    std::vector<double> w(in * out), b(out);
    for (auto& x : w) x = uni(rng);
    for (auto& x : b) x = uni(rng);
    params_.push_back(Tensor::matrix(in, out, std::move(w), true));
    params_.push_back(Tensor::vector(std::move(b), true));
  }
}

Encoder Encoder::identity(std::size_t dim) { return Encoder({dim}, 0); }

Tensor Encoder::forward(const Tensor& x) const {
  if (x.dim() != 2 || x.cols() != input_dim()) {
    throw ShapeError("encoder expects inputs of dimension " + std::to_string(input_dim()) + ", got " +
                     shape_to_string(x.shape()));
  }
  Tensor h = x;
  const std::size_t layers = params_.size() / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    h = add_row(matmul(h, params_[2 * l]), params_[2 * l + 1]);
    if (l + 1 < layers) h = relu(h);
  }
  return h;
}

Encoder Encoder::clone(bool requires_grad) const {
  Encoder copy;
  copy.sizes_ = sizes_;
  for (const auto& p : params_) copy.params_.push_back(p.clone_leaf(requires_grad));
  return copy;
}

void Encoder::write(Checkpoint& ckpt) const {
  ckpt.architecture["layer_sizes"] = sizes_;
  for (std::size_t l = 0; l < params_.size() / 2; ++l) {
    ckpt.add("encoder." + std::to_string(l) + ".weight", params_[2 * l]);
    ckpt.add("encoder." + std::to_string(l) + ".bias", params_[2 * l + 1]);
  }
}

Encoder Encoder::read(const Checkpoint& ckpt) {
  Encoder enc;
  try {
    enc.sizes_ = ckpt.architecture.at("layer_sizes").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint architecture lacks layer_sizes: ") + e.what());
  }
  if (enc.sizes_.empty()) throw CheckpointError("checkpoint architecture has empty layer_sizes");
  for (std::size_t l = 0; l + 1 < enc.sizes_.size(); ++l) {
    const std::size_t in = enc.sizes_[l], out = enc.sizes_[l + 1];
    enc.params_.push_back(ckpt.tensor("encoder." + std::to_string(l) + ".weight", {in, out}, true));
    enc.params_.push_back(ckpt.tensor("encoder." + std::to_string(l) + ".bias", {out}, true));
  }
  return enc;
}

Tensor encode(const Encoder& encoder, const Tensor& x) { return l2_normalize(encoder.forward(x)); }

Tensor encode(const Encoder& encoder, const std::vector<Instance>& instances) {
  if (instances.empty()) throw ShapeError("encode: no instances");
  std::vector<double> values;
  const std::size_t d = instances.front().features.size();
  for (const auto& inst : instances) {
    if (inst.features.size() != d) throw ShapeError("encode: instances of differing dimension");
    values.insert(values.end(), inst.features.begin(), inst.features.end());
  }
  return encode(encoder, Tensor::matrix(instances.size(), d, std::move(values)));
}

Tensor EpisodeRepresentation::group(std::size_t n) const {
  if (n >= n_way) throw ShapeError("representation has no class " + std::to_string(n));
  std::vector<std::size_t> rows(k_shot);
  for (std::size_t k = 0; k < k_shot; ++k) rows[k] = n * k_shot + k;
  return gather_rows(support, rows);
}

// ---------------------------------------------------------------------------
// Training helpers

double TrainConfig::lr_at(std::size_t epoch) const {
  const double boundary = decay_at * static_cast<double>(epochs);
  return static_cast<double>(epoch) < std::floor(boundary) ? lr_initial : lr_final;
}

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  if (epochs == 0) problems.emplace_back("epochs must be positive");
  if (episodes_per_epoch == 0) problems.emplace_back("episodes_per_epoch must be positive");
  if (n_way < 2) problems.emplace_back("n_way must be at least 2");
  if (k_shot == 0) problems.emplace_back("k_shot must be positive");
  if (n_query == 0) problems.emplace_back("n_query must be positive");
  if (d_h == 0) problems.emplace_back("d_h must be positive");
  if (!(lr_initial > 0.0) || !(lr_final > 0.0)) problems.emplace_back("learning rates must be positive");
  if (lr_final > lr_initial) problems.emplace_back("learning-rate schedule must be nonincreasing");
  if (!(decay_at > 0.0 && decay_at <= 1.0)) problems.emplace_back("decay_at must lie in (0, 1]");
  if (meta_batch == 0) problems.emplace_back("meta_batch must be positive");
  if (!(inner_lr >= 0.0)) problems.emplace_back("inner_lr must be nonnegative");
  if (problems.empty()) return;
  std::string msg = "invalid training config:";
  for (const auto& p : problems) msg += " " + p + ";";
  throw ConfigError(msg);
}

void write_training_curve(const std::vector<EpochStats>& curve, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write training curve " + path.string());
  out << "epoch,mean_loss,mean_acc\n";
  for (const auto& s : curve) out << s.epoch << ',' << format_double(s.mean_loss) << ',' << format_double(s.mean_acc) << '\n';
}

Tensor query_cross_entropy(const Tensor& log_probs, const std::vector<std::size_t>& labels) {
  return neg(mean(pick(log_probs, labels)));
}

double query_accuracy(const Tensor& log_probs, const std::vector<std::size_t>& labels) {
  const std::size_t n = log_probs.cols();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j) {
      if (log_probs.at(i, j) > log_probs.at(i, best)) best = j;
    }
    correct += best == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

namespace {

std::vector<std::size_t> layer_sizes_for(std::size_t d_in, const TrainConfig& cfg) {
  std::vector<std::size_t> sizes{d_in};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(cfg.d_h);
  return sizes;
}

void check_loss(double loss, const char* learner, std::size_t epoch, std::size_t episode) {
  if (!std::isfinite(loss)) {
    throw NumericError(std::string(learner) + " training diverged: loss " + std::to_string(loss) + " at epoch " +
                       std::to_string(epoch) + ", episode " + std::to_string(episode));
  }
}

EpisodeSource single_domain_source(const Domain& domain, const std::vector<int>& classes, const TrainConfig& cfg) {
  return [&domain, &classes, cfg](Rng& rng) {
    return sample_episode(domain, classes, cfg.n_way, cfg.k_shot, cfg.n_query, rng);
  };
}

}  // namespace

// ---------------------------------------------------------------------------
// Prototypical network

ProtoForward proto_forward(const Encoder& encoder, const Episode& episode) {
  ProtoForward out;
  out.support_emb = encode(encoder, episode.support_matrix());
  out.query_emb = encode(encoder, episode.query_matrix());
  const Tensor prototypes = group_mean(out.support_emb, episode.k_shot);
  out.log_probs = log_softmax(neg(pairwise_sq_dist(out.query_emb, prototypes)));
  return out;
}

LearnerOutput proto_predict(const ProtoNetModel& model, const Episode& episode) {
  NoGradGuard no_grad;
  auto fwd = proto_forward(model.encoder, episode);
  return {fwd.log_probs, {fwd.support_emb, fwd.query_emb, episode.n_way, episode.k_shot}};
}

LearnerOutput ProtoNetModel::predict(const Episode& episode) const { return proto_predict(*this, episode); }

Checkpoint ProtoNetModel::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.model_kind = "protonet";
  ckpt.rng_seed = seed;
  encoder.write(ckpt);
  return ckpt;
}

TrainResult<ProtoNetModel> proto_train(const Domain& domain, const std::vector<int>& base_classes,
                                       const TrainConfig& cfg) {
  return proto_train(single_domain_source(domain, base_classes, cfg), domain.d_in, cfg);
}

TrainResult<ProtoNetModel> proto_train(const EpisodeSource& source, std::size_t d_in, const TrainConfig& cfg) {
  cfg.validate();
  TrainResult<ProtoNetModel> result{ProtoNetModel(Encoder(layer_sizes_for(d_in, cfg), derive_seed(cfg.seed, "init")),
                                                  cfg.seed),
                                    {}};
  auto& params = result.model.encoder.params();
  AdamState state = make_adam_state(params, cfg.lr_initial);
  Rng rng(derive_seed(cfg.seed, "episodes"));

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    state.lr = cfg.lr_at(epoch);
    double loss_sum = 0.0, acc_sum = 0.0;
    for (std::size_t i = 0; i < cfg.episodes_per_epoch; ++i) {
      const Episode ep = source(rng);
      {
        auto fwd = proto_forward(result.model.encoder, ep);
        Tensor loss = query_cross_entropy(fwd.log_probs, ep.query_labels);
        check_loss(loss.item(), "protonet", epoch, i);
        loss_sum += loss.item();
        acc_sum += query_accuracy(fwd.log_probs, ep.query_labels);
        if (!params.empty()) backward(loss);
      }
      if (!params.empty()) adam_step(params, state);
    }
    const double n = static_cast<double>(cfg.episodes_per_epoch);
    result.curve.push_back({epoch, loss_sum / n, acc_sum / n});
  }
  return result;
}

// ---------------------------------------------------------------------------
// First-order MAML

Tensor AdaptedParams::logits(const Tensor& x) const {
  return add_row(matmul(encoder.forward(x), head_weight), head_bias);
}

std::vector<Tensor> AdaptedParams::all_params() const {
  std::vector<Tensor> all = encoder.params();
  all.push_back(head_weight);
  all.push_back(head_bias);
  return all;
}

AdaptedParams fomaml_adapt(const FomamlModel& model, const Episode& episode, std::size_t steps, double inner_lr) {
  if (episode.support.empty()) throw SamplingError("fomaml_adapt: empty support set");
  AdaptedParams adapted{model.encoder.clone(true), Tensor::zeros({model.encoder.output_dim(), episode.n_way}, true),
                        Tensor::zeros({episode.n_way}, true)};
  const Tensor support = episode.support_matrix();
  const auto labels = episode.support_labels();
  auto params = adapted.all_params();
  EnableGradGuard with_grad;
  for (std::size_t s = 0; s < steps; ++s) {
    {
      Tensor loss = query_cross_entropy(log_softmax(adapted.logits(support)), labels);
      if (!std::isfinite(loss.item())) {
        throw NumericError("fomaml_adapt: non-finite support loss at inner step " + std::to_string(s));
      }
      backward(loss);
    }
    for (auto& p : params) {
      auto w = p.mutable_values();
      auto g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= inner_lr * g[i];
      p.zero_grad();
    }
  }
  return adapted;
}

double fomaml_support_loss(const AdaptedParams& params, const Episode& episode) {
  NoGradGuard no_grad;
  return query_cross_entropy(log_softmax(params.logits(episode.support_matrix())), episode.support_labels()).item();
}

LearnerOutput fomaml_predict(const FomamlModel& model, const Episode& episode) {
  const AdaptedParams adapted = fomaml_adapt(model, episode, model.inner_steps, model.inner_lr);
  NoGradGuard no_grad;
  const Tensor query = episode.query_matrix();
  LearnerOutput out;
  out.log_probs = log_softmax(adapted.logits(query));
  out.rep = {encode(adapted.encoder, episode.support_matrix()), encode(adapted.encoder, query), episode.n_way,
             episode.k_shot};
  return out;
}

LearnerOutput FomamlModel::predict(const Episode& episode) const { return fomaml_predict(*this, episode); }

Checkpoint FomamlModel::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.model_kind = "fomaml";
  ckpt.rng_seed = seed;
  encoder.write(ckpt);
  ckpt.architecture["inner_steps"] = inner_steps;
  ckpt.architecture["inner_lr"] = inner_lr;
  return ckpt;
}

TrainResult<FomamlModel> fomaml_train(const Domain& domain, const std::vector<int>& base_classes,
                                      const TrainConfig& cfg) {
  return fomaml_train(single_domain_source(domain, base_classes, cfg), domain.d_in, cfg);
}

TrainResult<FomamlModel> fomaml_train(const EpisodeSource& source, std::size_t d_in, const TrainConfig& cfg) {
  cfg.validate();
  TrainResult<FomamlModel> result{
      FomamlModel(Encoder(layer_sizes_for(d_in, cfg), derive_seed(cfg.seed, "init")), cfg.inner_steps, cfg.inner_lr,
                  cfg.seed),
      {}};
  auto& meta_params = result.model.encoder.params();
  AdamState state = make_adam_state(meta_params, cfg.lr_initial);
  Rng rng(derive_seed(cfg.seed, "episodes"));

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    state.lr = cfg.lr_at(epoch);
    double loss_sum = 0.0, acc_sum = 0.0;
    std::size_t seen = 0;
    while (seen < cfg.episodes_per_epoch) {
      const std::size_t batch = std::min(cfg.meta_batch, cfg.episodes_per_epoch - seen);
      std::vector<std::vector<double>> meta_grads;
      for (const auto& p : meta_params) meta_grads.emplace_back(p.numel(), 0.0);
      for (std::size_t b = 0; b < batch; ++b) {
        const Episode ep = source(rng);
        AdaptedParams adapted = fomaml_adapt(result.model, ep, cfg.inner_steps, cfg.inner_lr);
        {
          const Tensor log_probs = log_softmax(adapted.logits(ep.query_matrix()));
          Tensor loss = query_cross_entropy(log_probs, ep.query_labels);
          check_loss(loss.item(), "fomaml", epoch, seen + b);
          loss_sum += loss.item();
          acc_sum += query_accuracy(log_probs, ep.query_labels);
          backward(loss);
        }
        // First-order: the query gradient at the adapted point stands in for
        // the meta-gradient.
        auto& adapted_enc = adapted.encoder.params();
        for (std::size_t k = 0; k < adapted_enc.size(); ++k) {
          auto g = adapted_enc[k].grad();
          for (std::size_t i = 0; i < g.size(); ++i) meta_grads[k][i] += g[i] / static_cast<double>(batch);
        }
      }
      if (!meta_params.empty()) adam_step(meta_params, meta_grads, state);
      seen += batch;
    }
    const double n = static_cast<double>(cfg.episodes_per_epoch);
    result.curve.push_back({epoch, loss_sum / n, acc_sum / n});
  }
  return result;
}

// ---------------------------------------------------------------------------

LearnerTrainResult train_learner(const std::string& kind, const EpisodeSource& source, std::size_t d_in,
                                 const TrainConfig& cfg) {
  if (kind == "protonet") {
    auto r = proto_train(source, d_in, cfg);
    return {std::make_shared<ProtoNetModel>(std::move(r.model)), std::move(r.curve)};
  }
  if (kind == "fomaml") {
    auto r = fomaml_train(source, d_in, cfg);
    return {std::make_shared<FomamlModel>(std::move(r.model)), std::move(r.curve)};
  }
  throw ConfigError("unknown learner kind '" + kind + "' (expected protonet or fomaml)");
}

std::shared_ptr<BaseLearner> learner_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.model_kind == "protonet") {
    return std::make_shared<ProtoNetModel>(Encoder::read(ckpt), ckpt.rng_seed);
  }
  if (ckpt.model_kind == "fomaml") {
    try {
      return std::make_shared<FomamlModel>(Encoder::read(ckpt), ckpt.architecture.at("inner_steps").get<std::size_t>(),
                                           ckpt.architecture.at("inner_lr").get<double>(), ckpt.rng_seed);
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("fomaml checkpoint architecture incomplete: ") + e.what());
    }
  }
  throw CheckpointError("checkpoint holds a '" + ckpt.model_kind + "' model, not a base learner");
}

std::shared_ptr<BaseLearner> load_learner(const std::filesystem::path& path) {
  return learner_from_checkpoint(load_params(path));
}

}  // namespace mxml
