#include "mxml/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "mxml/checkpoint.hpp"
#include "mxml/error.hpp"
#include "mxml/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mxml {

std::string to_string(Protocol p) { return p == Protocol::OutOfDistribution ? "ood" : "in_distribution"; }

Domain DomainEntry::build() const {
  if (csv) return load_feature_dataset(*csv, spec.name);
  return make_synthetic_domain(spec, seed);
}

namespace {

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& body) {
  threads = std::min(std::max<std::size_t>(threads, 1), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------
// Config parsing

class Section {
 public:
  Section(const json& j, std::string path, std::vector<std::string>& issues) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
    for (auto it = j_.begin(); it != j_.end(); ++it) keys_.insert(it.key());
    issues_ = &issues;
  }
  ~Section() {
    for (const auto& k : keys_) issues_->push_back("unknown key " + path_ + "." + k);
  }
  Section(const Section&) = delete;
  Section& operator=(const Section&) = delete;

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void read(const std::string& key, T& out) {
    keys_.erase(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path_ + "." + key + " has the wrong type");
    }
  }

  const json& child(const std::string& key) {
    keys_.erase(key);
    return j_.at(key);
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> keys_;
  std::vector<std::string>* issues_;
};

void read_domain_fields(Section& s, DomainEntry& e, const fs::path& base_dir) {
  auto& sp = e.spec;
  s.read("name", sp.name);
  s.read("n_classes", sp.n_classes);
  s.read("d_in", sp.d_in);
  s.read("latent_dim", sp.latent_dim);
  s.read("per_class", sp.per_class);
  s.read("sigma_between", sp.sigma_between);
  s.read("sigma_within", sp.sigma_within);
  s.read("nuisance_sigma", sp.nuisance_sigma);
  s.read("warp_strength", sp.warp_strength);
  std::string transform;
  s.read("transform", transform);
  if (!transform.empty()) {
    try {
      sp.transform = parse_transform_kind(transform);
    } catch (const DataError& err) {
      throw ConfigError(err.what());
    }
  }
  if (s.has("transform_seed")) {
    std::uint64_t ts = 0;
    s.read("transform_seed", ts);
    sp.transform_seed = ts;
  }
  s.read("seed", e.seed);
  if (s.has("csv")) {
    std::string p;
    s.read("csv", p);
    e.csv = fs::path(p).is_absolute() ? fs::path(p) : base_dir / p;
  }
}

DomainEntry parse_domain(const json& j, const DomainEntry& defaults, const std::string& path, std::uint64_t master,
                         const fs::path& base_dir, std::vector<std::string>& issues) {
  DomainEntry e = defaults;
  e.spec.name.clear();
  e.csv.reset();
  bool has_seed = false;
  {
    Section s(j, path, issues);
    has_seed = s.has("seed");
    read_domain_fields(s, e, base_dir);
  }
  if (!has_seed) e.seed = derive_seed(master, "domain:" + e.spec.name);
  return e;
}

}  // namespace

namespace {

void parse_into(ExperimentConfig& cfg, const json& j, const fs::path& base_dir) {
  auto& issues = cfg.parse_issues;
  Section top(j, "config", issues);

  std::string protocol = "ood";
  top.read("protocol", protocol);
  if (protocol == "ood" || protocol == "out_of_distribution") {
    cfg.protocol = Protocol::OutOfDistribution;
  } else if (protocol == "in_distribution" || protocol == "id") {
    cfg.protocol = Protocol::InDistribution;
  } else {
    issues.push_back("protocol must be ood or in_distribution, got '" + protocol + "'");
  }
  top.read("seed", cfg.seed);
  std::string out_dir;
  top.read("output_dir", out_dir);
  if (!out_dir.empty()) cfg.output_dir = fs::path(out_dir).is_absolute() ? fs::path(out_dir) : (base_dir / out_dir).lexically_normal();

  if (top.has("domains")) {
    Section d(top.child("domains"), "domains", issues);
    DomainEntry defaults;
    if (d.has("defaults")) {
      Section s(d.child("defaults"), "domains.defaults", issues);
      read_domain_fields(s, defaults, base_dir);
    }
    if (d.has("train")) {
      const auto& arr = d.child("train");
      if (!arr.is_array()) throw ConfigError("domains.train must be an array");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        cfg.train_domains.push_back(
            parse_domain(arr[i], defaults, "domains.train[" + std::to_string(i) + "]", cfg.seed, base_dir, issues));
      }
    }
    if (d.has("test")) {
      const auto& arr = d.child("test");
      if (!arr.is_array()) throw ConfigError("domains.test must be an array");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        cfg.test_domains.push_back(
            parse_domain(arr[i], defaults, "domains.test[" + std::to_string(i) + "]", cfg.seed, base_dir, issues));
      }
    }
    if (d.has("target")) {
      cfg.target = parse_domain(d.child("target"), defaults, "domains.target", cfg.seed, base_dir, issues);
    }
  }

  cfg.split.seed = derive_seed(cfg.seed, "splits");
  if (top.has("splits")) {
    Section s(top.child("splits"), "splits", issues);
    s.read("base_fraction", cfg.split.base_fraction);
    s.read("wpn_fraction", cfg.split.wpn_fraction);
    s.read("seed", cfg.split.seed);
    s.read("id_fractions", cfg.id_fractions);
    std::string t = "train";
    s.read("target_wpn_classes", t);
    if (t == "none") {
      cfg.target_wpn_classes = TargetWpnClasses::None;
    } else if (t == "train") {
      cfg.target_wpn_classes = TargetWpnClasses::Train;
    } else if (t == "validation") {
      cfg.target_wpn_classes = TargetWpnClasses::Validation;
    } else {
      issues.push_back("splits.target_wpn_classes must be none, train or validation, got '" + t + "'");
    }
  }

  if (top.has("learner")) {
    Section s(top.child("learner"), "learner", issues);
    auto& l = cfg.learner;
    s.read("kind", cfg.learner_kind);
    s.read("epochs", l.epochs);
    s.read("episodes_per_epoch", l.episodes_per_epoch);
    s.read("n_way", l.n_way);
    s.read("k_shot", l.k_shot);
    s.read("n_query", l.n_query);
    s.read("hidden", l.hidden);
    s.read("d_h", l.d_h);
    s.read("lr_initial", l.lr_initial);
    s.read("lr_final", l.lr_final);
    s.read("decay_at", l.decay_at);
    s.read("meta_batch", l.meta_batch);
    s.read("inner_steps", l.inner_steps);
    s.read("inner_lr", l.inner_lr);
  }

  if (top.has("wpn")) {
    Section s(top.child("wpn"), "wpn", issues);
    s.read("d_z", cfg.d_z);
    s.read("lambda", cfg.lambda);
    s.read("lr", cfg.wpn.lr);
    s.read("steps", cfg.wpn.steps);
    std::string mode = "normalized";
    s.read("mode", mode);
    try {
      cfg.mode = parse_combination_mode(mode);
    } catch (const ConfigError& e) {
      issues.push_back(std::string("wpn.mode: ") + e.what());
    }
    s.read("transductive", cfg.transductive);
  }

  cfg.eval.seed = derive_seed(cfg.seed, "eval");
  if (top.has("eval")) {
    Section s(top.child("eval"), "eval", issues);
    s.read("n_way", cfg.eval.n_way);
    s.read("k_shot", cfg.eval.k_shot);
    s.read("n_query", cfg.eval.n_query);
    s.read("episodes", cfg.eval.episodes);
    s.read("seed", cfg.eval.seed);
    s.read("threads", cfg.eval.threads);
  }
  // WPN episodes have the evaluation task shape.
  cfg.wpn.n_way = cfg.eval.n_way;
  cfg.wpn.k_shot = cfg.eval.k_shot;
  cfg.wpn.n_query = cfg.eval.n_query;

  if (top.has("baselines")) {
    Section s(top.child("baselines"), "baselines", issues);
    s.read("dataset_specific", cfg.baselines.dataset_specific);
    s.read("single", cfg.baselines.single);
    s.read("uniform", cfg.baselines.uniform);
    s.read("non_transductive", cfg.baselines.non_transductive);
  }
}

}  // namespace

ExperimentConfig parse_config(const json& j, const fs::path& base_dir) {
  ExperimentConfig cfg;
  parse_into(cfg, j, base_dir);
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j, path.parent_path());
}

namespace {

json domain_to_json(const DomainEntry& e) {
  json j;
  j["name"] = e.spec.name;
  if (e.csv) {
    j["csv"] = e.csv->generic_string();
    return j;
  }
  const auto& s = e.spec;
  j["n_classes"] = s.n_classes;
  j["d_in"] = s.d_in;
  j["latent_dim"] = s.latent_dim;
  j["per_class"] = s.per_class;
  j["sigma_between"] = s.sigma_between;
  j["sigma_within"] = s.sigma_within;
  j["nuisance_sigma"] = s.nuisance_sigma;
  j["warp_strength"] = s.warp_strength;
  j["transform"] = to_string(s.transform);
  if (s.transform_seed) j["transform_seed"] = *s.transform_seed;
  j["seed"] = e.seed;
  return j;
}

}  // namespace

json config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["protocol"] = to_string(cfg.protocol);
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir.generic_string();
  json domains;
  domains["train"] = json::array();
  for (const auto& d : cfg.train_domains) domains["train"].push_back(domain_to_json(d));
  domains["test"] = json::array();
  for (const auto& d : cfg.test_domains) domains["test"].push_back(domain_to_json(d));
  if (cfg.target) domains["target"] = domain_to_json(*cfg.target);
  j["domains"] = domains;
  const char* twc[] = {"none", "train", "validation"};
  j["splits"] = {{"base_fraction", cfg.split.base_fraction},
                 {"wpn_fraction", cfg.split.wpn_fraction},
                 {"seed", cfg.split.seed},
                 {"id_fractions", cfg.id_fractions},
                 {"target_wpn_classes", twc[static_cast<int>(cfg.target_wpn_classes)]}};
  const auto& l = cfg.learner;
  j["learner"] = {{"kind", cfg.learner_kind}, {"epochs", l.epochs},         {"episodes_per_epoch", l.episodes_per_epoch},
                  {"n_way", l.n_way},         {"k_shot", l.k_shot},         {"n_query", l.n_query},
                  {"hidden", l.hidden},       {"d_h", l.d_h},               {"lr_initial", l.lr_initial},
                  {"lr_final", l.lr_final},   {"decay_at", l.decay_at},     {"meta_batch", l.meta_batch},
                  {"inner_steps", l.inner_steps}, {"inner_lr", l.inner_lr}};
  j["wpn"] = {{"d_z", cfg.d_z},   {"lambda", cfg.lambda},           {"lr", cfg.wpn.lr},
              {"steps", cfg.wpn.steps}, {"mode", to_string(cfg.mode)}, {"transductive", cfg.transductive}};
  j["eval"] = {{"n_way", cfg.eval.n_way},       {"k_shot", cfg.eval.k_shot}, {"n_query", cfg.eval.n_query},
               {"episodes", cfg.eval.episodes}, {"seed", cfg.eval.seed},     {"threads", cfg.eval.threads}};
  j["baselines"] = {{"dataset_specific", cfg.baselines.dataset_specific},
                    {"single", cfg.baselines.single},
                    {"uniform", cfg.baselines.uniform},
                    {"non_transductive", cfg.baselines.non_transductive}};
  return j;
}

// ---------------------------------------------------------------------------
// Validation

std::vector<std::string> ExperimentConfig::problems() const {
  std::vector<std::string> p = parse_issues;
  const bool ood = protocol == Protocol::OutOfDistribution;

  std::vector<const DomainEntry*> all;
  for (const auto& d : train_domains) all.push_back(&d);
  for (const auto& d : test_domains) all.push_back(&d);
  if (target) all.push_back(&*target);

  if (train_domains.empty()) p.push_back("at least one training domain is required");
  if (ood) {
    if (test_domains.empty()) p.push_back("the out-of-distribution protocol needs at least one test domain");
    if (target) p.push_back("domains.target is only used by the in-distribution protocol");
    std::set<std::string> train_names;
    for (const auto& d : train_domains) train_names.insert(d.name());
    for (const auto& d : test_domains) {
      if (train_names.count(d.name())) {
        p.push_back("domain '" + d.name() + "' is both a training and a test domain");
      }
    }
  } else {
    if (!target) p.push_back("the in-distribution protocol needs domains.target");
    if (!test_domains.empty()) p.push_back("domains.test is not used by the in-distribution protocol");
    if (id_fractions.size() != 3) {
      p.push_back("splits.id_fractions needs 3 entries (train, validation, test)");
    } else {
      double total = 0.0;
      for (double f : id_fractions) {
        if (!(f > 0.0)) p.push_back("splits.id_fractions entries must be positive");
        total += f;
      }
      if (total > 1.0 + 1e-9) p.push_back("splits.id_fractions sum to more than 1");
    }
  }

  std::set<std::string> seen;
  for (const auto* d : all) {
    if (d->name().empty()) {
      p.push_back("every domain needs a name");
      continue;
    }
    if (d->name().find_first_of(",+\n\"") != std::string::npos) {
      p.push_back("domain name '" + d->name() + "' may not contain ',', '+', quotes or newlines");
    }
    if (!seen.insert(d->name()).second) p.push_back("duplicate domain name '" + d->name() + "'");
    if (!d->csv) {
      for (const auto& sp : spec_problems(d->spec)) p.push_back("domain '" + d->name() + "': " + sp);
    }
  }
  std::set<std::size_t> dims;
  for (const auto* d : all) {
    if (!d->csv) dims.insert(d->spec.d_in);
  }
  if (dims.size() > 1) p.push_back("all synthetic domains must share d_in");

  if (!(split.base_fraction > 0.0)) p.push_back("splits.base_fraction must be positive");
  if (!(split.wpn_fraction > 0.0)) p.push_back("splits.wpn_fraction must be positive");
  if (split.base_fraction + split.wpn_fraction > 1.0 + 1e-9) p.push_back("splits fractions sum to more than 1");

  if (learner_kind != "protonet" && learner_kind != "fomaml") {
    p.push_back("learner.kind must be protonet or fomaml, got '" + learner_kind + "'");
  }
  try {
    learner.validate();
  } catch (const Error& e) {
    p.push_back(std::string("learner: ") + e.what());
  }

  if (d_z == 0) p.push_back("wpn.d_z must be positive");
  if (!(lambda >= 0.0)) p.push_back("wpn.lambda must be nonnegative");
  if (!(wpn.lr > 0.0)) p.push_back("wpn.lr must be positive");
  if (wpn.steps == 0) p.push_back("wpn.steps must be positive");

  if (eval.n_way < 2) p.push_back("eval.n_way must be at least 2");
  if (eval.k_shot == 0) p.push_back("eval.k_shot must be positive");
  if (eval.n_query == 0) p.push_back("eval.n_query must be positive");
  if (eval.episodes == 0) p.push_back("eval.episodes must be positive");
  if (eval.threads == 0) p.push_back("eval.threads must be positive");

  // Sampling feasibility of synthetic domains.
  auto split_size = [](double f, std::size_t n) { return static_cast<std::size_t>(std::lround(f * n)); };
  auto per_episode = [](std::size_t n, std::size_t k, std::size_t l) { return k + (l + n - 1) / std::max<std::size_t>(n, 1); };
  const std::size_t need_eval = per_episode(eval.n_way, eval.k_shot, eval.n_query);
  const std::size_t need_train = per_episode(learner.n_way, learner.k_shot, learner.n_query);
  for (const auto& d : train_domains) {
    if (d.csv) continue;
    const auto n = d.spec.n_classes;
    if (split_size(split.base_fraction, n) < learner.n_way) {
      p.push_back("domain '" + d.name() + "': base split has fewer classes than learner.n_way");
    }
    if (split_size(split.wpn_fraction, n) < eval.n_way) {
      p.push_back("domain '" + d.name() + "': WPN split has fewer classes than eval.n_way");
    }
    if (d.spec.per_class < std::max(need_eval, need_train)) {
      p.push_back("domain '" + d.name() + "': per_class too small for the episode shape");
    }
  }
  if (ood) {
    for (const auto& d : test_domains) {
      if (d.csv) continue;
      if (d.spec.n_classes < eval.n_way) p.push_back("domain '" + d.name() + "': fewer classes than eval.n_way");
      if (d.spec.per_class < need_eval) {
        p.push_back("domain '" + d.name() + "': per_class too small for the episode shape");
      }
    }
  } else if (target && !target->csv && id_fractions.size() == 3) {
    const auto n = target->spec.n_classes;
    if (split_size(id_fractions[0], n) < learner.n_way) {
      p.push_back("target '" + target->name() + "': meta-train split has fewer classes than learner.n_way");
    }
    if (split_size(id_fractions[2], n) < eval.n_way) {
      p.push_back("target '" + target->name() + "': meta-test split has fewer classes than eval.n_way");
    }
    if (target->spec.per_class < std::max(need_eval, need_train)) {
      p.push_back("target '" + target->name() + "': per_class too small for the episode shape");
    }
  }
  return p;
}

void ExperimentConfig::validate() const {
  const auto p = problems();
  if (p.empty()) return;
  std::string msg = "invalid experiment config (" + std::to_string(p.size()) + " problem" +
                    (p.size() == 1 ? "" : "s") + "):";
  for (const auto& s : p) msg += "\n  - " + s;
  throw ConfigError(msg);
}

// ---------------------------------------------------------------------------
// Evaluation

std::pair<double, double> mean_ci95(std::span<const double> values) {
  if (values.empty()) throw ConfigError("mean_ci95 of no values");
  const double n = static_cast<double>(values.size());
  double s = 0.0;
  for (double v : values) s += v;
  const double mean = s / n;
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  return {mean, 1.96 * sd / std::sqrt(n)};
}

std::vector<EvalResult> evaluate_models(std::span<const EvalModel> models,
                                        std::span<const std::shared_ptr<const BaseLearner>> learners,
                                        const Domain& domain, std::span<const int> classes, const EvalSettings& eval,
                                        std::uint64_t seed) {
  if (models.empty()) throw ConfigError("nothing to evaluate");
  if (eval.episodes == 0) throw ConfigError("evaluation needs at least one episode");
  const std::size_t n_eps = eval.episodes;
  std::vector<std::vector<EpisodeVerdict>> verdicts(models.size(), std::vector<EpisodeVerdict>(n_eps));

  parallel_for(n_eps, eval.threads, [&](std::size_t e) {
    Rng rng(derive_seed(seed, "eval", e));
    const Episode ep = sample_episode(domain, classes, eval.n_way, eval.k_shot, eval.n_query, rng);
    std::vector<LearnerOutput> outs;
    outs.reserve(learners.size());
    for (const auto& l : learners) outs.push_back(l->predict(ep));
    for (std::size_t m = 0; m < models.size(); ++m) verdicts[m][e] = models[m].judge(ep, outs);
  });

  std::vector<EvalResult> results;
  for (std::size_t m = 0; m < models.size(); ++m) {
    EvalResult r;
    r.model = models[m].name;
    r.train_domains = models[m].train_domains;
    r.test_domain = domain.name;
    r.n_way = eval.n_way;
    r.k_shot = eval.k_shot;
    r.queries = eval.n_query;
    r.episodes = n_eps;
    for (const auto& v : verdicts[m]) r.episode_acc.push_back(v.accuracy);
    std::tie(r.mean_acc, r.ci95) = mean_ci95(r.episode_acc);
    const auto& names = models[m].coefficient_names;
    if (!names.empty()) {
      for (const auto& v : verdicts[m]) r.episode_coefficients.push_back(v.coefficients);
    }
    for (std::size_t k = 0; k < names.size(); ++k) {
      std::vector<double> w;
      for (const auto& v : verdicts[m]) {
        if (v.coefficients.size() != names.size()) {
          throw ShapeError("model '" + r.model + "' reported " + std::to_string(v.coefficients.size()) +
                           " coefficients for " + std::to_string(names.size()) + " learners");
        }
        w.push_back(v.coefficients[k]);
      }
      double s = 0.0;
      for (double x : w) s += x;
      const double mean = s / static_cast<double>(w.size());
      double ss = 0.0;
      for (double x : w) ss += (x - mean) * (x - mean);
      const double sd = w.size() > 1 ? std::sqrt(ss / static_cast<double>(w.size() - 1)) : 0.0;
      r.coefficients.push_back({names[k], mean, sd, w.size()});
    }
    results.push_back(std::move(r));
  }
  return results;
}

EvalResult evaluate(const std::string& name, const Predictor& predict, const Domain& domain,
                    std::span<const int> classes, const EvalSettings& eval, std::uint64_t seed) {
  // Coefficient names are only known once the first prediction arrives.
  Rng probe_rng(derive_seed(seed, "eval", 0));
  const Episode probe = sample_episode(domain, classes, eval.n_way, eval.k_shot, eval.n_query, probe_rng);
  const std::size_t m = predict(probe).coefficients.normalized.size();
  EvalModel model;
  model.name = name;
  for (std::size_t k = 0; k < m; ++k) model.coefficient_names.push_back("learner" + std::to_string(k));
  model.judge = [&predict](const Episode& ep, std::span<const LearnerOutput>) {
    const auto p = predict(ep);
    return EpisodeVerdict{100.0 * query_accuracy(p.probs, ep.query_labels), p.coefficients.normalized};
  };
  return evaluate_models(std::span<const EvalModel>(&model, 1), {}, domain, classes, eval, seed).front();
}

SignTest sign_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("sign_test needs paired samples of equal length");
  SignTest t;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > b[i]) {
      ++t.wins;
    } else if (a[i] < b[i]) {
      ++t.losses;
    } else {
      ++t.ties;
    }
  }
  const std::size_t n = t.wins + t.losses;
  if (n == 0) return t;
  const std::size_t k = std::min(t.wins, t.losses);
  // P(X <= k) for X ~ Binomial(n, 1/2), summed in log space.
  const double log_half_n = static_cast<double>(n) * std::log(0.5);
  double tail = 0.0;
  for (std::size_t i = 0; i <= k; ++i) {
    const double log_c = std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(i) + 1.0) -
                         std::lgamma(static_cast<double>(n - i) + 1.0);
    tail += std::exp(log_c + log_half_n);
  }
  t.p_value = std::min(1.0, 2.0 * tail);
  return t;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  return in;
}

double parse_field(const std::string& s, const fs::path& path) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(path.string() + ": not a number: '" + s + "'");
  }
}

}  // namespace

void write_results_csv(std::span<const EvalResult> results, const fs::path& path) {
  auto out = open_out(path);
  out << "model,train_domains,test_domain,n_way,k_shot,queries,episodes,mean_acc,ci95\n";
  for (const auto& r : results) {
    out << r.model << ',' << r.train_domains << ',' << r.test_domain << ',' << r.n_way << ',' << r.k_shot << ','
        << r.queries << ',' << r.episodes << ',' << fixed6(r.mean_acc) << ',' << fixed6(r.ci95) << '\n';
  }
}

void write_coefficients_csv(std::span<const EvalResult> results, const fs::path& path) {
  auto out = open_out(path);
  out << "test_domain,learner,weight_mean,weight_std,episodes\n";
  for (const auto& r : results) {
    for (const auto& c : r.coefficients) {
      out << r.test_domain << ',' << c.learner << ',' << fixed6(c.mean) << ',' << fixed6(c.std) << ',' << c.episodes
          << '\n';
    }
  }
}

void write_episodes_csv(std::span<const EvalResult> results, const fs::path& path) {
  auto out = open_out(path);
  out << "model,test_domain,episode,acc\n";
  for (const auto& r : results) {
    for (std::size_t e = 0; e < r.episode_acc.size(); ++e) {
      out << r.model << ',' << r.test_domain << ',' << e << ',' << format_double(r.episode_acc[e]) << '\n';
    }
  }
}

void write_episode_coefficients_csv(std::span<const EvalResult> results, const fs::path& path) {
  auto out = open_out(path);
  out << "test_domain,model,episode,learner,weight\n";
  for (const auto& r : results) {
    for (std::size_t e = 0; e < r.episode_coefficients.size(); ++e) {
      for (std::size_t k = 0; k < r.coefficients.size(); ++k) {
        out << r.test_domain << ',' << r.model << ',' << e << ',' << r.coefficients[k].learner << ','
            << format_double(r.episode_coefficients[e][k]) << '\n';
      }
    }
  }
}

std::vector<EvalResult> read_results_csv(const fs::path& path) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line) || line != "model,train_domains,test_domain,n_way,k_shot,queries,episodes,mean_acc,ci95") {
    throw DataError(path.string() + ": unexpected results header");
  }
  std::vector<EvalResult> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 9) throw DataError(path.string() + ": ragged row '" + line + "'");
    EvalResult r;
    r.model = f[0];
    r.train_domains = f[1];
    r.test_domain = f[2];
    r.n_way = static_cast<std::size_t>(parse_field(f[3], path));
    r.k_shot = static_cast<std::size_t>(parse_field(f[4], path));
    r.queries = static_cast<std::size_t>(parse_field(f[5], path));
    r.episodes = static_cast<std::size_t>(parse_field(f[6], path));
    r.mean_acc = parse_field(f[7], path);
    r.ci95 = parse_field(f[8], path);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<std::pair<std::string, CoefficientStat>> read_coefficients_csv(const fs::path& path) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line) || line != "test_domain,learner,weight_mean,weight_std,episodes") {
    throw DataError(path.string() + ": unexpected coefficients header");
  }
  std::vector<std::pair<std::string, CoefficientStat>> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 5) throw DataError(path.string() + ": ragged row '" + line + "'");
    out.push_back({f[0],
                   {f[1], parse_field(f[2], path), parse_field(f[3], path),
                    static_cast<std::size_t>(parse_field(f[4], path))}});
  }
  return out;
}

std::string render_report(std::span<const EvalResult> results,
                          std::span<const std::pair<std::string, CoefficientStat>> coefficients,
                          const std::string& preamble) {
  if (results.empty()) throw ConfigError("cannot render a report without results");
  std::vector<std::string> models, domains;
  std::map<std::pair<std::string, std::string>, const EvalResult*> cell;
  std::map<std::string, std::string> trained_on;
  for (const auto& r : results) {
    if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);
    if (std::find(domains.begin(), domains.end(), r.test_domain) == domains.end()) domains.push_back(r.test_domain);
    cell[{r.model, r.test_domain}] = &r;
    trained_on.emplace(r.model, r.train_domains);
  }

  std::ostringstream os;
  os << "# Few-shot evaluation report\n\n";
  if (!preamble.empty()) os << preamble << "\n\n";
  const auto& first = results.front();
  os << "Accuracy (%) with 95% confidence half-width, " << first.n_way << "-way " << first.k_shot << "-shot, "
     << first.queries << " queries, " << first.episodes << " episodes per meta-test domain.\n\n";
  os << "| Model | Meta-train |";
  for (const auto& d : domains) os << ' ' << d << " |";
  os << "\n|---|---|";
  for (std::size_t i = 0; i < domains.size(); ++i) os << "---|";
  os << '\n';
  for (const auto& m : models) {
    os << "| " << m << " | " << trained_on[m] << " |";
    for (const auto& d : domains) {
      auto it = cell.find({m, d});
      if (it == cell.end()) {
        os << " - |";
      } else {
        os << ' ' << fixed6(it->second->mean_acc) << " (" << fixed6(it->second->ci95) << ") |";
      }
    }
    os << '\n';
  }

  if (!coefficients.empty()) {
    std::vector<std::string> learners, cdomains;
    std::map<std::pair<std::string, std::string>, CoefficientStat> ccell;
    for (const auto& [d, c] : coefficients) {
      if (std::find(learners.begin(), learners.end(), c.learner) == learners.end()) learners.push_back(c.learner);
      if (std::find(cdomains.begin(), cdomains.end(), d) == cdomains.end()) cdomains.push_back(d);
      ccell[{c.learner, d}] = c;
    }
    os << "\n## Mixture coefficients\n\nMean (standard deviation) over the evaluation episodes.\n\n| Learner |";
    for (const auto& d : cdomains) os << ' ' << d << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < cdomains.size(); ++i) os << "---|";
    os << '\n';
    for (const auto& l : learners) {
      os << "| " << l << " |";
      for (const auto& d : cdomains) {
        auto it = ccell.find({l, d});
        if (it == ccell.end()) {
          os << " - |";
        } else {
          os << ' ' << fixed6(it->second.mean) << " (" << fixed6(it->second.std) << ") |";
        }
      }
      os << '\n';
    }
  }
  return os.str();
}

void emit_report(std::span<const EvalResult> results, const fs::path& dir, const std::string& preamble) {
  if (results.empty()) throw ConfigError("cannot emit a report without results");
  write_results_csv(results, dir / "results.csv");
  write_coefficients_csv(results, dir / "coefficients.csv");
  const auto coeffs = read_coefficients_csv(dir / "coefficients.csv");
  auto out = open_out(dir / "report.md");
  out << render_report(results, coeffs, preamble);
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

struct Member {
  std::string name;          // domain the learner was trained on
  const Domain* domain = nullptr;
  std::vector<int> classes;  // base classes
};

// Everything derivable from the config alone.
struct Setup {
  std::vector<Domain> train;
  std::vector<Domain> test;
  std::optional<Domain> target;
  std::vector<ClassSplit> splits;               // per train domain
  std::vector<std::vector<int>> target_parts;   // meta-train / validation / meta-test
  std::vector<Member> members;
  std::vector<DomainClasses> wpn_domains;
  std::vector<DomainClasses> pooled_domains;
  std::vector<std::string> member_names;

  std::string train_label() const { return join(member_names, "+"); }
};

std::unique_ptr<Setup> build_setup(const ExperimentConfig& cfg) {
  cfg.validate();
  auto s = std::make_unique<Setup>();
  for (const auto& d : cfg.train_domains) s->train.push_back(d.build());
  for (const auto& d : cfg.test_domains) s->test.push_back(d.build());
  if (cfg.protocol == Protocol::InDistribution) s->target = cfg.target->build();

  const std::size_t d_in = s->train.front().d_in;
  auto check_dim = [&](const Domain& d) {
    if (d.d_in != d_in) {
      throw ConfigError("domain '" + d.name + "' has " + std::to_string(d.d_in) + " features, expected " +
                        std::to_string(d_in));
    }
  };
  for (const auto& d : s->train) check_dim(d);
  for (const auto& d : s->test) check_dim(d);
  if (s->target) check_dim(*s->target);

  for (const auto& d : s->train) {
    SplitConfig sc = cfg.split;
    sc.seed = derive_seed(cfg.split.seed, "split:" + d.name);
    s->splits.push_back(split_classes(d, sc));
  }
  for (std::size_t i = 0; i < s->train.size(); ++i) {
    s->members.push_back({s->train[i].name, &s->train[i], s->splits[i].base});
    s->wpn_domains.push_back({&s->train[i], s->splits[i].wpn});
    s->pooled_domains.push_back({&s->train[i], s->splits[i].base});
  }
  if (s->target) {
    s->target_parts = partition_classes(*s->target, cfg.id_fractions, derive_seed(cfg.split.seed, "split:" + s->target->name));
    s->members.push_back({s->target->name, &*s->target, s->target_parts[0]});
    s->pooled_domains.push_back({&*s->target, s->target_parts[0]});
    if (cfg.target_wpn_classes == TargetWpnClasses::Train) {
      s->wpn_domains.push_back({&*s->target, s->target_parts[0]});
    } else if (cfg.target_wpn_classes == TargetWpnClasses::Validation) {
      s->wpn_domains.push_back({&*s->target, s->target_parts[1]});
    }
  }
  for (const auto& m : s->members) s->member_names.push_back(m.name);
  return s;
}

fs::path member_checkpoint(const std::string& name) { return fs::path("checkpoints") / ("specific_" + name + ".json"); }

void write_curve(const std::vector<EpochStats>& curve, const fs::path& path) {
  fs::create_directories(path.parent_path());
  write_training_curve(curve, path);
}

void write_loss_curve(const std::vector<double>& losses, const fs::path& path) {
  auto out = open_out(path);
  out << "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) out << i << ',' << format_double(losses[i]) << '\n';
}

TrainConfig learner_config(const ExperimentConfig& cfg, const std::string& tag) {
  TrainConfig tc = cfg.learner;
  tc.seed = derive_seed(cfg.seed, tag);
  return tc;
}

std::string preamble_for(const ExperimentConfig& cfg, const Setup* setup) {
  std::ostringstream os;
  if (cfg.protocol == Protocol::OutOfDistribution) {
    os << "Protocol: out-of-distribution. Base learners are trained on the base class split of each meta-train "
          "domain and the weight prediction network on the held-out WPN split; meta-test domains are unseen.";
  } else {
    os << "Protocol: in-distribution. The target domain is split into meta-train/validation/meta-test classes";
    if (setup && !setup->target_parts.empty()) {
      os << " (" << setup->target_parts[0].size() << "/" << setup->target_parts[1].size() << "/"
         << setup->target_parts[2].size() << ")";
    }
    os << "; evaluation uses its meta-test classes only. The validation classes are reported but not used for model "
          "selection.";
  }
  os << "\nCombination mode: " << to_string(cfg.mode) << ".";
  if (cfg.eval.episodes != 600) {
    os << "\nEvaluation uses " << cfg.eval.episodes << " episodes per domain instead of the customary 600.";
  }
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
}

}  // namespace

void train_base_stage(const ExperimentConfig& cfg, const StageLog& log) {
  const auto setup = build_setup(cfg);
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir / "checkpoints");
  write_text(dir / "config.json", config_to_json(cfg).dump(2) + "\n");

  struct Job {
    std::string name;
    std::vector<DomainClasses> domains;
  };
  std::vector<Job> jobs;
  for (const auto& m : setup->members) jobs.push_back({"specific_" + m.name, {{m.domain, m.classes}}});
  if (cfg.baselines.single) jobs.push_back({"single", setup->pooled_domains});

  std::vector<LearnerTrainResult> trained(jobs.size());
  parallel_for(jobs.size(), cfg.eval.threads, [&](std::size_t i) {
    trained[i] = single_pooled_train(jobs[i].domains, learner_config(cfg, "learner:" + jobs[i].name), cfg.learner_kind);
  });
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    save_params(trained[i].learner->to_checkpoint(), dir / "checkpoints" / (jobs[i].name + ".json"));
    write_curve(trained[i].curve, dir / "curves" / (jobs[i].name + ".csv"));
    const auto& last = trained[i].curve.back();
    log.info("trained " + jobs[i].name + ": final epoch loss " + fixed6(last.mean_loss) + ", accuracy " +
             fixed6(100.0 * last.mean_acc) + "%");
  }
}

void train_wpn_stage(const ExperimentConfig& cfg, const StageLog& log) {
  const auto setup = build_setup(cfg);
  const fs::path dir = cfg.output_dir;

  EnsembleModel ensemble;
  EnsembleManifest manifest;
  for (const auto& m : setup->members) {
    const auto rel = member_checkpoint(m.name);
    ensemble.learners.push_back(load_learner(dir / rel));
    manifest.members.push_back({rel, cfg.learner_kind, m.name});
  }
  ensemble.mode = cfg.mode;

  std::vector<bool> variants{cfg.transductive};
  if (cfg.transductive && cfg.baselines.non_transductive) variants.push_back(false);
  for (bool transductive : variants) {
    const std::string tag = transductive ? "wpn_trans" : "wpn_nontrans";
    ensemble.transductive = transductive;
    ensemble.wpn = WpnParams::init(cfg.learner.d_h, cfg.d_z, cfg.lambda, derive_seed(cfg.seed, "wpn-init"));
    WpnTrainConfig wc = cfg.wpn;
    wc.seed = derive_seed(cfg.seed, "wpn-train");
    const auto result = train_wpn(ensemble, setup->wpn_domains, wc);
    save_params(result.wpn.to_checkpoint(wc.seed), dir / "checkpoints" / (tag + ".json"));
    write_loss_curve(result.loss_curve, dir / "curves" / (tag + ".csv"));

    manifest.wpn_checkpoint = fs::path("checkpoints") / (tag + ".json");
    manifest.mode = cfg.mode;
    manifest.transductive = transductive;
    save_manifest(manifest, dir / (transductive ? "ensemble.json" : "ensemble_nontrans.json"));

    const std::size_t n = result.loss_curve.size();
    const std::size_t w = std::max<std::size_t>(1, n / 10);
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < w; ++i) {
      head += result.loss_curve[i];
      tail += result.loss_curve[n - 1 - i];
    }
    log.info("trained " + tag + ": loss " + fixed6(head / w) + " -> " + fixed6(tail / w));
  }
}

std::vector<EvalResult> eval_stage(const ExperimentConfig& cfg, const StageLog& log) {
  const auto setup = build_setup(cfg);
  const fs::path dir = cfg.output_dir;

  const EnsembleModel main = load_ensemble(dir / "ensemble.json");
  std::optional<EnsembleModel> other;
  if (cfg.transductive && cfg.baselines.non_transductive) other = load_ensemble(dir / "ensemble_nontrans.json");
  if (main.transductive != cfg.transductive || main.mode != cfg.mode) {
    throw ConfigError("the trained ensemble uses mode " + to_string(main.mode) + ", transductive " +
                      (main.transductive ? "true" : "false") + "; rerun train-wpn with the current settings");
  }
  const std::size_t m = main.learners.size();
  if (m != setup->members.size()) throw ConfigError("ensemble manifest does not match the configured domains");

  std::vector<std::shared_ptr<const BaseLearner>> learners = main.learners;
  std::size_t single_index = 0;
  if (cfg.baselines.single) {
    single_index = learners.size();
    learners.push_back(load_learner(dir / "checkpoints" / "single.json"));
  }

  const std::string all = setup->train_label();
  std::vector<EvalModel> models;
  if (cfg.baselines.dataset_specific) {
    for (std::size_t i = 0; i < m; ++i) {
      models.push_back({"specific:" + setup->member_names[i], setup->member_names[i], {},
                        [i](const Episode& ep, std::span<const LearnerOutput> outs) {
                          return EpisodeVerdict{100.0 * query_accuracy(outs[i].log_probs, ep.query_labels), {}};
                        }});
    }
  }
  if (cfg.baselines.single) {
    models.push_back({"single", all, {}, [single_index](const Episode& ep, std::span<const LearnerOutput> outs) {
                        return EpisodeVerdict{100.0 * query_accuracy(outs[single_index].log_probs, ep.query_labels),
                                              {}};
                      }});
  }
  if (cfg.baselines.uniform) {
    models.push_back({"uniform", all, {}, [m](const Episode& ep, std::span<const LearnerOutput> outs) {
                        const Tensor p = uniform_average(outs.first(m));
                        return EpisodeVerdict{100.0 * query_accuracy(p, ep.query_labels), {}};
                      }});
  }
  auto mixture_model = [&](const EnsembleModel& e, std::vector<std::string> coef_names) {
    return EvalModel{e.transductive ? "mxml_trans" : "mxml_nontrans", all, std::move(coef_names),
                     [&e, m](const Episode& ep, std::span<const LearnerOutput> outs) {
                       const auto pred = mxml_combine(e.wpn, outs.first(m), e.mode, e.transductive);
                       return EpisodeVerdict{100.0 * query_accuracy(pred.probs, ep.query_labels),
                                             pred.coefficients.normalized};
                     }};
  };
  const std::size_t main_index = models.size();
  models.push_back(mixture_model(main, setup->member_names));
  if (other) models.push_back(mixture_model(*other, {}));

  struct Target {
    const Domain* domain;
    std::vector<int> classes;
  };
  std::vector<Target> targets;
  if (cfg.protocol == Protocol::OutOfDistribution) {
    for (const auto& d : setup->test) targets.push_back({&d, d.class_ids()});
  } else {
    targets.push_back({&*setup->target, setup->target_parts[2]});
  }

  std::vector<EvalResult> results;
  std::vector<EvalResult> coefficient_rows;
  const std::string preamble = preamble_for(cfg, setup.get());
  for (const auto& t : targets) {
    auto rs = evaluate_models(models, learners, *t.domain, t.classes, cfg.eval,
                              derive_seed(cfg.eval.seed, "domain:" + t.domain->name));
    for (std::size_t i = 0; i < rs.size(); ++i) {
      log.info(t.domain->name + " / " + rs[i].model + ": " + fixed6(rs[i].mean_acc) + " +- " + fixed6(rs[i].ci95));
      if (i == main_index) coefficient_rows.push_back(rs[i]);
      results.push_back(std::move(rs[i]));
    }
    // Flushed per domain so an abort keeps what finished.
    write_episodes_csv(results, dir / "episodes.csv");
    write_results_csv(results, dir / "results.csv");
    write_coefficients_csv(coefficient_rows, dir / "coefficients.csv");
  }

  write_episode_coefficients_csv(results, dir / "episode_coefficients.csv");
  write_text(dir / "report.md",
             render_report(results, read_coefficients_csv(dir / "coefficients.csv"), preamble));
  write_text(dir / "report_preamble.txt", preamble + "\n");
  return results;
}

void report_stage(const fs::path& dir) {
  const auto results = read_results_csv(dir / "results.csv");
  const auto coeffs = read_coefficients_csv(dir / "coefficients.csv");
  std::string preamble;
  if (fs::exists(dir / "report_preamble.txt")) {
    std::ifstream in(dir / "report_preamble.txt");
    std::ostringstream os;
    os << in.rdbuf();
    preamble = os.str();
    while (!preamble.empty() && preamble.back() == '\n') preamble.pop_back();
  }
  write_text(dir / "report.md", render_report(results, coeffs, preamble));
}

std::vector<EvalResult> run_experiment(const ExperimentConfig& cfg, const StageLog& log) {
  cfg.validate();
  train_base_stage(cfg, log);
  train_wpn_stage(cfg, log);
  return eval_stage(cfg, log);
}

}  // namespace mxml
