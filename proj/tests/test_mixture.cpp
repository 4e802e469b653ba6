#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "grad_suite.hpp"
#include "mxml/error.hpp"
#include "mxml/mixture.hpp"

using namespace mxml;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::path(MXML_TEST_DATA) / "mixture";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

LearnerOutput output_from_probs(std::size_t l, std::size_t n, std::vector<double> probs, Rng& rng) {
  LearnerOutput o = gradsuite::random_output(rng, n, 1, l, 3);
  std::vector<double> lp(probs.size());
  std::transform(probs.begin(), probs.end(), lp.begin(), [](double p) { return std::log(p); });
  o.log_probs = Tensor({l, n}, std::move(lp));
  return o;
}

std::vector<double> probs_of(const LearnerOutput& o) {
  std::vector<double> p;
  for (double v : o.log_probs.values()) p.push_back(std::exp(v));
  return p;
}

// Three domains with distinct geometry, one small learner each.
struct Fixture {
  std::vector<Domain> domains;
  std::vector<ClassSplit> splits;
  std::vector<std::shared_ptr<const BaseLearner>> learners;

  Fixture() {
    const TransformKind kinds[] = {TransformKind::Rotation, TransformKind::Anisotropic, TransformKind::Warp};
    for (std::size_t g = 0; g < 3; ++g) {
      DomainSpec s;
      s.name = "d" + std::to_string(g);
      s.n_classes = 30;
      s.d_in = 16;
      s.latent_dim = 6;
      s.per_class = 30;
      s.sigma_between = 1.5;
      s.sigma_within = 1.0;
      s.nuisance_sigma = 0.5;
      s.transform = kinds[g];
      domains.push_back(make_synthetic_domain(s, 100 + g));
      splits.push_back(split_classes(domains.back(), {0.8, 0.2, g}));
    }
    for (std::size_t g = 0; g < 3; ++g) {
      TrainConfig c;
      c.epochs = 3;
      c.episodes_per_epoch = 30;
      c.n_way = 5;
      c.hidden = {32};
      c.d_h = 16;
      c.seed = 7 + g;
      learners.push_back(std::make_shared<ProtoNetModel>(proto_train(domains[g], splits[g].base, c).model));
    }
  }

  std::vector<DomainClasses> wpn_domains() const {
    std::vector<DomainClasses> out;
    for (std::size_t g = 0; g < 3; ++g) out.push_back({&domains[g], splits[g].wpn});
    return out;
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

}  // namespace

TEST_CASE("combination of a single learner is the learner") {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const std::vector<LearnerOutput> one{gradsuite::random_output(rng, 4, 2, 5, 6)};
    const WpnParams w = gradsuite::random_wpn(rng, 6, 3, 0.1);
    const MixturePrediction p = mxml_combine(w, one, CombinationMode::Normalized, true);
    const auto expected = probs_of(one[0]);
    for (std::size_t i = 0; i < expected.size(); ++i) CHECK(std::abs(p.probs[i] - expected[i]) < 1e-12);
    CHECK(p.coefficients.normalized == std::vector<double>{1.0});
  }
}

TEST_CASE("equal scores reduce to uniform averaging") {
  Rng rng(2);
  std::vector<LearnerOutput> outs;
  for (int m = 0; m < 3; ++m) outs.push_back(gradsuite::random_output(rng, 4, 2, 5, 6));
  const Tensor avg = uniform_average(outs);
  const Tensor mix = exp(combine_log_probs(Tensor::vector({0.7, 0.7, 0.7}), outs, CombinationMode::Normalized));
  for (std::size_t i = 0; i < avg.numel(); ++i) CHECK(std::abs(avg[i] - mix[i]) < 1e-12);

  // A WPN whose class encoder is zero scores every learner identically.
  WpnParams z = WpnParams::zeros(6, 3, 0.0);
  const MixturePrediction p = mxml_combine(z, outs, CombinationMode::Normalized, true);
  for (std::size_t i = 0; i < avg.numel(); ++i) CHECK(std::abs(avg[i] - p.probs[i]) < 1e-12);
  for (double c : p.coefficients.normalized) CHECK(c == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("uniform averaging") {
  Rng rng(3);
  const std::vector<LearnerOutput> one{gradsuite::random_output(rng, 3, 1, 2, 4)};
  const Tensor a = uniform_average(one);
  const auto p = probs_of(one[0]);
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::abs(a[i] - p[i]) < 1e-15);

  const double eps = 1e-300;
  const std::vector<LearnerOutput> opposite{output_from_probs(1, 2, {1.0 - eps, eps}, rng),
                                            output_from_probs(1, 2, {eps, 1.0 - eps}, rng)};
  const Tensor h = uniform_average(opposite);
  CHECK(h[0] == doctest::Approx(0.5));
  CHECK(h[1] == doctest::Approx(0.5));
}

TEST_CASE("mixture probabilities are distributions in both modes") {
  Rng rng(4);
  for (auto mode : {CombinationMode::Normalized, CombinationMode::PaperLiteral}) {
    for (int t = 0; t < 50; ++t) {
      const std::size_t m = gradsuite::dim(rng, 1, 4), n = gradsuite::dim(rng, 2, 5), l = gradsuite::dim(rng, 1, 6);
      std::vector<LearnerOutput> outs;
      for (std::size_t i = 0; i < m; ++i) outs.push_back(gradsuite::random_output(rng, n, 2, l, 5));
      const WpnParams w = gradsuite::random_wpn(rng, 5, 3, 0.1);
      const MixturePrediction p = mxml_combine(w, outs, mode, true);
      for (std::size_t q = 0; q < l; ++q) {
        double s = 0.0;
        for (std::size_t c = 0; c < n; ++c) s += p.probs.at(q, c);
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
      double cs = 0.0;
      for (double c : p.coefficients.normalized) {
        CHECK(c >= 0.0);
        cs += c;
      }
      CHECK(std::abs(cs - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("normalized mixture stays in the convex hull") {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    const std::size_t m = gradsuite::dim(rng, 2, 4), n = gradsuite::dim(rng, 2, 5), l = gradsuite::dim(rng, 1, 4);
    std::vector<LearnerOutput> outs;
    for (std::size_t i = 0; i < m; ++i) outs.push_back(gradsuite::random_output(rng, n, 1, l, 4));
    const Tensor scores = gradsuite::normal({m}, rng, 3.0);
    const Tensor p = exp(combine_log_probs(scores, outs, CombinationMode::Normalized));
    for (std::size_t i = 0; i < p.numel(); ++i) {
      double lo = 1.0, hi = 0.0;
      for (const auto& o : outs) {
        lo = std::min(lo, std::exp(o.log_probs[i]));
        hi = std::max(hi, std::exp(o.log_probs[i]));
      }
      CHECK(p[i] >= lo - 1e-12);
      CHECK(p[i] <= hi + 1e-12);
    }
  }
}

TEST_CASE("normalized coefficients ignore a common shift") {
  Rng rng(6);
  for (int t = 0; t < 100; ++t) {
    const std::size_t m = gradsuite::dim(rng, 1, 6);
    std::vector<double> s(m), shifted(m);
    const double c = std::normal_distribution<double>(0.0, 50.0)(rng);
    for (std::size_t i = 0; i < m; ++i) {
      s[i] = std::normal_distribution<double>(0.0, 3.0)(rng);
      shifted[i] = s[i] + c;
    }
    const auto a = coefficients_from_scores(s), b = coefficients_from_scores(shifted);
    for (std::size_t i = 0; i < m; ++i) CHECK(std::abs(a.normalized[i] - b.normalized[i]) < 1e-12);
    CHECK(a.raw == s);
  }
}

TEST_CASE("literal combination matches its definition") {
  Rng rng(7);
  std::vector<LearnerOutput> outs;
  for (int m = 0; m < 3; ++m) outs.push_back(gradsuite::random_output(rng, 4, 1, 3, 4));
  const std::vector<double> w{0.5, -1.2, 2.0};
  const Tensor lp = combine_log_probs(Tensor::vector(w), outs, CombinationMode::PaperLiteral);
  for (std::size_t q = 0; q < 3; ++q) {
    std::vector<double> z(4, 0.0);
    for (std::size_t m = 0; m < 3; ++m) {
      for (std::size_t c = 0; c < 4; ++c) z[c] += w[m] * std::exp(outs[m].log_probs.at(q, c));
    }
    double norm = 0.0;
    for (double v : z) norm += std::exp(v);
    for (std::size_t c = 0; c < 4; ++c) CHECK(lp.at(q, c) == doctest::Approx(z[c] - std::log(norm)).epsilon(1e-13));
  }
}

TEST_CASE("prediction is deterministic") {
  const auto& f = fixture();
  Rng rng(8);
  const EnsembleModel e{f.learners, WpnParams::init(16, 8, 0.1, 3), CombinationMode::Normalized, true};
  const Episode ep = sample_episode(f.domains[0], f.splits[0].wpn, 5, 5, 15, rng);
  const auto a = mxml_predict(e, ep), b = mxml_predict(e, ep);
  CHECK(std::equal(a.probs.values().begin(), a.probs.values().end(), b.probs.values().begin()));
  CHECK(a.coefficients.raw == b.coefficients.raw);
  const Tensor u = uniform_average_predict(f.learners, ep);
  CHECK(u.shape() == a.probs.shape());
}

TEST_CASE("zero training steps return the initialization") {
  const auto& f = fixture();
  const EnsembleModel e{f.learners, WpnParams::init(16, 8, 0.1, 3), CombinationMode::Normalized, true};
  WpnTrainConfig c;
  c.steps = 0;
  c.n_way = 5;
  const auto doms = f.wpn_domains();
  const auto r = train_wpn(e, doms, c);
  CHECK(r.loss_curve.empty());
  const auto p0 = e.wpn.params(), p1 = r.wpn.params();
  for (std::size_t i = 0; i < p0.size(); ++i) {
    CHECK(std::equal(p0[i].values().begin(), p0[i].values().end(), p1[i].values().begin(), p1[i].values().end()));
  }
}

TEST_CASE("training the WPN lowers validation cross-entropy and leaves learners untouched") {
  const auto& f = fixture();
  std::vector<std::string> before;
  for (std::size_t g = 0; g < 3; ++g) {
    const auto path = scratch("learner" + std::to_string(g) + ".json");
    save_params(f.learners[g]->to_checkpoint(), path);
    before.push_back(slurp(path));
  }

  for (auto mode : {CombinationMode::Normalized, CombinationMode::PaperLiteral}) {
    EnsembleModel e{f.learners, WpnParams::init(16, 8, 0.1, 3), mode, true};
    Rng vrng(99);
    std::vector<Episode> val;
    for (int i = 0; i < 60; ++i) {
      const std::size_t g = static_cast<std::size_t>(i % 3);
      val.push_back(sample_episode(f.domains[g], f.splits[g].wpn, 5, 5, 15, vrng));
    }
    const double initial = mixture_cross_entropy(e, val);

    WpnTrainConfig c;
    c.steps = 300;
    c.lr = 1e-3;
    c.n_way = 5;
    c.seed = 4;
    const auto doms = f.wpn_domains();
    const auto r = train_wpn(e, doms, c);
    CHECK(r.loss_curve.size() == 300);
    e.wpn = r.wpn;
    const double trained = mixture_cross_entropy(e, val);
    INFO(to_string(mode) << ": " << initial << " -> " << trained);
    CHECK(trained < initial);

    const auto again = train_wpn(EnsembleModel{f.learners, WpnParams::init(16, 8, 0.1, 3), mode, true}, doms, c);
    CHECK(again.loss_curve == r.loss_curve);
  }

  for (std::size_t g = 0; g < 3; ++g) {
    const auto path = scratch("learner" + std::to_string(g) + "_after.json");
    save_params(f.learners[g]->to_checkpoint(), path);
    CHECK(slurp(path) == before[g]);
  }
}

TEST_CASE("pooled training over one domain is the single-domain trainer") {
  const auto& f = fixture();
  TrainConfig c;
  c.epochs = 2;
  c.episodes_per_epoch = 10;
  c.n_way = 5;
  c.hidden = {16};
  c.d_h = 8;
  c.seed = 31;
  const std::vector<DomainClasses> one{{&f.domains[1], f.splits[1].base}};
  const auto pooled = single_pooled_train(one, c, "protonet");
  const auto direct = proto_train(f.domains[1], f.splits[1].base, c);
  CHECK(serialize_checkpoint(pooled.learner->to_checkpoint()) == serialize_checkpoint(direct.model.to_checkpoint()));
}

TEST_CASE("pooled training over several domains") {
  const auto& f = fixture();
  TrainConfig c;
  c.epochs = 4;
  c.episodes_per_epoch = 25;
  c.n_way = 5;
  c.hidden = {32};
  c.d_h = 16;
  c.seed = 32;
  std::vector<DomainClasses> all;
  for (std::size_t g = 0; g < 3; ++g) all.push_back({&f.domains[g], f.splits[g].base});
  const auto a = single_pooled_train(all, c, "protonet");
  const auto b = single_pooled_train(all, c, "protonet");
  CHECK(serialize_checkpoint(a.learner->to_checkpoint()) == serialize_checkpoint(b.learner->to_checkpoint()));
  CHECK(a.curve.back().mean_loss < a.curve.front().mean_loss);
}

TEST_CASE("ensemble manifest round trip") {
  const auto& f = fixture();
  const fs::path dir = scratch("manifest");
  fs::create_directories(dir / "ckpt");
  EnsembleManifest m;
  for (std::size_t g = 0; g < 3; ++g) {
    const fs::path rel = fs::path("ckpt") / ("m" + std::to_string(g) + ".json");
    save_params(f.learners[g]->to_checkpoint(), dir / rel);
    m.members.push_back({rel, "protonet", f.domains[g].name});
  }
  const WpnParams w = WpnParams::init(16, 8, 0.1, 5);
  save_params(w.to_checkpoint(5), dir / "ckpt" / "wpn.json");
  m.wpn_checkpoint = fs::path("ckpt") / "wpn.json";
  m.mode = CombinationMode::PaperLiteral;
  m.transductive = false;
  save_manifest(m, dir / "ensemble.json");

  const EnsembleManifest r = load_manifest(dir / "ensemble.json");
  CHECK(r.members.size() == 3);
  CHECK(r.members[2].domain == "d2");
  CHECK(r.mode == CombinationMode::PaperLiteral);
  CHECK_FALSE(r.transductive);

  const EnsembleModel e = load_ensemble(dir / "ensemble.json");
  Rng rng(9);
  const Episode ep = sample_episode(f.domains[2], f.splits[2].wpn, 5, 5, 10, rng);
  const EnsembleModel ref{f.learners, w, CombinationMode::PaperLiteral, false};
  const auto a = mxml_predict(e, ep), b = mxml_predict(ref, ep);
  CHECK(std::equal(a.probs.values().begin(), a.probs.values().end(), b.probs.values().begin()));

  CHECK_THROWS_AS(parse_combination_mode("softmax"), ConfigError);
  CHECK_THROWS_AS(load_manifest(dir / "missing.json"), Error);
}
