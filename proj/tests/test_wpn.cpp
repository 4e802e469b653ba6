#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "grad_suite.hpp"
#include "mxml/error.hpp"
#include "mxml/wpn.hpp"

using namespace mxml;

namespace {

ClassGaussian gauss(std::vector<double> mu, std::vector<double> lv) {
  return {Tensor::vector(std::move(mu)), Tensor::vector(std::move(lv))};
}

// Closed-form diagonal KL in plain doubles.
double kl_oracle(const std::vector<double>& mp, const std::vector<double>& vp, const std::vector<double>& mq,
                 const std::vector<double>& vq) {
  double s = 0.0;
  for (std::size_t d = 0; d < mp.size(); ++d) {
    s += vp[d] / vq[d] + (mq[d] - mp[d]) * (mq[d] - mp[d]) / vq[d] - 1.0 + std::log(vq[d] / vp[d]);
  }
  return 0.5 * s;
}

std::vector<double> to_vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

std::vector<double> row(const Tensor& t, std::size_t r) {
  return {t.values().begin() + static_cast<long>(r * t.cols()), t.values().begin() + static_cast<long>((r + 1) * t.cols())};
}

EpisodeRepresentation permute_rep(const EpisodeRepresentation& rep, const std::vector<std::size_t>& class_perm,
                                  const std::vector<std::size_t>& shot_perm, const std::vector<std::size_t>& query_perm) {
  std::vector<std::size_t> srows;
  for (std::size_t n : class_perm) {
    for (std::size_t k : shot_perm) srows.push_back(n * rep.k_shot + k);
  }
  return {gather_rows(rep.support, srows), gather_rows(rep.query, query_perm), rep.n_way, rep.k_shot};
}

template <typename T>
std::vector<T> shuffled(std::size_t n, Rng& rng) {
  std::vector<T> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<T>(i);
  std::shuffle(v.begin(), v.end(), rng);
  return v;
}

}  // namespace

TEST_CASE("class encoder pooling") {
  Rng rng(1);
  const WpnParams w = gradsuite::random_wpn(rng, 6, 4, 0.1);
  const Tensor one = l2_normalize(gradsuite::normal({1, 6}, rng));
  const Tensor three = gather_rows(one, std::vector<std::size_t>{0, 0, 0});
  const auto a = encode_class_distribution(w, one), b = encode_class_distribution(w, three);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::abs(a.mu[i] - b.mu[i]) < 1e-12);
    CHECK(std::abs(a.log_var[i] - b.log_var[i]) < 1e-12);
  }

  const Tensor group = l2_normalize(gradsuite::normal({5, 6}, rng));
  const auto g1 = encode_class_distribution(w, group);
  const auto g2 = encode_class_distribution(w, gather_rows(group, std::vector<std::size_t>{3, 1, 4, 0, 2}));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::abs(g1.mu[i] - g2.mu[i]) < 1e-12);
    CHECK(std::abs(g1.log_var[i] - g2.log_var[i]) < 1e-12);
  }

  const WpnParams z = WpnParams::zeros(6, 4, 0.1);
  const auto zg = encode_class_distribution(z, group);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(zg.mu[i] == 0.0);
    CHECK(zg.log_var[i] == 0.0);
  }
}

TEST_CASE("log variances are clamped") {
  WpnParams w = WpnParams::zeros(2, 1, 0.1);
  w.class_bias = Tensor::vector({0.0, 100.0});
  CHECK(encode_class_distribution(w, Tensor::matrix(1, 2, {1, 0})).log_var[0] == doctest::Approx(std::log(1e6)));
  w.class_bias = Tensor::vector({0.0, -100.0});
  CHECK(encode_class_distribution(w, Tensor::matrix(1, 2, {1, 0})).log_var[0] == doctest::Approx(std::log(1e-6)));
}

TEST_CASE("query projection") {
  const WpnParams z = WpnParams::zeros(2, 2, 0.1);
  const Tensor q = Tensor::matrix(2, 2, {0.6, 0.8, 1, 0});
  const Tensor zq = encode_query_latent(z, q);
  for (double v : zq.values()) CHECK(v == 0.0);

  WpnParams w = WpnParams::zeros(2, 2, 0.1);
  w.query_weight = Tensor::matrix(2, 2, {1, 2, 3, 4});
  // [0.6 0.8] * [[1 2] [3 4]] = [3.0 4.4]; [1 0] * W = [1 2]
  const Tensor out = encode_query_latent(w, q);
  CHECK(out.at(0, 0) == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(out.at(0, 1) == doctest::Approx(4.4).epsilon(1e-15));
  CHECK(out.at(1, 0) == 1.0);
  CHECK(out.at(1, 1) == 2.0);

  Rng rng(2);
  const WpnParams r = gradsuite::random_wpn(rng, 5, 3, 0.1);
  const Tensor a = gradsuite::normal({1, 5}, rng), b = gradsuite::normal({1, 5}, rng);
  const Tensor lhs = encode_query_latent(r, add(a, b));
  const Tensor rhs = add(encode_query_latent(r, a), encode_query_latent(r, b));
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(lhs[i] - rhs[i]) < 1e-12);
  CHECK_THROWS_AS(encode_query_latent(r, Tensor::zeros({1, 4})), ShapeError);
}

TEST_CASE("diagonal KL closed form") {
  const auto p = gauss({0.3, -1.0}, {0.2, -0.5});
  CHECK(kl_diag_gaussian(p, p).item() == 0.0);
  CHECK(kl_diag_gaussian(gauss({1.0}, {0.0}), gauss({0.0}, {0.0})).item() == doctest::Approx(0.5).epsilon(1e-15));

  Rng rng(3);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t d = gradsuite::dim(rng, 1, 6);
    std::vector<double> mp(d), lp(d), mq(d), lq(d), vp(d), vq(d);
    for (std::size_t i = 0; i < d; ++i) {
      mp[i] = nd(rng), mq[i] = nd(rng), lp[i] = nd(rng), lq[i] = nd(rng);
      vp[i] = std::exp(lp[i]), vq[i] = std::exp(lq[i]);
    }
    const double k = kl_diag_gaussian(gauss(mp, lp), gauss(mq, lq)).item();
    CHECK(k >= 0.0);
    CHECK(k == doctest::Approx(kl_oracle(mp, vp, mq, vq)).epsilon(1e-12));
  }
}

TEST_CASE("KL agrees with a Monte-Carlo estimate") {
  // E_p[log p(x) - log q(x)] for p = N(1,1), q = N(0,1).
  Rng rng(4);
  std::normal_distribution<double> p(1.0, 1.0);
  double acc = 0.0;
  const int n = 1000000;
  for (int i = 0; i < n; ++i) {
    const double x = p(rng);
    acc += -0.5 * (x - 1.0) * (x - 1.0) + 0.5 * x * x;
  }
  const double mc = acc / n;
  CHECK(std::abs(mc - kl_diag_gaussian(gauss({1.0}, {0.0}), gauss({0.0}, {0.0})).item()) < 0.01);
}

TEST_CASE("pairwise KL term") {
  const auto g = gauss({0.5, 0.1}, {0.3, -0.2});
  const std::vector<ClassGaussian> same{g, g, g};
  CHECK(pairwise_kl_term(same).item() == 0.0);

  const auto g1 = gauss({0.0, 1.0}, {0.0, 0.5}), g2 = gauss({1.0, -1.0}, {0.7, -0.4});
  const double a = kl_diag_gaussian(g1, g2).item(), b = kl_diag_gaussian(g2, g1).item();
  const std::vector<ClassGaussian> two{g1, g2};
  CHECK(pairwise_kl_term(two).item() == doctest::Approx((a + b) / 4.0).epsilon(1e-14));

  const std::vector<ClassGaussian> one{g1};
  CHECK_THROWS_AS(pairwise_kl_term(one), ShapeError);

  Rng rng(5);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 50; ++t) {
    std::vector<ClassGaussian> gs;
    const std::size_t n = gradsuite::dim(rng, 2, 6);
    for (std::size_t i = 0; i < n; ++i) gs.push_back(gauss({nd(rng), nd(rng)}, {nd(rng), nd(rng)}));
    const double base = pairwise_kl_term(gs).item();
    std::shuffle(gs.begin(), gs.end(), rng);
    CHECK(std::abs(pairwise_kl_term(gs).item() - base) < 1e-12);

    // Matrix form agrees with the elementwise KL.
    const Tensor m = pairwise_kl_matrix(stack_gaussians(gs));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        CHECK(m.at(i, j) == doctest::Approx(kl_diag_gaussian(gs[i], gs[j]).item()).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("pairwise KL grows as one mean moves away") {
  double prev = -1.0;
  for (double shift = 0.0; shift <= 5.0; shift += 0.25) {
    const std::vector<ClassGaussian> gs{gauss({0.0}, {0.0}), gauss({0.5}, {0.3}), gauss({0.2 + shift}, {-0.2})};
    const double v = pairwise_kl_term(gs).item();
    CHECK(v > prev);
    prev = v;
  }
}

TEST_CASE("query density term") {
  const ClassGaussians single{Tensor::matrix(1, 2, {0.5, -0.5}), Tensor::matrix(1, 2, {0.2, -0.1})};
  const Tensor z = Tensor::matrix(2, 2, {0.0, 1.0, -1.0, 0.3});
  double expected = 0.0;
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t d = 0; d < 2; ++d) {
      const double var = std::exp(single.log_var[d]);
      const double diff = z.at(k, d) - single.mu[d];
      expected += -0.5 * (std::log(2.0 * std::numbers::pi) + single.log_var[d] + diff * diff / var);
    }
  }
  CHECK(query_density_term(z, single).item() == doctest::Approx(expected).epsilon(1e-14));

  const ClassGaussians far{Tensor::matrix(2, 1, {0.0, 100.0}), Tensor::matrix(2, 1, {0.0, 0.0})};
  const double c = query_density_term(Tensor::matrix(1, 1, {0.0}), far).item();
  CHECK(std::abs(c - (-0.5 * std::log(2.0 * std::numbers::pi))) < 1e-9);
  CHECK(std::abs(c + 0.9189) < 1e-4);

  Rng rng(6);
  const ClassGaussians g{gradsuite::normal({3, 4}, rng), gradsuite::normal({3, 4}, rng, 0.5)};
  const Tensor zs = gradsuite::normal({5, 4}, rng);
  const double total = query_density_term(zs, g).item();
  double parts = 0.0;
  for (std::size_t k = 0; k < 5; ++k) parts += query_density_term(gather_rows(zs, std::vector<std::size_t>{k}), g).item();
  CHECK(total == doctest::Approx(parts).epsilon(1e-12));
  const double four = query_density_term(gather_rows(zs, std::vector<std::size_t>{0, 1, 2, 3}), g).item();
  const double last = query_density_term(gather_rows(zs, std::vector<std::size_t>{4}), g).item();
  CHECK(total == doctest::Approx(four + last).epsilon(1e-12));
}

TEST_CASE("learner score variants") {
  Rng rng(7);
  const auto rep = gradsuite::random_rep(rng, 3, 2, 5, 6);
  WpnParams w = gradsuite::random_wpn(rng, 6, 4, 0.0);
  CHECK(wpn_score(w, rep, true).item() == wpn_score(w, rep, false).item());

  w.lambda = 0.3;
  const double kl = pairwise_kl_term(encode_class_distributions(w, rep)).item();
  const double dens = query_density_term(encode_query_latent(w, rep.query), encode_class_distributions(w, rep)).item();
  CHECK(wpn_score(w, rep, true).item() == doctest::Approx(kl + 0.3 * dens).epsilon(1e-14));
  CHECK(wpn_score(w, rep, false).item() == doctest::Approx(kl).epsilon(1e-14));

  // Identical class Gaussians: a zero-weight class encoder maps everything to N(0, 1).
  WpnParams z = WpnParams::zeros(6, 4, 0.0);
  CHECK(wpn_score(z, rep, true).item() == 0.0);
  CHECK_THROWS_AS(wpn_score(w, gradsuite::random_rep(rng, 1, 2, 5, 6), true), ShapeError);
}

TEST_CASE("score invariances") {
  Rng rng(8);
  for (int t = 0; t < 30; ++t) {
    const std::size_t n = gradsuite::dim(rng, 2, 5), k = gradsuite::dim(rng, 1, 4), l = gradsuite::dim(rng, 1, 8);
    const auto rep = gradsuite::random_rep(rng, n, k, l, 6);
    const WpnParams w = gradsuite::random_wpn(rng, 6, 5, 0.1);
    const double base = wpn_score(w, rep, true).item();
    const auto perm = permute_rep(rep, shuffled<std::size_t>(n, rng), shuffled<std::size_t>(k, rng),
                                  shuffled<std::size_t>(l, rng));
    CHECK(std::abs(wpn_score(w, perm, true).item() - base) < 1e-10);

    // Non-transductive scores ignore the queries entirely.
    const EpisodeRepresentation other{rep.support, l2_normalize(gradsuite::normal({l + 3, 6}, rng)), n, k};
    CHECK(wpn_score(w, rep, false).item() == wpn_score(w, other, false).item());
  }
}

TEST_CASE("score gradient on a 2-way 2-shot toy episode") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto rep = gradsuite::random_rep(rng, 2, 2, 3, 4);
    const WpnParams base = gradsuite::random_wpn(rng, 4, 3, 0.1);
    for (bool trans : {true, false}) {
      const auto res = gradient_check(
          [&](std::span<const Tensor> in) { return wpn_score(gradsuite::with_theta(base, in), rep, trans); },
          base.params(), 1e-5);
      CHECK(res.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("wpn checkpoints round trip") {
  Rng rng(9);
  const WpnParams w = gradsuite::random_wpn(rng, 5, 3, 0.25);
  const WpnParams r = WpnParams::from_checkpoint(parse_checkpoint(serialize_checkpoint(w.to_checkpoint(42))));
  CHECK(r.d_h == 5);
  CHECK(r.d_z == 3);
  CHECK(r.lambda == 0.25);
  CHECK(to_vec(r.class_weight) == to_vec(w.class_weight));
  CHECK(to_vec(r.class_bias) == to_vec(w.class_bias));
  CHECK(to_vec(r.query_weight) == to_vec(w.query_weight));
}

TEST_CASE("stacked gaussians keep rows") {
  const std::vector<ClassGaussian> gs{gauss({1, 2}, {0, 0.1}), gauss({3, 4}, {0.2, 0.3})};
  const auto s = stack_gaussians(gs);
  CHECK(s.size() == 2);
  CHECK(row(s.mu, 1) == std::vector<double>{3, 4});
  CHECK(row(s.log_var, 0) == std::vector<double>{0, 0.1});
}
