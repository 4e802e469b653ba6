// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "grad_suite.hpp"
#include "mxml/checkpoint.hpp"
#include "mxml/harness.hpp"

using namespace mxml;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void verdict(int id, const std::string& title, bool pass, const std::string& detail) {
  std::printf("criterion %d %-28s %s  %s\n", id, title.c_str(), pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

// A throwing body fails every criterion it was meant to decide.
template <typename F>
void guarded(std::vector<std::pair<int, std::string>> criteria, F&& body) {
  try {
    body();
  } catch (const std::exception& e) {
    for (const auto& [id, title] : criteria) verdict(id, title, false, std::string("threw: ") + e.what());
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::path(MXML_TEST_DATA) / "acceptance" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig config_into(const std::string& file, const fs::path& out) {
  ExperimentConfig cfg = load_config(fs::path(MXML_CONFIG_DIR) / file);
  cfg.output_dir = out;
  return cfg;
}

const EvalResult& find_result(const std::vector<EvalResult>& rs, const std::string& model, const std::string& domain) {
  for (const auto& r : rs) {
    if (r.model == model && r.test_domain == domain) return r;
  }
  throw std::runtime_error("no result for " + model + " on " + domain);
}

std::vector<double> unit(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

std::vector<std::size_t> nearest_centroid(const Episode& ep) {
  const std::size_t d = ep.dim();
  std::vector<std::vector<double>> c(ep.n_way, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < ep.support.size(); ++i) {
    const auto u = unit(ep.support[i].features);
    for (std::size_t j = 0; j < d; ++j) c[ep.support_label(i)][j] += u[j] / static_cast<double>(ep.k_shot);
  }
  std::vector<std::size_t> pred;
  for (const auto& q : ep.query) {
    const auto u = unit(q.features);
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t n = 0; n < ep.n_way; ++n) {
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) dist += (u[j] - c[n][j]) * (u[j] - c[n][j]);
      if (dist < best_d) best_d = dist, best = n;
    }
    pred.push_back(best);
  }
  return pred;
}

EpisodeRepresentation permute_rep(const EpisodeRepresentation& rep, const std::vector<std::size_t>& class_perm,
                                  const std::vector<std::size_t>& shot_perm, const std::vector<std::size_t>& query_perm) {
  std::vector<std::size_t> srows;
  for (std::size_t n : class_perm) {
    for (std::size_t k : shot_perm) srows.push_back(n * rep.k_shot + k);
  }
  return {gather_rows(rep.support, srows), gather_rows(rep.query, query_perm), rep.n_way, rep.k_shot};
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  auto v = iota(n);
  std::shuffle(v.begin(), v.end(), rng);
  return v;
}

void gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto reports = gradsuite::run(100);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name;
  for (const auto& r : reports) {
    if (r.worst >= worst) worst = r.worst, worst_name = r.name;
  }
  verdict(1, "gradient suite", worst < 1e-4 && secs < 60.0,
          std::to_string(reports.size()) + " ops x 100 seeds, worst rel err " + fmt("%.3g", worst) + " (" +
              worst_name + "), " + fmt("%.1fs", secs));
}

void kl_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(20240);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  std::uniform_real_distribution<double> mean(-1.0, 1.0), logvar(-0.5, 0.5);
  std::normal_distribution<double> z(0.0, 1.0);
  double worst = 0.0;
  for (int pair = 0; pair < 20; ++pair) {
    const std::size_t d = dim(rng);
    std::vector<double> mp(d), lp(d), mq(d), lq(d);
    for (std::size_t i = 0; i < d; ++i) mp[i] = mean(rng), lp[i] = logvar(rng), mq[i] = mean(rng), lq[i] = logvar(rng);
    const double closed = kl_diag_gaussian({Tensor::vector(mp), Tensor::vector(lp)}, {Tensor::vector(mq), Tensor::vector(lq)}).item();
    // E_p[log p(x) - log q(x)]
    const int samples = 1000000;
    double acc = 0.0;
    for (int s = 0; s < samples; ++s) {
      double diff = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double sp = std::exp(0.5 * lp[i]), sq = std::exp(0.5 * lq[i]);
        const double x = mp[i] + sp * z(rng);
        const double a = (x - mp[i]) / sp, b = (x - mq[i]) / sq;
        diff += -0.5 * a * a - 0.5 * lp[i] + 0.5 * b * b + 0.5 * lq[i];
      }
      acc += diff;
    }
    worst = std::max(worst, std::abs(acc / samples - closed));
  }
  const double unit_case =
      kl_diag_gaussian({Tensor::vector({1.0}), Tensor::vector({0.0})}, {Tensor::vector({0.0}), Tensor::vector({0.0})}).item();
  const double secs = seconds_since(t0);
  verdict(2, "KL correctness", worst < 0.01 && unit_case == 0.5 && secs < 60.0,
          "20 pairs, worst |MC - closed| " + fmt("%.4f", worst) + ", KL(N(1,1)||N(0,1)) = " + fmt("%.17g", unit_case) +
              ", " + fmt("%.1fs", secs));
}

void invariance_suite() {
  Rng rng(31);
  double worst_perm = 0.0, worst_norm = 0.0, worst_sum = 0.0;
  bool nontrans_equal = true;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = gradsuite::dim(rng, 2, 10), k = gradsuite::dim(rng, 1, 5), l = gradsuite::dim(rng, 1, 16);
    const std::size_t d_h = gradsuite::dim(rng, 2, 16), d_z = gradsuite::dim(rng, 1, 16);
    const auto rep = gradsuite::random_rep(rng, n, k, l, d_h);
    const WpnParams w = gradsuite::random_wpn(rng, d_h, d_z, 0.1);
    for (bool trans : {true, false}) {
      const double base = wpn_score(w, rep, trans).item();
      const auto p_class = permute_rep(rep, shuffled(n, rng), iota(k), iota(l));
      const auto p_all = permute_rep(rep, shuffled(n, rng), shuffled(k, rng), shuffled(l, rng));
      worst_perm = std::max(worst_perm, std::abs(wpn_score(w, p_class, trans).item() - base));
      worst_perm = std::max(worst_perm, std::abs(wpn_score(w, p_all, trans).item() - base));
    }
    const EpisodeRepresentation other{rep.support, l2_normalize(gradsuite::normal({gradsuite::dim(rng, 1, 16), d_h}, rng)),
                                      n, k};
    nontrans_equal = nontrans_equal && wpn_score(w, rep, false).item() == wpn_score(w, other, false).item();

    const Tensor h = l2_normalize(gradsuite::normal({l, d_h}, rng));
    for (std::size_t r = 0; r < l; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < d_h; ++c) s += h.at(r, c) * h.at(r, c);
      worst_norm = std::max(worst_norm, std::abs(std::sqrt(s) - 1.0));
    }
    Tensor logits = gradsuite::normal({l, n}, rng);
    for (double& v : logits.mutable_values()) v *= 20.0;
    const Tensor p = softmax(logits);
    for (std::size_t r = 0; r < l; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < n; ++c) s += p.at(r, c);
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    }
  }
  verdict(3, "invariance suite", worst_perm <= 1e-10 && nontrans_equal && worst_norm <= 1e-12 && worst_sum <= 1e-12,
          "200 episodes, worst permutation drift " + fmt("%.2g", worst_perm) + ", non-transductive query-free " +
              (nontrans_equal ? "yes" : "no") + ", unit-norm err " + fmt("%.2g", worst_norm) + ", softmax row err " +
              fmt("%.2g", worst_sum));
}

void freezing_invariant() {
  const fs::path out = scratch("freeze");
  const ExperimentConfig cfg = config_into("smoke.json", out);

  // On disk, across the stage boundary.
  train_base_stage(cfg);
  std::map<std::string, std::string> before;
  for (const auto& e : fs::directory_iterator(out / "checkpoints")) before[e.path().filename().string()] = slurp(e.path());
  train_wpn_stage(cfg);
  std::size_t same = 0;
  for (const auto& [name, bytes] : before) same += slurp(out / "checkpoints" / name) == bytes;
  const bool disk_ok = !before.empty() && same == before.size();

  // In memory, on learners loaded from those checkpoints.
  std::vector<std::shared_ptr<const BaseLearner>> learners;
  std::vector<std::string> serialized;
  std::vector<Domain> domains;
  for (const auto& entry : cfg.train_domains) {
    learners.push_back(load_learner(out / "checkpoints" / ("specific_" + entry.name() + ".json")));
    serialized.push_back(serialize_checkpoint(learners.back()->to_checkpoint()));
    domains.push_back(entry.build());
  }
  std::vector<DomainClasses> wpn_domains;
  std::size_t smallest = SIZE_MAX;
  for (const auto& d : domains) {
    wpn_domains.push_back({&d, split_classes(d, cfg.split).wpn});
    smallest = std::min(smallest, wpn_domains.back().classes.size());
  }
  WpnTrainConfig wc = cfg.wpn;
  wc.steps = 200;
  wc.lr = 1e-3;
  wc.n_way = std::min(wc.n_way, smallest);
  const EnsembleModel ensemble{learners, WpnParams::init(cfg.learner.d_h, cfg.d_z, cfg.lambda, 5), cfg.mode, true};
  const auto trained = train_wpn(ensemble, wpn_domains, wc);
  std::size_t mem_same = 0;
  for (std::size_t g = 0; g < learners.size(); ++g) {
    mem_same += serialize_checkpoint(learners[g]->to_checkpoint()) == serialized[g];
  }
  const bool mem_ok = mem_same == learners.size() && trained.loss_curve.size() == 200;

  verdict(4, "freezing invariant", disk_ok && mem_ok,
          std::to_string(same) + "/" + std::to_string(before.size()) + " checkpoint files unchanged by train-wpn, " +
              std::to_string(mem_same) + "/" + std::to_string(learners.size()) + " in-memory learners unchanged");
}

void ood_benchmark() {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig cfg = config_into("ood_benchmark.json", scratch("ood"));
  const auto results = run_experiment(cfg);
  const double secs = seconds_since(t0);

  double trans_sum = 0.0, uni_sum = 0.0;
  std::size_t significant = 0;
  std::string per_domain;
  for (const auto& dom : cfg.test_domains) {
    const auto& t = find_result(results, "mxml_trans", dom.name());
    const auto& u = find_result(results, "uniform", dom.name());
    trans_sum += t.mean_acc;
    uni_sum += u.mean_acc;
    const auto st = sign_test(t.episode_acc, u.episode_acc);
    const bool win = t.mean_acc > u.mean_acc && st.p_value < 0.05;
    significant += win;
    char buf[160];
    std::snprintf(buf, sizeof buf, "    %-14s mxml_trans %6.2f  uniform %6.2f  sign test %zu/%zu p=%.3g%s\n",
                  dom.name().c_str(), t.mean_acc, u.mean_acc, st.wins, st.losses, st.p_value, win ? "  *" : "");
    per_domain += buf;
  }
  const double n = static_cast<double>(cfg.test_domains.size());
  const bool pass = cfg.test_domains.size() == 5 && cfg.eval.episodes == 600 && trans_sum / n >= uni_sum / n &&
                    significant >= 3;
  verdict(5, "OOD ordering", pass,
          "mean mxml_trans " + fmt("%.2f", trans_sum / n) + " vs uniform " + fmt("%.2f", uni_sum / n) + ", " +
              std::to_string(significant) + "/5 domains significant, " + fmt("%.0fs", secs));
  std::fputs(per_domain.c_str(), stdout);

  // Weight concentration on the same run.
  std::size_t concentrated = 0, applicable = 0;
  std::string weights;
  for (const auto& dom : cfg.test_domains) {
    std::vector<std::string> matches;
    for (const auto& tr : cfg.train_domains) {
      if (tr.spec.transform == dom.spec.transform && tr.spec.transform_seed && dom.spec.transform_seed &&
          *tr.spec.transform_seed == *dom.spec.transform_seed) {
        matches.push_back(tr.name());
      }
    }
    if (matches.size() != 1) continue;
    ++applicable;
    const auto& t = find_result(results, "mxml_trans", dom.name());
    const auto top = std::max_element(t.coefficients.begin(), t.coefficients.end(),
                                      [](const auto& a, const auto& b) { return a.mean < b.mean; });
    const double matched = std::find_if(t.coefficients.begin(), t.coefficients.end(), [&](const auto& c) {
                             return c.learner == matches[0];
                           })->mean;
    concentrated += top != t.coefficients.end() && top->learner == matches[0];
    char buf[160];
    std::snprintf(buf, sizeof buf, "    %-14s matched %-8s %.3f  top %-8s %.3f\n", dom.name().c_str(),
                  matches[0].c_str(), matched, top->learner.c_str(), top->mean);
    weights += buf;
  }
  verdict(6, "weight concentration", applicable == cfg.test_domains.size() && applicable > 0 && concentrated == applicable,
          std::to_string(concentrated) + "/" + std::to_string(applicable) +
              " test domains put the highest mean weight on their matched learner over " +
              std::to_string(cfg.eval.episodes) + " episodes");
  std::fputs(weights.c_str(), stdout);
}

void id_benchmark() {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig cfg = config_into("id_benchmark.json", scratch("id"));
  const auto results = run_experiment(cfg);
  const std::string target = cfg.target->name();
  const auto& m = find_result(results, "mxml_trans", target);
  const auto& s = find_result(results, "specific:" + target, target);
  const auto& u = find_result(results, "uniform", target);
  verdict(7, "in-distribution ordering",
          cfg.eval.episodes == 600 && m.mean_acc >= s.mean_acc && m.mean_acc >= u.mean_acc,
          "mxml_trans " + fmt("%.2f", m.mean_acc) + ", specific " + fmt("%.2f", s.mean_acc) + ", uniform " +
              fmt("%.2f", u.mean_acc) + " over 600 paired episodes, " + fmt("%.0fs", seconds_since(t0)));
}

void determinism() {
  const fs::path a = scratch("determinism_a"), b = scratch("determinism_b");
  run_experiment(config_into("smoke.json", a));
  run_experiment(config_into("smoke.json", b));
  const bool results_same = slurp(a / "results.csv") == slurp(b / "results.csv") && !slurp(a / "results.csv").empty();
  const bool coef_same =
      slurp(a / "coefficients.csv") == slurp(b / "coefficients.csv") && !slurp(a / "coefficients.csv").empty();
  verdict(8, "determinism", results_same && coef_same,
          std::string("results.csv ") + (results_same ? "identical" : "differs") + ", coefficients.csv " +
              (coef_same ? "identical" : "differs"));
}

void oracle_equivalence() {
  DomainSpec s;
  s.name = "separable";
  s.n_classes = 20;
  s.d_in = 16;
  s.per_class = 40;
  s.sigma_between = 3.0;
  s.sigma_within = 0.5;
  const Domain d = make_synthetic_domain(s, 9);
  const ProtoNetModel id(Encoder::identity(16));
  Rng rng(99);
  std::size_t agree = 0, queries = 0, episodes_equal = 0;
  for (int e = 0; e < 100; ++e) {
    const Episode ep = sample_episode(d, d.class_ids(), 10, 5, 15, rng);
    const Tensor lp = id.predict(ep).log_probs;
    const auto oracle = nearest_centroid(ep);
    std::size_t here = 0;
    for (std::size_t q = 0; q < ep.query.size(); ++q) {
      std::size_t best = 0;
      for (std::size_t n = 1; n < ep.n_way; ++n) {
        if (lp.at(q, n) > lp.at(q, best)) best = n;
      }
      here += best == oracle[q];
    }
    agree += here;
    queries += ep.query.size();
    episodes_equal += here == ep.query.size();
  }
  verdict(9, "oracle equivalence", episodes_equal == 100,
          std::to_string(episodes_equal) + "/100 episodes identical, " + std::to_string(agree) + "/" +
              std::to_string(queries) + " query decisions agree");
}

}  // namespace

int main() {
  guarded({{1, "gradient suite"}}, gradient_suite);
  guarded({{2, "KL correctness"}}, kl_correctness);
  guarded({{3, "invariance suite"}}, invariance_suite);
  guarded({{4, "freezing invariant"}}, freezing_invariant);
  guarded({{5, "OOD ordering"}, {6, "weight concentration"}}, ood_benchmark);
  guarded({{7, "in-distribution ordering"}}, id_benchmark);
  guarded({{8, "determinism"}}, determinism);
  guarded({{9, "oracle equivalence"}}, oracle_equivalence);
  std::printf("%s: %d failing\n", failures == 0 ? "ALL PASS" : "FAILURES", failures);
  return failures == 0 ? 0 : 1;
}
