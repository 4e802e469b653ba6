#include "mxml/episodes.hpp"

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mxml/checkpoint.hpp"
#include "mxml/error.hpp"

namespace mxml {

namespace {

using Matrix = std::vector<double>;  // row-major, square d x d unless noted

Matrix random_orthogonal(std::size_t d, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix q(d * d);
  for (auto& x : q) x = normal(rng);
  // Modified Gram-Schmidt on the rows.
  for (std::size_t i = 0; i < d; ++i) {
    double* row = &q[i * d];
    for (std::size_t j = 0; j < i; ++j) {
      const double* prev = &q[j * d];
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += row[k] * prev[k];
      for (std::size_t k = 0; k < d; ++k) row[k] -= dot * prev[k];
    }
    double norm = 0.0;
    for (std::size_t k = 0; k < d; ++k) norm += row[k] * row[k];
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < d; ++k) row[k] /= norm;
  }
  return q;
}

std::vector<double> apply(const Matrix& m, std::size_t rows, std::size_t cols, const std::vector<double>& x) {
  std::vector<double> y(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) y[i] += m[i * cols + j] * x[j];
  return y;
}

// Fixed random map from the padded latent space to feature space.
class DomainTransform {
 public:
  DomainTransform(const DomainSpec& spec, Rng& rng) : kind_(spec.transform), d_(spec.d_in) {
    rotation_ = random_orthogonal(d_, rng);
    if (kind_ == TransformKind::Anisotropic) {
      std::uniform_real_distribution<double> log_scale(-std::log(3.0), std::log(3.0));
      scales_.resize(d_);
      for (auto& s : scales_) s = std::exp(log_scale(rng));
    } else if (kind_ == TransformKind::Warp) {
      std::normal_distribution<double> normal(0.0, 1.0);
      const double spread = std::sqrt(spec.sigma_between * spec.sigma_between + spec.sigma_within * spec.sigma_within);
      const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d_));
      inner_.resize(d_ * d_);
      outer_.resize(d_ * d_);
      bias_.resize(d_);
      for (auto& w : inner_) w = normal(rng) * inv_sqrt_d / spread;
      for (auto& w : outer_) w = normal(rng) * inv_sqrt_d * spread * spec.warp_strength;
      for (auto& b : bias_) b = normal(rng) * 0.5;
    }
  }

  std::vector<double> operator()(const std::vector<double>& u) const {
    auto x = apply(rotation_, d_, d_, u);
    if (kind_ == TransformKind::Anisotropic) {
      for (std::size_t i = 0; i < d_; ++i) x[i] *= scales_[i];
    } else if (kind_ == TransformKind::Warp) {
      auto h = apply(inner_, d_, d_, u);
      for (std::size_t i = 0; i < d_; ++i) h[i] = std::tanh(h[i] + bias_[i]);
      auto w = apply(outer_, d_, d_, h);
      for (std::size_t i = 0; i < d_; ++i) x[i] += w[i];
    }
    return x;
  }

 private:
  TransformKind kind_;
  std::size_t d_;
  Matrix rotation_;
  std::vector<double> scales_;
  Matrix inner_, outer_;
  std::vector<double> bias_;
};

void validate(const DomainSpec& spec) {
  const auto problems = spec_problems(spec);
  if (problems.empty()) return;
  std::string msg = "invalid domain spec '" + spec.name + "':";
  for (const auto& p : problems) msg += " " + p + ";";
  throw DataError(msg);
}

double parse_number(std::string_view field, std::size_t line) {
  // std::from_chars for double is not available everywhere on GCC 11.
  std::string s(field);
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || errno == ERANGE || !std::isfinite(v)) {
    throw DataError("line " + std::to_string(line) + ": non-numeric feature '" + s + "'");
  }
  return v;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace

std::string to_string(TransformKind kind) {
  switch (kind) {
    case TransformKind::Rotation:
      return "rotation";
    case TransformKind::Anisotropic:
      return "anisotropic";
    case TransformKind::Warp:
      return "warp";
  }
  return "rotation";
}

TransformKind parse_transform_kind(const std::string& name) {
  if (name == "rotation") return TransformKind::Rotation;
  if (name == "anisotropic") return TransformKind::Anisotropic;
  if (name == "warp") return TransformKind::Warp;
  throw DataError("unknown domain transform '" + name + "' (expected rotation, anisotropic or warp)");
}

std::vector<int> Domain::class_ids() const {
  std::vector<int> ids;
  ids.reserve(classes.size());
  for (const auto& [id, _] : classes) ids.push_back(id);
  return ids;
}

std::size_t Domain::num_instances() const {
  std::size_t n = 0;
  for (const auto& [_, v] : classes) n += v.size();
  return n;
}

const std::vector<Instance>& Domain::instances_of(int class_id) const {
  auto it = classes.find(class_id);
  if (it == classes.end()) throw SamplingError("domain '" + name + "' has no class " + std::to_string(class_id));
  return it->second;
}

std::vector<std::string> spec_problems(const DomainSpec& spec) {
  std::vector<std::string> problems;
  if (spec.n_classes < 10) problems.push_back("n_classes must be at least 10");
  if (spec.d_in == 0) problems.push_back("d_in must be positive");
  if (spec.latent_dim > spec.d_in) problems.push_back("latent_dim cannot exceed d_in");
  if (spec.per_class == 0) problems.push_back("per_class must be positive");
  if (!(spec.sigma_between > 0.0)) problems.push_back("sigma_between must be positive");
  if (!(spec.sigma_within > 0.0)) problems.push_back("sigma_within must be positive");
  if (!(spec.nuisance_sigma >= 0.0)) problems.push_back("nuisance_sigma must be nonnegative");
  if (!(spec.warp_strength >= 0.0)) problems.push_back("warp_strength must be nonnegative");
  return problems;
}

Domain make_synthetic_domain(const DomainSpec& spec, std::uint64_t seed) {
  validate(spec);
  const std::size_t latent = spec.latent_dim == 0 ? spec.d_in : spec.latent_dim;

  Rng transform_rng(spec.transform_seed.value_or(seed));
  const DomainTransform transform(spec, transform_rng);

  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Domain domain;
  domain.name = spec.name;
  domain.d_in = spec.d_in;
  domain.spec = spec;
  domain.seed = seed;
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    std::vector<double> center(latent);
    for (auto& x : center) x = spec.sigma_between * normal(rng);
    auto& bucket = domain.classes[static_cast<int>(c)];
    bucket.reserve(spec.per_class);
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      std::vector<double> u(spec.d_in);
      for (std::size_t k = 0; k < latent; ++k) u[k] = center[k] + spec.sigma_within * normal(rng);
      for (std::size_t k = latent; k < spec.d_in; ++k) u[k] = spec.nuisance_sigma * normal(rng);
      bucket.push_back({transform(u), static_cast<int>(c)});
    }
  }
  return domain;
}

Domain load_feature_dataset(const std::filesystem::path& path, const std::string& name) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open feature dataset " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv(line);
  if (header.size() < 2 || header[0] != "label") {
    throw DataError(path.string() + ": unknown header, expected label,f0,...,f{d-1}");
  }
  for (std::size_t i = 1; i < header.size(); ++i) {
    if (header[i] != "f" + std::to_string(i - 1)) {
      throw DataError(path.string() + ": unknown header column '" + std::string(header[i]) + "'");
    }
  }
  Domain domain;
  domain.name = name.empty() ? path.stem().string() : name;
  domain.d_in = header.size() - 1;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_csv(line);
    if (fields.size() != header.size()) {
      throw DataError(path.string() + ": ragged row at line " + std::to_string(line_no) + " (" +
                      std::to_string(fields.size()) + " columns, header has " + std::to_string(header.size()) + ")");
    }
    int label = 0;
    auto [ptr, ec] = std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), label);
    if (ec != std::errc() || ptr != fields[0].data() + fields[0].size() || label < 0) {
      throw DataError(path.string() + ": line " + std::to_string(line_no) + ": label must be a nonnegative integer");
    }
    Instance inst;
    inst.class_id = label;
    inst.features.reserve(domain.d_in);
    for (std::size_t i = 1; i < fields.size(); ++i) inst.features.push_back(parse_number(fields[i], line_no));
    domain.classes[label].push_back(std::move(inst));
  }
  if (domain.classes.empty()) throw DataError(path.string() + ": no instances");
  return domain;
}

void export_feature_dataset(const Domain& domain, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "label";
  for (std::size_t i = 0; i < domain.d_in; ++i) out << ",f" << i;
  out << '\n';
  for (const auto& [id, instances] : domain.classes) {
    for (const auto& inst : instances) {
      out << id;
      for (double x : inst.features) out << ',' << format_double(x);
      out << '\n';
    }
  }
}

std::vector<std::vector<int>> partition_classes(const Domain& domain, std::span<const double> fractions,
                                                std::uint64_t seed) {
  const auto ids = domain.class_ids();
  const double n = static_cast<double>(ids.size());
  if (ids.size() < fractions.size()) {
    throw DataError("domain '" + domain.name + "' has too few classes to split into " +
                    std::to_string(fractions.size()) + " subsets");
  }
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw DataError("split fractions must be positive; a zero fraction yields an empty subset");
    total += f;
  }
  if (total > 1.0 + 1e-9) throw DataError("split fractions sum to more than 1");

  std::vector<std::size_t> sizes;
  std::size_t used = 0;
  for (double f : fractions) {
    auto size = static_cast<std::size_t>(std::lround(f * n));
    size = std::min(size, ids.size() - used);
    if (size == 0) {
      throw DataError("split of domain '" + domain.name + "' leaves an empty subset (fraction " + std::to_string(f) +
                      " of " + std::to_string(ids.size()) + " classes)");
    }
    sizes.push_back(size);
    used += size;
  }

  auto shuffled = ids;
  Rng rng(seed);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  std::vector<std::vector<int>> subsets;
  std::size_t offset = 0;
  for (auto size : sizes) {
    std::vector<int> subset(shuffled.begin() + offset, shuffled.begin() + offset + size);
    std::sort(subset.begin(), subset.end());
    subsets.push_back(std::move(subset));
    offset += size;
  }
  return subsets;
}

ClassSplit split_classes(const Domain& domain, const SplitConfig& cfg) {
  const double fractions[] = {cfg.base_fraction, cfg.wpn_fraction};
  auto parts = partition_classes(domain, fractions, cfg.seed);
  return {std::move(parts[0]), std::move(parts[1])};
}

std::vector<std::size_t> Episode::support_labels() const {
  std::vector<std::size_t> labels(support.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = support_label(i);
  return labels;
}

namespace {
Tensor stack_features(const std::vector<Instance>& items) {
  const std::size_t d = items.front().features.size();
  std::vector<double> values;
  values.reserve(items.size() * d);
  for (const auto& inst : items) values.insert(values.end(), inst.features.begin(), inst.features.end());
  return Tensor::matrix(items.size(), d, std::move(values));
}
}  // namespace

Tensor Episode::support_matrix() const { return stack_features(support); }
Tensor Episode::query_matrix() const { return stack_features(query); }

Episode sample_episode(const Domain& domain, std::span<const int> class_subset, std::size_t n_way, std::size_t k_shot,
                       std::size_t n_query, Rng& rng) {
  if (n_way < 2 || k_shot == 0 || n_query == 0) {
    throw SamplingError("episode needs N >= 2, K >= 1 and L >= 1");
  }
  if (class_subset.size() < n_way) {
    throw SamplingError("cannot sample " + std::to_string(n_way) + "-way episode from " +
                        std::to_string(class_subset.size()) + " classes of domain '" + domain.name + "'");
  }
  const std::size_t per_label = n_query / n_way;
  const std::size_t remainder = n_query % n_way;
  const std::size_t needed = k_shot + per_label + (remainder ? 1 : 0);
  for (int c : class_subset) {
    if (domain.instances_of(c).size() < needed) {
      throw SamplingError("class " + std::to_string(c) + " of domain '" + domain.name + "' has " +
                          std::to_string(domain.instances_of(c).size()) + " instances, episode needs " +
                          std::to_string(needed));
    }
  }

  std::vector<int> pool(class_subset.begin(), class_subset.end());
  // Partial Fisher-Yates: the first N positions become the episode labels in
  // random order.
  for (std::size_t i = 0; i < n_way; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }

  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.n_query = n_query;
  ep.classes.assign(pool.begin(), pool.begin() + n_way);

  struct QueryItem {
    const Instance* inst;
    std::size_t label;
    std::size_t index;
  };
  std::vector<QueryItem> queries;
  for (std::size_t label = 0; label < n_way; ++label) {
    const auto& instances = domain.instances_of(ep.classes[label]);
    const std::size_t q = per_label + (label < remainder ? 1 : 0);
    std::vector<std::size_t> idx(instances.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < k_shot + q; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    for (std::size_t i = 0; i < k_shot; ++i) {
      ep.support.push_back(instances[idx[i]]);
      ep.support_index.push_back(idx[i]);
    }
    for (std::size_t i = k_shot; i < k_shot + q; ++i) queries.push_back({&instances[idx[i]], label, idx[i]});
  }
  std::shuffle(queries.begin(), queries.end(), rng);
  for (const auto& q : queries) {
    ep.query.push_back(*q.inst);
    ep.query_labels.push_back(q.label);
    ep.query_index.push_back(q.index);
  }
  return ep;
}

}  // namespace mxml
