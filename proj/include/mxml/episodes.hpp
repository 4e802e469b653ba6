#pragma once

// Domains of labeled feature vectors and N-way K-shot episodes drawn from them.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mxml/rng.hpp"
#include "mxml/tensor.hpp"

namespace mxml {

struct Instance {
  std::vector<double> features;
  int class_id = 0;
};

enum class TransformKind { Rotation, Anisotropic, Warp };

std::string to_string(TransformKind kind);
TransformKind parse_transform_kind(const std::string& name);

// Generator for a synthetic domain. Class centers are drawn in a latent space
// of `latent_dim` informative coordinates; the remaining d_in - latent_dim
// coordinates carry class-independent nuisance noise. The padded latent vector
// is then pushed through the domain transform.
struct DomainSpec {
  std::string name = "synthetic";
  std::size_t n_classes = 20;
  std::size_t d_in = 16;
  std::size_t latent_dim = 0;  // 0 means d_in
  std::size_t per_class = 50;
  double sigma_between = 3.0;
  double sigma_within = 0.5;
  double nuisance_sigma = 0.0;
  TransformKind transform = TransformKind::Rotation;
  // Seeds the transform separately from the class centers; unset means the
  // data seed. Two domains sharing transform kind and seed live in the same
  // feature geometry but hold different classes.
  std::optional<std::uint64_t> transform_seed;
  double warp_strength = 1.0;
};

struct Domain {
  std::string name;
  std::size_t d_in = 0;
  std::map<int, std::vector<Instance>> classes;
  std::optional<DomainSpec> spec;
  std::uint64_t seed = 0;

  std::vector<int> class_ids() const;
  std::size_t num_instances() const;
  const std::vector<Instance>& instances_of(int class_id) const;
};

// Every invalid field of `spec`, one message each.
std::vector<std::string> spec_problems(const DomainSpec& spec);
Domain make_synthetic_domain(const DomainSpec& spec, std::uint64_t seed);

// CSV with header `label,f0,...,f{d-1}` and one instance per row.
Domain load_feature_dataset(const std::filesystem::path& path, const std::string& name = "");
void export_feature_dataset(const Domain& domain, const std::filesystem::path& path);

struct SplitConfig {
  double base_fraction = 0.8;
  double wpn_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct ClassSplit {
  std::vector<int> base;
  std::vector<int> wpn;
};

// Disjoint class subsets of sizes round(fraction * n_classes), taken in order
// from a seeded shuffle. Throws DataError when a subset would be empty or the
// fractions exceed 1.
std::vector<std::vector<int>> partition_classes(const Domain& domain, std::span<const double> fractions,
                                                std::uint64_t seed);
ClassSplit split_classes(const Domain& domain, const SplitConfig& cfg);

struct Episode {
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::size_t n_query = 0;
  // Episode label -> domain class id.
  std::vector<int> classes;
  // Label-major: rows [n*K, (n+1)*K) carry episode label n.
  std::vector<Instance> support;
  std::vector<Instance> query;
  std::vector<std::size_t> query_labels;
  // Position of each instance inside its class list, for disjointness checks.
  std::vector<std::size_t> support_index;
  std::vector<std::size_t> query_index;

  std::size_t support_label(std::size_t i) const { return i / k_shot; }
  std::vector<std::size_t> support_labels() const;
  std::size_t dim() const { return support.front().features.size(); }
  Tensor support_matrix() const;
  Tensor query_matrix() const;
};

// Queries are spread over the N labels as evenly as L allows, the remainder
// going to the lowest labels. Throws SamplingError when the subset has fewer
// than N classes or a class lacks K + ceil(L/N) instances.
Episode sample_episode(const Domain& domain, std::span<const int> class_subset, std::size_t n_way,
                       std::size_t k_shot, std::size_t n_query, Rng& rng);

}  // namespace mxml
