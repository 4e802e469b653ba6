#pragma once

// Parameter checkpoints.
//
// A checkpoint is one JSON document:
//
//   {
//     "format_version": 1,
//     "model_kind": "protonet" | "fomaml" | "wpn",
//     "architecture": { ... model specific ... },
//     "rng_seed": <u64>,
//     "params": [ {"name": "...", "shape": [r, c], "values": [...]}, ... ]
//   }
//
// Values are row-major and written with 17 significant digits, so a
// save/load cycle reproduces every double bit for bit.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "mxml/tensor.hpp"

namespace mxml {

inline constexpr int kCheckpointFormatVersion = 1;

struct ParamEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::string model_kind;
  nlohmann::json architecture = nlohmann::json::object();
  std::uint64_t rng_seed = 0;
  std::vector<ParamEntry> params;

  void add(std::string name, const Tensor& t);
  // Looks up `name` and checks it has the expected shape; throws
  // CheckpointError otherwise.
  const ParamEntry& require(const std::string& name, const Shape& expected) const;
  // Leaf tensor built from an entry (see require()).
  Tensor tensor(const std::string& name, const Shape& expected, bool requires_grad) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& text);

void save_params(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_params(const std::filesystem::path& path);

// Shortest decimal text that is still exact: printf("%.17g").
std::string format_double(double v);

}  // namespace mxml
