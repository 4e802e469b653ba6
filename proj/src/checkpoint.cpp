#include "mxml/checkpoint.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mxml/error.hpp"

namespace mxml {

std::string format_double(double v) {
  if (!std::isfinite(v)) throw NumericError("cannot serialize a non-finite value");
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void Checkpoint::add(std::string name, const Tensor& t) {
  params.push_back({std::move(name), t.shape(), {t.values().begin(), t.values().end()}});
}

const ParamEntry& Checkpoint::require(const std::string& name, const Shape& expected) const {
  for (const auto& p : params) {
    if (p.name != name) continue;
    if (p.shape != expected) {
      throw CheckpointError("parameter '" + name + "' has shape " + shape_to_string(p.shape) + ", architecture expects " +
                            shape_to_string(expected));
    }
    return p;
  }
  throw CheckpointError("checkpoint is missing parameter '" + name + "'");
}

Tensor Checkpoint::tensor(const std::string& name, const Shape& expected, bool requires_grad) const {
  const auto& p = require(name, expected);
  return Tensor(p.shape, p.values, requires_grad);
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::ostringstream os;
  os << "{\n";
  os << "  \"format_version\": " << kCheckpointFormatVersion << ",\n";
  os << "  \"model_kind\": " << nlohmann::json(ckpt.model_kind).dump() << ",\n";
  os << "  \"architecture\": " << ckpt.architecture.dump() << ",\n";
  os << "  \"rng_seed\": " << ckpt.rng_seed << ",\n";
  os << "  \"params\": [";
  for (std::size_t k = 0; k < ckpt.params.size(); ++k) {
    const auto& p = ckpt.params[k];
    os << (k ? ",\n" : "\n") << "    {\"name\": " << nlohmann::json(p.name).dump() << ", \"shape\": [";
    for (std::size_t i = 0; i < p.shape.size(); ++i) os << (i ? ", " : "") << p.shape[i];
    os << "], \"values\": [";
    for (std::size_t i = 0; i < p.values.size(); ++i) os << (i ? ", " : "") << format_double(p.values[i]);
    os << "]}";
  }
  os << "\n  ]\n}\n";
  return os.str();
}

Checkpoint parse_checkpoint(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
  try {
    if (!doc.is_object() || !doc.contains("format_version")) throw CheckpointError("malformed checkpoint: no format_version");
    const int version = doc.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
      throw CheckpointVersionError("unsupported checkpoint format_version " + std::to_string(version) + " (expected " +
                                   std::to_string(kCheckpointFormatVersion) + ")");
    }
    Checkpoint ckpt;
    ckpt.model_kind = doc.at("model_kind").get<std::string>();
    ckpt.architecture = doc.at("architecture");
    ckpt.rng_seed = doc.at("rng_seed").get<std::uint64_t>();
    for (const auto& entry : doc.at("params")) {
      ParamEntry p;
      p.name = entry.at("name").get<std::string>();
      p.shape = entry.at("shape").get<Shape>();
      p.values = entry.at("values").get<std::vector<double>>();
      if (shape_numel(p.shape) != p.values.size()) {
        throw CheckpointError("malformed checkpoint: parameter '" + p.name + "' declares shape " +
                              shape_to_string(p.shape) + " but holds " + std::to_string(p.values.size()) + " values");
      }
      ckpt.params.push_back(std::move(p));
    }
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_params(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out << serialize_checkpoint(ckpt);
  if (!out) throw CheckpointError("write to " + path.string() + " failed");
}

Checkpoint load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_checkpoint(buf.str());
}

}  // namespace mxml
