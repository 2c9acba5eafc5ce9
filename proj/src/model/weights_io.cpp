// SPDX-License-Identifier: Apache-2.0
#include "lime/weights_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "lime/errors.hpp"

namespace lime::model {
namespace {

constexpr char kMagic[6] = {'L', 'I', 'M', 'E', 'W', '1'};

static_assert(std::endian::native == std::endian::little, "weight files are little-endian");

void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("weight file truncated");
  return v;
}

std::filesystem::path manifest_path(const std::filesystem::path& file) {
  auto p = file;
  p += ".json";
  return p;
}

}  // namespace

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers}, {"num_heads", c.num_heads},     {"model_dim", c.model_dim},
          {"vocab_size", c.vocab_size}, {"max_sequence", c.max_sequence}, {"ffn_dim", c.ffn_dim},
          {"patch_dim", c.patch_dim},   {"normalization", to_string(c.normalization)}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.num_layers = j.value("num_layers", c.num_layers);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.model_dim = j.value("model_dim", c.model_dim);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_sequence = j.value("max_sequence", c.max_sequence);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.patch_dim = j.value("patch_dim", c.patch_dim);
    if (j.contains("normalization")) c.normalization = normalization_from_string(j.at("normalization").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

void save_weights(const ModelWeights& w, const std::filesystem::path& file, const nlohmann::json& metadata) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot open " + file.string() + " for writing");
  const auto named = w.named_tensors();
  out.write(kMagic, sizeof kMagic);
  write_u64(out, named.size());
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : named) {
    write_u64(out, 2);
    write_u64(out, t->rows());
    write_u64(out, t->cols());
    const auto data = t->data();
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    tensors.push_back({{"name", name}, {"shape", {t->rows(), t->cols()}}});
  }
  if (!out) throw IoError("write failed: " + file.string());

  std::ofstream man(manifest_path(file));
  if (!man) throw IoError("cannot write manifest for " + file.string());
  nlohmann::json j = {{"format", "LIMEW1"}, {"config", config_to_json(w.config)}, {"tensors", tensors},
                      {"metadata", metadata}};
  man << j.dump(2) << '\n';
}

nlohmann::json load_metadata(const std::filesystem::path& file) {
  std::ifstream in(manifest_path(file));
  if (!in) throw IoError("missing manifest " + manifest_path(file).string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed manifest: ") + e.what());
  }
}

ModelWeights load_weights(const std::filesystem::path& file) {
  const auto manifest = load_metadata(file);
  if (manifest.value("format", "") != "LIMEW1") throw IoError("unknown weight format");
  ModelWeights w = ModelWeights::initialize(config_from_json(manifest.at("config")), 0);

  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw IoError("bad magic in " + file.string());
  }
  auto named = w.named_tensors();
  if (read_u64(in) != named.size()) throw IoError("tensor count mismatch");
  for (auto& [name, t] : named) {
    if (read_u64(in) != 2) throw IoError("tensor " + name + ": unsupported rank");
    const auto r = read_u64(in);
    const auto c = read_u64(in);
    if (r != t->rows() || c != t->cols()) throw IoError("tensor " + name + ": shape mismatch");
    auto data = t->data();
    if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)))) {
      throw IoError("weight file truncated at " + name);
    }
  }
  return w;
}

}  // namespace lime::model
