#include "repneuron/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "repneuron/error.hpp"

namespace repneuron {

namespace {

constexpr char kMagic[8] = {'R', 'N', 'C', 'K', 'P', 'T', '\0', '\0'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void WriteU32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t ReadU32(std::istream& in, const std::string& path) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) {
    Fail(ErrorKind::kData, path + ": truncated checkpoint");
  }
  return v;
}

}  // namespace

nlohmann::ordered_json ModelConfigToJson(const ModelConfig& config) {
  nlohmann::ordered_json j;
  j["n_layers"] = config.n_layers;
  j["n_heads"] = config.n_heads;
  j["d_model"] = config.d_model;
  j["d_ff"] = config.d_ff;
  j["vocab_size"] = config.vocab_size;
  j["max_context"] = config.max_context;
  j["activation"] = ActivationKindName(config.activation);
  j["seed"] = config.seed;
  return j;
}

ModelConfig ModelConfigFromJson(const nlohmann::json& json) {
  static const std::set<std::string> kKeys = {"n_layers",   "n_heads",     "d_model",
                                              "d_ff",       "vocab_size",  "max_context",
                                              "activation", "seed"};
  if (!json.is_object()) Fail(ErrorKind::kConfig, "model config must be an object");
  for (const auto& [key, value] : json.items()) {
    if (!kKeys.contains(key)) Fail(ErrorKind::kConfig, "unknown model config key '" + key + "'");
  }
  ModelConfig c;
  try {
    c.n_layers = json.value("n_layers", c.n_layers);
    c.n_heads = json.value("n_heads", c.n_heads);
    c.d_model = json.value("d_model", c.d_model);
    c.d_ff = json.value("d_ff", c.d_ff);
    c.vocab_size = json.value("vocab_size", c.vocab_size);
    c.max_context = json.value("max_context", c.max_context);
    if (json.contains("activation")) {
      c.activation = ParseActivationKind(json.at("activation").get<std::string>());
    }
    c.seed = json.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorKind::kConfig, std::string("model config: ") + e.what());
  }
  c.Validate();
  return c;
}

void SaveCheckpoint(const std::string& path, const Model& model) {
  nlohmann::ordered_json header;
  header["config"] = ModelConfigToJson(model.config());
  header["tensors"] = nlohmann::ordered_json::array();
  for (const auto& t : model.layout().tensors) {
    header["tensors"].push_back(
        {{"name", t.name}, {"offset", t.offset}, {"rows", t.rows}, {"cols", t.cols}});
  }
  header["parameters"] = model.parameters().size();
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) Fail(ErrorKind::kIo, "cannot write " + path);
  out.write(kMagic, sizeof(kMagic));
  WriteU32(out, kCheckpointVersion);
  WriteU32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(model.parameters().data()),
            static_cast<std::streamsize>(model.parameters().size() * sizeof(double)));
  if (!out) Fail(ErrorKind::kIo, "write failed: " + path);
}

Model LoadCheckpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorKind::kIo, "cannot read " + path);
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    Fail(ErrorKind::kData, path + ": not a checkpoint");
  }
  const std::uint32_t version = ReadU32(in, path);
  if (version != kCheckpointVersion) {
    Fail(ErrorKind::kData, path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t length = ReadU32(in, path);
  std::string text(length, '\0');
  if (!in.read(text.data(), length)) Fail(ErrorKind::kData, path + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorKind::kData, path + ": bad header: " + e.what());
  }
  const ModelConfig config = ModelConfigFromJson(header.at("config"));
  const auto layout = ParameterLayout::For(config);
  if (header.value("parameters", std::size_t{0}) != layout.total) {
    Fail(ErrorKind::kData, path + ": parameter count does not match config");
  }
  std::vector<double> params(layout.total);
  if (!in.read(reinterpret_cast<char*>(params.data()),
               static_cast<std::streamsize>(params.size() * sizeof(double)))) {
    Fail(ErrorKind::kData, path + ": truncated parameters");
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    Fail(ErrorKind::kData, path + ": trailing bytes after parameters");
  }
  return Model(config, std::move(params));
}

}  // namespace repneuron
