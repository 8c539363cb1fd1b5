#include "cellmamba/train/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "json_util.hpp"

namespace cm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts are unsupported");

namespace {

constexpr char kMagic[8] = {'C', 'M', 'C', 'K', 'P', 'T', '0', '1'};

using json = nlohmann::json;

}  // namespace

void save_checkpoint(const std::string& path, Detector<float>& model,
                     const CheckpointMeta& meta) {
  json manifest;
  manifest["config"] = model_config_to_json(model.cfg);
  manifest["epoch"] = meta.epoch;
  manifest["coupling"] = {{"warmup_epochs", meta.coupling.warmup_epochs},
                          {"epoch", meta.coupling.epoch}};
  manifest["rng"] = meta.rng_state;

  json index = json::array();
  std::uint64_t offset = 0;
  std::vector<std::pair<std::string, Tensor<float>>> params = model.named_params();
  for (const auto& [name, t] : params) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.numel()) * sizeof(float);
  }
  manifest["tensors"] = std::move(index);
  const std::string text = manifest.dump();

  std::ofstream os(path, std::ios::binary);
  CM_CHECK(os.good(), "cannot open '", path, "' for writing");
  os.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = text.size();
  os.write(reinterpret_cast<const char*>(&len), sizeof(len));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : params) {
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  CM_CHECK(os.good(), "writing checkpoint '", path, "' failed");
}

CheckpointMeta load_checkpoint(const std::string& path, Detector<float>& model) {
  std::ifstream is(path, std::ios::binary);
  CM_CHECK(is.good(), "cannot open checkpoint '", path, "'");

  char magic[8];
  is.read(magic, sizeof(magic));
  CM_CHECK(is.gcount() == sizeof(magic) && std::memcmp(magic, kMagic, sizeof(magic)) == 0,
           "'", path, "' is not a checkpoint (bad magic)");
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof(len));
  CM_CHECK(is.good(), "checkpoint '", path, "': truncated header");
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  CM_CHECK(is.gcount() == static_cast<std::streamsize>(len), "checkpoint '", path,
           "': truncated manifest");

  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(str_cat("checkpoint '", path, "': manifest parse error: ", e.what()));
  }

  CheckpointMeta meta;
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(manifest.at("config"));
    meta.epoch = manifest.at("epoch").get<int>();
    meta.coupling.warmup_epochs = manifest.at("coupling").at("warmup_epochs").get<int>();
    meta.coupling.epoch = manifest.at("coupling").at("epoch").get<int>();
    meta.rng_state = manifest.value("rng", std::string());
  } catch (const json::exception& e) {
    throw ValidationError(str_cat("checkpoint '", path, "': manifest field error: ", e.what()));
  }

  // Rebuild with the stored architecture, then overwrite every tensor.
  model = Detector<float>(cfg, 0);
  std::vector<std::pair<std::string, Tensor<float>>> params = model.named_params();
  const auto& index = manifest.at("tensors");
  CM_CHECK(index.is_array() && index.size() == params.size(), "checkpoint '", path, "': index has ",
           index.size(), " tensors, model has ", params.size());

  std::uint64_t expected_offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = index[i];
    const std::string name = entry.at("name").get<std::string>();
    const std::vector<i64> shape = entry.at("shape").get<std::vector<i64>>();
    const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    CM_CHECK(name == params[i].first, "checkpoint '", path, "': tensor ", i, " is '", name,
             "', model expects '", params[i].first, "'");
    CM_CHECK(shape == params[i].second.shape(), "checkpoint '", path, "': '", name, "' has shape ",
             shape_str(shape), ", model expects ", shape_str(params[i].second.shape()));
    CM_CHECK(offset == expected_offset, "checkpoint '", path, "': '", name, "' at offset ", offset,
             ", expected ", expected_offset, " (offsets must partition the blob)");
    expected_offset += static_cast<std::uint64_t>(params[i].second.numel()) * sizeof(float);
  }

  for (auto& [name, t] : params) {
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
    CM_CHECK(is.gcount() == static_cast<std::streamsize>(t.numel() * sizeof(float)),
             "checkpoint '", path, "': blob truncated at '", name, "'");
  }
  is.peek();
  CM_CHECK(is.eof(), "checkpoint '", path, "': trailing bytes after the blob");
  return meta;
}

}  // namespace cm
