#pragma once

// Bundle format shared by model checkpoints and adapters: a directory holding
// manifest.json (dtype, tensor names/shapes/offsets, plus arbitrary "extra"
// metadata) and tensors.bin (raw little-endian scalars in manifest order).
// Writes go to temp files renamed into place, blob before manifest, so a
// bundle with a manifest is always complete.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "km/common.hpp"
#include "km/tensor.hpp"

static_assert(std::endian::native == std::endian::little,
              "bundle format assumes a little-endian host");

namespace km {

namespace fs = std::filesystem;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Bundle {
  std::map<std::string, Tensor> tensors;
  nlohmann::json extra;

  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail("bundle: missing tensor '" + name + "'");
    return it->second;
  }
};

inline const char* dtype_name() { return sizeof(real) == 8 ? "f64" : "f32"; }

inline void save_bundle(const fs::path& dir, const std::vector<NamedTensor>& tensors,
                        const nlohmann::json& extra) {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "km-bundle-v1";
  manifest["dtype"] = dtype_name();
  manifest["extra"] = extra;

  const fs::path blob_tmp = dir / "tensors.bin.tmp";
  {
    std::ofstream blob(blob_tmp, std::ios::binary | std::ios::trunc);
    if (!blob) fail("bundle: cannot write " + blob_tmp.string());
    uint64_t offset = 0;
    nlohmann::json list = nlohmann::json::array();
    for (const auto& nt : tensors) {
      const auto& data = nt.tensor.data();
      const uint64_t bytes = data.size() * sizeof(real);
      nlohmann::json entry;
      entry["name"] = nt.name;
      entry["shape"] = nt.tensor.shape();
      entry["offset"] = offset;
      entry["bytes"] = bytes;
      list.push_back(entry);
      blob.write(reinterpret_cast<const char*>(data.data()),
                 static_cast<std::streamsize>(bytes));
      offset += bytes;
    }
    manifest["tensors"] = list;
    if (!blob) fail("bundle: short write to " + blob_tmp.string());
  }

  const fs::path manifest_tmp = dir / "manifest.json.tmp";
  {
    std::ofstream mf(manifest_tmp, std::ios::trunc);
    if (!mf) fail("bundle: cannot write " + manifest_tmp.string());
    mf << manifest.dump(2) << "\n";
  }
  fs::rename(blob_tmp, dir / "tensors.bin");
  fs::rename(manifest_tmp, dir / "manifest.json");
}

inline Bundle load_bundle(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream mf(manifest_path);
  if (!mf) fail("bundle: cannot read " + manifest_path.string());
  nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.at("format") != "km-bundle-v1")
    fail("bundle: unknown format in " + manifest_path.string());
  const std::string dtype = manifest.at("dtype").get<std::string>();
  if (dtype != dtype_name())
    fail("bundle: dtype " + dtype + " does not match this build (" + dtype_name() + ")");

  std::ifstream blob(dir / "tensors.bin", std::ios::binary);
  if (!blob) fail("bundle: cannot read " + (dir / "tensors.bin").string());

  Bundle out;
  out.extra = manifest.value("extra", nlohmann::json::object());
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
    const uint64_t offset = entry.at("offset").get<uint64_t>();
    const uint64_t bytes = entry.at("bytes").get<uint64_t>();
    Tensor t = Tensor::zeros(shape);
    if (bytes != t.data().size() * sizeof(real))
      fail("bundle: tensor '" + name + "' byte count disagrees with its shape");
    blob.seekg(static_cast<std::streamoff>(offset));
    blob.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(bytes));
    if (!blob) fail("bundle: short read for tensor '" + name + "'");
    out.tensors.emplace(name, std::move(t));
  }
  return out;
}

inline bool bundle_exists(const fs::path& dir) {
  return fs::exists(dir / "manifest.json") && fs::exists(dir / "tensors.bin");
}

}  // namespace km
