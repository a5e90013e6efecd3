#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "unimod/errors.hpp"
#include "unimod/tensor.hpp"

namespace unimod {

// Tensor dumps are a manifest.json next to one raw .bin per tensor. Payloads
// are the flat row-major scalars, little-endian, no header.
//
// manifest.json:
//   {"format": "unimod.tensors.v1",
//    "tensors": [{"name": ..., "shape": [...], "dtype": "f32"|"f64",
//                 "file": "<name>.bin"}]}

template <class S>
const char* dtype_name() {
  if constexpr (sizeof(S) == 4)
    return "f32";
  else
    return "f64";
}

struct NamedTensorRef {
  std::string name;
  Shape shape;
  const void* data;
  std::size_t bytes;
  std::string dtype;
};

template <class S>
NamedTensorRef named_ref(const std::string& name, const Tensor<S>& t) {
  return {name, t.shape(), t.raw().data(),
          static_cast<std::size_t>(t.size()) * sizeof(S), dtype_name<S>()};
}

inline void write_tensor_dump(const std::filesystem::path& dir,
                              const std::vector<NamedTensorRef>& tensors) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "unimod.tensors.v1";
  manifest["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) {
    std::string file = t.name + ".bin";
    std::ofstream bin(dir / file, std::ios::binary | std::ios::trunc);
    if (!bin) throw Error("cannot open " + (dir / file).string());
    bin.write(static_cast<const char*>(t.data),
              static_cast<std::streamsize>(t.bytes));
    if (!bin) throw Error("short write to " + (dir / file).string());
    nlohmann::json entry;
    entry["name"] = t.name;
    entry["shape"] = t.shape;
    entry["dtype"] = t.dtype;
    entry["file"] = file;
    manifest["tensors"].push_back(entry);
  }
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  if (!mf) throw Error("cannot open " + (dir / "manifest.json").string());
  mf << manifest.dump(2) << "\n";
}

template <class S>
std::vector<std::pair<std::string, Tensor<S>>> read_tensor_dump(
    const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw Error("cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.value("format", "") != "unimod.tensors.v1")
    throw Error("unrecognized tensor dump format in " + dir.string());
  std::vector<std::pair<std::string, Tensor<S>>> out;
  for (const auto& entry : manifest.at("tensors")) {
    if (entry.at("dtype").template get<std::string>() != dtype_name<S>())
      throw Error("dtype mismatch for tensor " +
                  entry.at("name").template get<std::string>());
    Shape shape = entry.at("shape").template get<Shape>();
    Tensor<S> t = Tensor<S>::zeros(shape);
    std::ifstream bin(dir / entry.at("file").template get<std::string>(),
                      std::ios::binary);
    if (!bin) throw Error("cannot open payload for tensor " +
                          entry.at("name").template get<std::string>());
    bin.read(reinterpret_cast<char*>(t.raw().data()),
             static_cast<std::streamsize>(t.size() * sizeof(S)));
    if (bin.gcount() != static_cast<std::streamsize>(t.size() * sizeof(S)))
      throw Error("short payload for tensor " +
                  entry.at("name").template get<std::string>());
    out.emplace_back(entry.at("name").template get<std::string>(),
                     std::move(t));
  }
  return out;
}

}  // namespace unimod
