#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "iblm/error.hpp"
#include "iblm/nets.hpp"

// Flat named-tensor archive. Layout (all integers and floats little-endian):
//
//   8 bytes   magic "IBLMCKPT"
//   u32       format version (1)
//   u32       tensor count
//   per tensor, in order:
//     u32     name length in bytes, followed by the UTF-8 name
//     u32     rank, followed by rank x u64 extents
//     f64 x   product(extents) values, row-major
//
// A JSON manifest `<archive>.manifest.json` lists name, shape, byte offset
// of the first value, and value count for every tensor.
namespace iblm::checkpoint {

inline constexpr std::array<char, 8> kMagic = {'I', 'B', 'L', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

namespace detail {

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

template <class T>
void put(std::ostream& os, T v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw Error("checkpoint: truncated archive");
  return to_little(v);
}

}  // namespace detail

inline std::filesystem::path manifest_path(const std::filesystem::path& archive) {
  return archive.string() + ".manifest.json";
}

inline void save(const ParameterSet& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("checkpoint: cannot open " + path.string() + " for writing");
  nlohmann::json manifest;
  manifest["format"] = "iblm-checkpoint";
  manifest["version"] = kVersion;
  manifest["tensors"] = nlohmann::json::array();
  os.write(kMagic.data(), kMagic.size());
  detail::put<std::uint32_t>(os, kVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(e.value.rank()));
    for (auto extent : e.value.shape()) detail::put<std::uint64_t>(os, extent);
    const auto offset = static_cast<std::uint64_t>(os.tellp());
    for (double v : e.value.values()) detail::put<double>(os, v);
    manifest["tensors"].push_back(
        {{"name", e.name}, {"shape", e.value.shape()}, {"offset", offset}, {"count", e.value.size()}});
  }
  if (!os) throw Error("checkpoint: write failed for " + path.string());
  std::ofstream ms(manifest_path(path));
  ms << manifest.dump(2) << '\n';
}

inline ParameterSet load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("checkpoint: cannot open " + path.string());
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) throw Error("checkpoint: bad magic in " + path.string());
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kVersion) throw Error("checkpoint: unsupported version " + std::to_string(version));
  const auto count = detail::get<std::uint32_t>(is);
  ParameterSet params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::get<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto rank = detail::get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& extent : shape) extent = static_cast<std::size_t>(detail::get<std::uint64_t>(is));
    Tensor t(shape);
    for (auto& v : t.storage()) v = detail::get<double>(is);
    params.add(std::move(name), std::move(t));
  }
  return params;
}

}  // namespace iblm::checkpoint
