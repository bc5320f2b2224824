#include "icdyn/dataset.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "icdyn/errors.hpp"

namespace icdyn {

namespace {

constexpr const char* kFormat = "icdyn.f32bundle";
constexpr int kVersion = 1;

std::uint32_t to_little(std::uint32_t x) {
  if constexpr (std::endian::native == std::endian::little) {
    return x;
  } else {
    return ((x & 0xffu) << 24) | ((x & 0xff00u) << 8) | ((x >> 8) & 0xff00u) | (x >> 24);
  }
}

}  // namespace

const NamedArray& Float32Bundle::at(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw FormatError("bundle has no array named '" + name + "'");
}

bool Float32Bundle::contains(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return true;
  }
  return false;
}

std::string blob_path_for(const std::string& manifest_path) {
  std::filesystem::path p(manifest_path);
  p.replace_extension(".bin");
  return p.string();
}

void write_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path);
  os << j.dump(2) << '\n';
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void write_bundle(const Float32Bundle& bundle, const std::string& manifest_path) {
  const std::string blob = blob_path_for(manifest_path);
  nlohmann::json manifest;
  manifest["format"] = kFormat;
  manifest["version"] = kVersion;
  manifest["kind"] = bundle.kind;
  manifest["dtype"] = "float32";
  manifest["byte_order"] = "little";
  manifest["blob"] = std::filesystem::path(blob).filename().string();
  manifest["meta"] = bundle.meta.is_null() ? nlohmann::json::object() : bundle.meta;
  auto tensors = nlohmann::json::array();
  std::int64_t offset = 0;
  std::ofstream os(blob, std::ios::binary);
  if (!os) throw FormatError("cannot write " + blob);
  for (const auto& a : bundle.arrays) {
    std::int64_t count = 1;
    for (auto d : a.shape) count *= d;
    if (count != static_cast<std::int64_t>(a.data.size())) {
      throw InvalidArgument("write_bundle: shape of '" + a.name + "' does not match its data");
    }
    tensors.push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}, {"count", count}});
    for (float f : a.data) {
      const std::uint32_t word = to_little(std::bit_cast<std::uint32_t>(f));
      os.write(reinterpret_cast<const char*>(&word), sizeof(word));
    }
    offset += count;
  }
  manifest["tensors"] = tensors;
  if (!os) throw FormatError("short write to " + blob);
  write_json_file(manifest, manifest_path);
}

Float32Bundle read_bundle(const std::string& manifest_path) {
  const auto manifest = read_json_file(manifest_path);
  Float32Bundle out;
  try {
    if (manifest.at("format") != kFormat) throw FormatError(manifest_path + ": unknown format");
    if (manifest.at("dtype") != "float32" || manifest.at("byte_order") != "little") {
      throw FormatError(manifest_path + ": only little-endian float32 blobs are supported");
    }
    out.kind = manifest.at("kind").get<std::string>();
    out.meta = manifest.at("meta");
    const auto blob = (std::filesystem::path(manifest_path).parent_path() /
                       manifest.at("blob").get<std::string>())
                          .string();
    std::ifstream is(blob, std::ios::binary);
    if (!is) throw FormatError("cannot open blob " + blob);
    for (const auto& t : manifest.at("tensors")) {
      NamedArray a;
      a.name = t.at("name").get<std::string>();
      a.shape = t.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = t.at("offset").get<std::int64_t>();
      const auto count = t.at("count").get<std::int64_t>();
      a.data.resize(count);
      is.seekg(offset * 4);
      for (std::int64_t i = 0; i < count; ++i) {
        std::uint32_t word = 0;
        is.read(reinterpret_cast<char*>(&word), sizeof(word));
        a.data[i] = std::bit_cast<float>(to_little(word));
      }
      if (!is) throw FormatError("blob " + blob + " is truncated at array '" + a.name + "'");
      out.arrays.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path + ": " + e.what());
  }
  return out;
}

}  // namespace icdyn
