#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace icdyn {

// A JSON manifest plus a blob of little-endian 32-bit floats, arrays
// concatenated in manifest order. Shared by checkpoints and datasets.
struct NamedArray {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;
};

struct Float32Bundle {
  std::string kind;     // "checkpoint", "trajectory", "tokens", ...
  nlohmann::json meta;  // free-form, written under "meta"
  std::vector<NamedArray> arrays;

  const NamedArray& at(const std::string& name) const;
  bool contains(const std::string& name) const;
};

// Writes <manifest_path> and a sibling blob named after it with ".bin".
void write_bundle(const Float32Bundle& bundle, const std::string& manifest_path);
Float32Bundle read_bundle(const std::string& manifest_path);

std::string blob_path_for(const std::string& manifest_path);

// Deterministic JSON text: sorted keys, 2-space indent, trailing newline.
void write_json_file(const nlohmann::json& j, const std::string& path);
nlohmann::json read_json_file(const std::string& path);

}  // namespace icdyn
