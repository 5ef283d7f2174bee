#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "vitprobe/tensor.hpp"

namespace vitprobe {

/// Flat name -> tensor map plus free-form string metadata. This is the
/// in-memory form of a safetensors container.
struct NamedTensorStore {
  std::map<std::string, Tensor> entries;
  std::map<std::string, std::string> metadata;

  bool contains(const std::string& name) const { return entries.count(name) > 0; }
  const Tensor& get(const std::string& name) const;
  std::size_t parameter_count() const;

  friend bool operator==(const NamedTensorStore&, const NamedTensorStore&) = default;
};

// Reads F32, F16, BF16 and F64 tensors (converted to float32).
NamedTensorStore read_safetensors(const std::filesystem::path& path);

// Writes every tensor as F32 in name order; output is byte-deterministic.
void write_safetensors(const std::filesystem::path& path, const NamedTensorStore& store);

}  // namespace vitprobe
