#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vitprobe/encoder.hpp"

namespace vitprobe {

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

// Write to a sibling temp file, then rename. Creates parent directories.
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_file(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

std::span<const std::uint8_t> as_bytes(std::span<const float> values);

// Read-only memory mapping of a whole file.
class MappedFile {
 public:
  MappedFile() = default;
  explicit MappedFile(const std::filesystem::path& path);
  ~MappedFile();
  MappedFile(MappedFile&& other) noexcept;
  MappedFile& operator=(MappedFile&& other) noexcept;
  MappedFile(const MappedFile&) = delete;
  MappedFile& operator=(const MappedFile&) = delete;

  std::span<const std::uint8_t> bytes() const { return {data_, size_}; }
  std::span<const float> floats() const {
    return {reinterpret_cast<const float*>(data_), size_ / sizeof(float)};
  }

 private:
  void release();
  const std::uint8_t* data_ = nullptr;
  std::size_t size_ = 0;
};

struct FeatureEntry {
  std::string image_id;
  std::string init;  // InitKind::label()
  std::string file;  // relative to the cache root
  std::string sha256;
};

/// Hidden-state stacks on disk: one raw little-endian float32 blob per
/// (image, init) under <root>/<init>/<image_id>.f32, indexed by manifest.json.
/// put() is safe to call from several workers; save() writes the manifest.
class FeatureCache {
 public:
  explicit FeatureCache(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  // Shape shared by every blob: {taps, patches, width}. Empty until first put.
  const Shape& stack_shape() const { return shape_; }

  bool contains(const std::string& image_id, const InitKind& init) const;
  // Stored digest of the inputs that produced an init's stacks (weights +
  // preprocessing); used to invalidate entries when weights change.
  std::string source_digest(const InitKind& init) const;
  void set_source_digest(const InitKind& init, const std::string& digest);
  void drop(const InitKind& init);

  void put(const HiddenStateStack& stack);
  HiddenStateStack get(const std::string& image_id, const InitKind& init) const;
  // Copies one tap (patches x width) out of the mapped blob.
  Tensor layer(const std::string& image_id, const InitKind& init, std::size_t tap) const;

  std::vector<FeatureEntry> entries() const;
  // Ids of entries whose blob is missing or fails its checksum.
  std::vector<std::string> verify() const;
  void save() const;

 private:
  static std::string key(const std::string& image_id, const std::string& init) {
    return init + "/" + image_id;
  }
  std::filesystem::path blob_path(const FeatureEntry& e) const { return root_ / e.file; }

  std::filesystem::path root_;
  Shape shape_;
  std::map<std::string, FeatureEntry> entries_;
  std::map<std::string, std::string> digests_;
  mutable std::mutex mutex_;
};

}  // namespace vitprobe
