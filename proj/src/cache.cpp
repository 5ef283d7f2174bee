#include "vitprobe/cache.hpp"

#include <fcntl.h>
#include <openssl/evp.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <memory>
#include <sstream>

#include "vitprobe/errors.hpp"
#include "vitprobe/image.hpp"

namespace vitprobe {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string hex(const unsigned char* digest, unsigned int len) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(digits[digest[i] >> 4]);
    out.push_back(digits[digest[i] & 15]);
  }
  return out;
}

struct DigestContext {
  DigestContext() : ctx(EVP_MD_CTX_new()) {
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
      throw IoError("sha256 initialisation failed");
    }
  }
  ~DigestContext() { EVP_MD_CTX_free(ctx); }
  void update(const void* data, std::size_t n) {
    if (n != 0) EVP_DigestUpdate(ctx, data, n);
  }
  std::string finish() {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    return hex(digest, len);
  }
  EVP_MD_CTX* ctx;
};

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  DigestContext d;
  d.update(bytes.data(), bytes.size());
  return d.finish();
}

std::string sha256_hex(std::string_view text) {
  DigestContext d;
  d.update(text.data(), text.size());
  return d.finish();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  DigestContext d;
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    d.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return d.finish();
}

void write_file_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_text_file(const fs::path& path, std::string_view text) {
  write_file_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::string read_text_file(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

std::span<const std::uint8_t> as_bytes(std::span<const float> values) {
  return {reinterpret_cast<const std::uint8_t*>(values.data()), values.size_bytes()};
}

// ---- MappedFile ----------------------------------------------------------------

MappedFile::MappedFile(const fs::path& path) {
  const int fd = ::open(path.c_str(), O_RDONLY);
  if (fd < 0) throw IoError("cannot open " + path.string());
  struct stat st {};
  if (::fstat(fd, &st) != 0) {
    ::close(fd);
    throw IoError("cannot stat " + path.string());
  }
  size_ = static_cast<std::size_t>(st.st_size);
  if (size_ > 0) {
    void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd, 0);
    if (p == MAP_FAILED) {
      ::close(fd);
      throw IoError("cannot map " + path.string());
    }
    data_ = static_cast<const std::uint8_t*>(p);
  }
  ::close(fd);
}

MappedFile::~MappedFile() { release(); }

MappedFile::MappedFile(MappedFile&& other) noexcept : data_(other.data_), size_(other.size_) {
  other.data_ = nullptr;
  other.size_ = 0;
}

MappedFile& MappedFile::operator=(MappedFile&& other) noexcept {
  if (this != &other) {
    release();
    data_ = other.data_;
    size_ = other.size_;
    other.data_ = nullptr;
    other.size_ = 0;
  }
  return *this;
}

void MappedFile::release() {
  if (data_) ::munmap(const_cast<std::uint8_t*>(data_), size_);
  data_ = nullptr;
  size_ = 0;
}

// ---- FeatureCache --------------------------------------------------------------

FeatureCache::FeatureCache(fs::path root) : root_(std::move(root)) {
  const fs::path manifest = root_ / "manifest.json";
  if (!fs::exists(manifest)) return;
  const json m = json::parse(read_text_file(manifest));
  shape_ = m.at("shape").get<Shape>();
  for (const auto& [init, digest] : m.at("sources").items()) {
    digests_[init] = digest.get<std::string>();
  }
  for (const auto& e : m.at("entries")) {
    FeatureEntry entry{e.at("image_id").get<std::string>(), e.at("init").get<std::string>(),
                       e.at("file").get<std::string>(), e.at("sha256").get<std::string>()};
    entries_[key(entry.image_id, entry.init)] = std::move(entry);
  }
}

bool FeatureCache::contains(const std::string& image_id, const InitKind& init) const {
  std::lock_guard lock(mutex_);
  const auto it = entries_.find(key(image_id, init.label()));
  return it != entries_.end() && fs::exists(blob_path(it->second));
}

std::string FeatureCache::source_digest(const InitKind& init) const {
  std::lock_guard lock(mutex_);
  const auto it = digests_.find(init.label());
  return it == digests_.end() ? std::string() : it->second;
}

void FeatureCache::set_source_digest(const InitKind& init, const std::string& digest) {
  std::lock_guard lock(mutex_);
  digests_[init.label()] = digest;
}

void FeatureCache::drop(const InitKind& init) {
  std::lock_guard lock(mutex_);
  const std::string label = init.label();
  for (auto it = entries_.begin(); it != entries_.end();) {
    if (it->second.init == label) {
      fs::remove(blob_path(it->second));
      it = entries_.erase(it);
    } else {
      ++it;
    }
  }
  digests_.erase(label);
}

void FeatureCache::put(const HiddenStateStack& stack) {
  const std::string label = stack.init.label();
  FeatureEntry entry{stack.image_id, label, label + "/" + stack.image_id + ".f32", {}};
  const auto bytes = as_bytes(stack.values.values());
  entry.sha256 = sha256_hex(bytes);
  {
    std::lock_guard lock(mutex_);
    if (shape_.empty()) {
      shape_ = stack.values.shape();
    } else if (shape_ != stack.values.shape()) {
      throw DimensionError("stack " + stack.image_id + " has shape " +
                           shape_string(stack.values.shape()) + ", cache holds " +
                           shape_string(shape_));
    }
  }
  write_file_bytes(blob_path(entry), bytes);
  std::lock_guard lock(mutex_);
  entries_[key(entry.image_id, entry.init)] = std::move(entry);
}

HiddenStateStack FeatureCache::get(const std::string& image_id, const InitKind& init) const {
  FeatureEntry entry;
  {
    std::lock_guard lock(mutex_);
    const auto it = entries_.find(key(image_id, init.label()));
    if (it == entries_.end()) {
      throw DataError("feature cache has no " + init.label() + " stack for '" + image_id + "'");
    }
    entry = it->second;
  }
  const MappedFile file(blob_path(entry));
  const auto floats = file.floats();
  if (floats.size() != shape_numel(shape_)) {
    throw DataError("feature blob " + blob_path(entry).string() + " has the wrong size");
  }
  HiddenStateStack stack;
  stack.values = Tensor(shape_, std::vector<float>(floats.begin(), floats.end()));
  stack.image_id = image_id;
  stack.init = init;
  return stack;
}

Tensor FeatureCache::layer(const std::string& image_id, const InitKind& init,
                           std::size_t tap) const {
  FeatureEntry entry;
  {
    std::lock_guard lock(mutex_);
    const auto it = entries_.find(key(image_id, init.label()));
    if (it == entries_.end()) {
      throw DataError("feature cache has no " + init.label() + " stack for '" + image_id + "'");
    }
    entry = it->second;
  }
  if (tap >= shape_.at(0)) {
    throw DataError("feature cache has no layer " + std::to_string(tap) + " (taps: " +
                    std::to_string(shape_.at(0)) + ")");
  }
  const MappedFile file(blob_path(entry));
  const auto floats = file.floats();
  const std::size_t per_tap = shape_[1] * shape_[2];
  if (floats.size() != shape_numel(shape_)) {
    throw DataError("feature blob " + blob_path(entry).string() + " has the wrong size");
  }
  const auto first = floats.begin() + static_cast<std::ptrdiff_t>(tap * per_tap);
  return Tensor({shape_[1], shape_[2]},
                std::vector<float>(first, first + static_cast<std::ptrdiff_t>(per_tap)));
}

std::vector<FeatureEntry> FeatureCache::entries() const {
  std::lock_guard lock(mutex_);
  std::vector<FeatureEntry> out;
  for (const auto& [k, e] : entries_) out.push_back(e);
  return out;
}

std::vector<std::string> FeatureCache::verify() const {
  std::vector<std::string> bad;
  for (const auto& e : entries()) {
    const fs::path p = blob_path(e);
    if (!fs::exists(p) || sha256_file(p) != e.sha256) bad.push_back(key(e.image_id, e.init));
  }
  return bad;
}

void FeatureCache::save() const {
  std::lock_guard lock(mutex_);
  json entries = json::array();
  for (const auto& [k, e] : entries_) {
    entries.push_back(
        {{"image_id", e.image_id}, {"init", e.init}, {"file", e.file}, {"sha256", e.sha256}});
  }
  json sources = json::object();
  for (const auto& [init, digest] : digests_) sources[init] = digest;
  const json m = {{"dtype", "float32"},
                  {"layout", "taps,patches,width"},
                  {"shape", shape_},
                  {"sources", sources},
                  {"entries", entries}};
  write_text_file(root_ / "manifest.json", m.dump(2) + "\n");
}

}  // namespace vitprobe
