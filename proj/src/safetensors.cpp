#include "vitprobe/safetensors.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "vitprobe/errors.hpp"

namespace vitprobe {

static_assert(std::endian::native == std::endian::little,
              "safetensors I/O assumes a little-endian host");

using json = nlohmann::json;

const Tensor& NamedTensorStore::get(const std::string& name) const {
  auto it = entries.find(name);
  if (it == entries.end()) throw LoadError("missing tensor '" + name + "'");
  return it->second;
}

std::size_t NamedTensorStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries) n += t.size();
  return n;
}

namespace {

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = (h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1f;
  std::uint32_t mant = h & 0x3ff;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while (!(mant & 0x400)) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3ff;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F32") return 4;
  if (dtype == "F16" || dtype == "BF16") return 2;
  if (dtype == "F64") return 8;
  return 0;
}

}  // namespace

NamedTensorStore read_safetensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open weight container " + path.string());

  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  const auto file_size = std::filesystem::file_size(path);
  if (!in || header_len == 0 || header_len + 8 > file_size) {
    throw LoadError(path.string() + ": not a safetensors container");
  }
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));

  json meta;
  try {
    meta = json::parse(header);
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": malformed safetensors header: " + e.what());
  }

  const std::uint64_t data_start = 8 + header_len;
  const std::uint64_t data_len = file_size - data_start;
  std::vector<char> blob(data_len);
  in.read(blob.data(), static_cast<std::streamsize>(data_len));
  if (!in) throw LoadError(path.string() + ": truncated tensor data");

  NamedTensorStore store;
  for (auto it = meta.begin(); it != meta.end(); ++it) {
    if (it.key() == "__metadata__") {
      for (auto m = it->begin(); m != it->end(); ++m) {
        store.metadata[m.key()] = m->is_string() ? m->get<std::string>() : m->dump();
      }
      continue;
    }
    const auto& info = *it;
    const auto dtype = info.at("dtype").get<std::string>();
    const auto shape = info.at("shape").get<Shape>();
    const auto offsets = info.at("data_offsets").get<std::vector<std::uint64_t>>();
    const std::size_t width = dtype_size(dtype);
    if (width == 0) {
      throw LoadError(path.string() + ": tensor '" + it.key() +
                      "' has unsupported dtype " + dtype);
    }
    const std::size_t n = shape.empty() ? 1 : shape_numel(shape);
    if (offsets.size() != 2 || offsets[1] < offsets[0] || offsets[1] > data_len ||
        offsets[1] - offsets[0] != n * width) {
      throw LoadError(path.string() + ": tensor '" + it.key() +
                      "' has inconsistent data offsets");
    }
    std::vector<float> values(n);
    const char* src = blob.data() + offsets[0];
    for (std::size_t i = 0; i < n; ++i) {
      if (dtype == "F32") {
        std::memcpy(&values[i], src + 4 * i, 4);
      } else if (dtype == "F64") {
        double d;
        std::memcpy(&d, src + 8 * i, 8);
        values[i] = static_cast<float>(d);
      } else {
        std::uint16_t h;
        std::memcpy(&h, src + 2 * i, 2);
        values[i] = dtype == "F16"
                        ? half_to_float(h)
                        : std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
      }
    }
    store.entries.emplace(it.key(),
                          Tensor(shape.empty() ? Shape{1} : shape, std::move(values)));
  }
  return store;
}

void write_safetensors(const std::filesystem::path& path, const NamedTensorStore& store) {
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : store.entries) {
    const std::uint64_t bytes = tensor.size() * sizeof(float);
    header[name] = {{"dtype", "F32"},
                    {"shape", tensor.shape()},
                    {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  if (!store.metadata.empty()) header["__metadata__"] = store.metadata;

  std::string text = header.dump();
  while ((text.size() + 8) % 8 != 0) text.push_back(' ');
  const std::uint64_t header_len = text.size();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [_, tensor] : store.entries) {
    out.write(reinterpret_cast<const char*>(tensor.data()),
              static_cast<std::streamsize>(tensor.size() * sizeof(float)));
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace vitprobe
