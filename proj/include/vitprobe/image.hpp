#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "vitprobe/encoder.hpp"
#include "vitprobe/tensor.hpp"

namespace vitprobe {

// Interleaved 8-bit RGB.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

// Single channel, 8- or 16-bit source widened to 16 bits.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> pixels;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

// PNG or JPEG, detected from the magic bytes. Throws FormatError.
RgbImage decode_image(std::span<const std::uint8_t> bytes);
RgbImage read_image(const std::filesystem::path& path);

// Grayscale PNG (8 or 16 bit; RGB inputs are reduced to their first channel).
GrayImage read_gray_png(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const RgbImage& image);
void write_png(const std::filesystem::path& path, const GrayImage& image);

/// One output sample of a bilinear resize with half-pixel centres: it blends
/// source samples `lo` and `hi` as (1 - frac) * lo + frac * hi.
struct BilinearTap {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double frac = 0.0;
};

std::vector<BilinearTap> bilinear_taps(std::size_t src, std::size_t dst);

// Resizes one (height x width) plane. No antialiasing.
std::vector<float> resize_bilinear(std::span<const float> src, std::size_t src_h,
                                   std::size_t src_w, std::size_t dst_h, std::size_t dst_w);

/// Bilinear resize to the encoder resolution, scale to [0, 1], then per-channel
/// (x - mean) / std. Returns a (3, size, size) tensor.
Tensor preprocess(std::span<const std::uint8_t> rgb, std::size_t height, std::size_t width,
                  const EncoderConfig& config);
Tensor preprocess(const RgbImage& image, const EncoderConfig& config);

}  // namespace vitprobe
