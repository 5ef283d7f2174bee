#include "vitprobe/image.hpp"

#include <algorithm>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include <jpeglib.h>
#include <png.h>

#include "vitprobe/errors.hpp"

namespace vitprobe {

namespace fs = std::filesystem;

std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

namespace {

// ---- PNG -------------------------------------------------------------------

struct PngSource {
  std::span<const std::uint8_t> bytes;
  std::size_t offset = 0;
};

void png_read_from_span(png_structp png, png_bytep out, png_size_t length) {
  auto* src = static_cast<PngSource*>(png_get_io_ptr(png));
  if (src->offset + length > src->bytes.size()) png_error(png, "unexpected end of data");
  std::memcpy(out, src->bytes.data() + src->offset, length);
  src->offset += length;
}

void png_error_to_longjmp(png_structp png, png_const_charp) {
  png_longjmp(png, 1);
}

void png_silent_warning(png_structp, png_const_charp) {}

struct DecodedPng {
  std::size_t width = 0, height = 0;
  int channels = 0, bit_depth = 8;
  std::vector<std::uint16_t> samples;
};

DecodedPng decode_png(std::span<const std::uint8_t> bytes) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                           png_error_to_longjmp, png_silent_warning);
  if (!png) throw FormatError("png: out of memory");
  png_infop info = png_create_info_struct(png);
  PngSource src{bytes, 0};
  DecodedPng out;
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> buffer;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("png: corrupt or unsupported data");
  }
  png_set_read_fn(png, &src, png_read_from_span);
  png_read_info(png, info);

  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (png_get_bit_depth(png, info) < 8) png_set_expand(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_bit_depth(png, info) == 16) png_set_swap(png);
  png_read_update_info(png, info);

  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.channels = png_get_channels(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * out.height);
  rows.resize(out.height);
  for (std::size_t y = 0; y < out.height; ++y) rows[y] = buffer.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t n = out.width * out.height * static_cast<std::size_t>(out.channels);
  out.samples.resize(n);
  if (out.bit_depth == 16) {
    std::memcpy(out.samples.data(), buffer.data(), n * 2);
  } else {
    for (std::size_t i = 0; i < n; ++i) out.samples[i] = buffer[i];
  }
  return out;
}

void write_png_raw(const fs::path& path, std::size_t width, std::size_t height,
                   int color_type, int bit_depth, const std::uint8_t* data,
                   std::size_t rowbytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                            png_error_to_longjmp, png_silent_warning);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png encode failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);
  for (std::size_t y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(data + y * rowbytes));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// ---- JPEG ------------------------------------------------------------------

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

void jpeg_silent(j_common_ptr, int) {}

RgbImage decode_jpeg(std::span<const std::uint8_t> bytes) {
  jpeg_decompress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  err.mgr.emit_message = jpeg_silent;
  RgbImage out;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw FormatError("jpeg: corrupt or unsupported data");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out.width = cinfo.output_width;
  out.height = cinfo.output_height;
  out.pixels.resize(out.width * out.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.pixels.data() + cinfo.output_scanline * out.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

bool is_png(std::span<const std::uint8_t> b) {
  return b.size() >= 8 && png_sig_cmp(b.data(), 0, 8) == 0;
}

bool is_jpeg(std::span<const std::uint8_t> b) {
  return b.size() >= 3 && b[0] == 0xFF && b[1] == 0xD8 && b[2] == 0xFF;
}

}  // namespace

RgbImage decode_image(std::span<const std::uint8_t> bytes) {
  if (is_jpeg(bytes)) return decode_jpeg(bytes);
  if (!is_png(bytes)) throw FormatError("unrecognised image format");
  DecodedPng png = decode_png(bytes);
  RgbImage out{png.width, png.height, std::vector<std::uint8_t>(png.width * png.height * 3)};
  const int shift = png.bit_depth == 16 ? 8 : 0;
  for (std::size_t i = 0; i < png.width * png.height; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t src_c = png.channels >= 3 ? c : 0;
      out.pixels[i * 3 + c] =
          static_cast<std::uint8_t>(png.samples[i * static_cast<std::size_t>(png.channels) + src_c] >> shift);
    }
  }
  return out;
}

RgbImage read_image(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_image(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

GrayImage read_gray_png(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  if (!is_png(bytes)) throw FormatError(path.string() + ": not a PNG file");
  DecodedPng png;
  try {
    png = decode_png(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  GrayImage out{png.width, png.height, png.bit_depth,
                std::vector<std::uint16_t>(png.width * png.height)};
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] = png.samples[i * static_cast<std::size_t>(png.channels)];
  }
  return out;
}

void write_png(const fs::path& path, const RgbImage& image) {
  write_png_raw(path, image.width, image.height, PNG_COLOR_TYPE_RGB, 8,
                image.pixels.data(), image.width * 3);
}

void write_png(const fs::path& path, const GrayImage& image) {
  if (image.bit_depth == 16) {
    write_png_raw(path, image.width, image.height, PNG_COLOR_TYPE_GRAY, 16,
                  reinterpret_cast<const std::uint8_t*>(image.pixels.data()),
                  image.width * 2);
  } else {
    std::vector<std::uint8_t> narrow(image.pixels.size());
    for (std::size_t i = 0; i < narrow.size(); ++i) {
      narrow[i] = static_cast<std::uint8_t>(image.pixels[i]);
    }
    write_png_raw(path, image.width, image.height, PNG_COLOR_TYPE_GRAY, 8, narrow.data(),
                  image.width);
  }
}

std::vector<BilinearTap> bilinear_taps(std::size_t src, std::size_t dst) {
  std::vector<BilinearTap> taps(dst);
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    double pos = (static_cast<double>(i) + 0.5) * scale - 0.5;
    pos = std::clamp(pos, 0.0, static_cast<double>(src - 1));
    const auto lo = static_cast<std::size_t>(pos);
    taps[i] = {lo, std::min(lo + 1, src - 1), pos - static_cast<double>(lo)};
  }
  return taps;
}

std::vector<float> resize_bilinear(std::span<const float> src, std::size_t src_h,
                                   std::size_t src_w, std::size_t dst_h, std::size_t dst_w) {
  if (src.size() != src_h * src_w || src_h == 0 || src_w == 0) {
    throw DimensionError("resize_bilinear: plane size does not match its dimensions");
  }
  const auto ty = bilinear_taps(src_h, dst_h);
  const auto tx = bilinear_taps(src_w, dst_w);
  std::vector<float> out(dst_h * dst_w);
  for (std::size_t y = 0; y < dst_h; ++y) {
    const auto& a = ty[y];
    for (std::size_t x = 0; x < dst_w; ++x) {
      const auto& b = tx[x];
      const double top = (1.0 - b.frac) * src[a.lo * src_w + b.lo] + b.frac * src[a.lo * src_w + b.hi];
      const double bot = (1.0 - b.frac) * src[a.hi * src_w + b.lo] + b.frac * src[a.hi * src_w + b.hi];
      out[y * dst_w + x] = static_cast<float>((1.0 - a.frac) * top + a.frac * bot);
    }
  }
  return out;
}

Tensor preprocess(std::span<const std::uint8_t> rgb, std::size_t height, std::size_t width,
                  const EncoderConfig& config) {
  if (height == 0 || width == 0 || rgb.size() != height * width * 3) {
    throw FormatError("raw RGB buffer of " + std::to_string(rgb.size()) +
                      " bytes does not match " + std::to_string(height) + "x" +
                      std::to_string(width) + "x3");
  }
  const std::size_t s = config.image_size;
  Tensor out({3, s, s});
  std::vector<float> plane(height * width);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < height * width; ++i) plane[i] = rgb[i * 3 + c];
    const auto resized = resize_bilinear(plane, height, width, s, s);
    const double mean = config.image_mean[c], stdev = config.image_std[c];
    for (std::size_t i = 0; i < s * s; ++i) {
      out[c * s * s + i] = static_cast<float>((resized[i] / 255.0 - mean) / stdev);
    }
  }
  return out;
}

Tensor preprocess(const RgbImage& image, const EncoderConfig& config) {
  return preprocess(image.pixels, image.height, image.width, config);
}

}  // namespace vitprobe
