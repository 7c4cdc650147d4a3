#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <png.h>

#include "htr/checkpoint.hpp"
#include "htr/errors.hpp"

namespace htr {

/// 8-bit grayscale image, row-major.
struct RawImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  RawImage() = default;
  RawImage(std::size_t h, std::size_t w, std::uint8_t fill = 255) : height(h), width(w), pixels(h * w, fill) {
    if (h == 0 || w == 0) throw DimensionError("image extents must be positive, got " + std::to_string(h) + "x" +
                                               std::to_string(w));
  }

  std::uint8_t& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  bool empty() const { return pixels.empty(); }
  bool operator==(const RawImage&) const = default;
};

inline RawImage decode_png(std::span<const std::uint8_t> bytes) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw InputError(std::string("PNG decode failed: ") + img.message);
  }
  img.format = PNG_FORMAT_GRAY;
  if (img.width == 0 || img.height == 0) {
    png_image_free(&img);
    throw InputError("PNG has zero extent");
  }
  RawImage out(img.height, img.width);
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), static_cast<png_int_32>(img.width), nullptr)) {
    png_image_free(&img);
    throw InputError(std::string("PNG decode failed: ") + img.message);
  }
  return out;
}

inline std::vector<std::uint8_t> encode_png(const RawImage& image) {
  if (image.empty()) throw UsageError("cannot encode an empty image");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr)) {
    throw Error(std::string("PNG encode failed: ") + img.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
    throw Error(std::string("PNG encode failed: ") + img.message);
  }
  out.resize(size);
  return out;
}

/// Binary (P5) or ASCII (P2) graymap, maxval ≤ 255.
inline RawImage decode_pgm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw InputError("PGM: expected a number");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > (1u << 24)) throw InputError("PGM: number out of range");
    }
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '2')) throw InputError("PGM: bad magic");
  const bool binary = bytes[1] == '5';
  pos = 2;
  const std::size_t w = number(), h = number(), maxval = number();
  if (w == 0 || h == 0) throw InputError("PGM: zero extent");
  if (maxval == 0 || maxval > 255) throw InputError("PGM: maxval must be in 1..255");
  RawImage out(h, w);
  if (binary) {
    ++pos;  // single whitespace after maxval
    if (bytes.size() - std::min(pos, bytes.size()) < w * h) throw InputError("PGM: truncated pixel data");
    for (std::size_t i = 0; i < w * h; ++i) out.pixels[i] = static_cast<std::uint8_t>(bytes[pos + i] * 255 / maxval);
  } else {
    for (std::size_t i = 0; i < w * h; ++i) {
      const std::size_t v = number();
      if (v > maxval) throw InputError("PGM: pixel exceeds maxval");
      out.pixels[i] = static_cast<std::uint8_t>(v * 255 / maxval);
    }
  }
  return out;
}

inline std::vector<std::uint8_t> encode_pgm(const RawImage& image) {
  const std::string header = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

/// Sniffs the format from the leading bytes.
inline RawImage decode_image(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kPngMagic[] = {0x89, 'P', 'N', 'G'};
  if (bytes.size() >= 4 && std::equal(kPngMagic, kPngMagic + 4, bytes.begin())) return decode_png(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P') return decode_pgm(bytes);
  throw InputError("unrecognized image format (expected PNG or PGM)");
}

inline RawImage load_image(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = io::read_file(path.string());
  try {
    return decode_image(bytes);
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

inline void save_png(const std::filesystem::path& path, const RawImage& image) { io::write_file(path.string(), encode_png(image)); }

}  // namespace htr
