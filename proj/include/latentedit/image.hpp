#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace latentedit {

/// Channel-first float image with values in [-1, 1].
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Image() = default;
  Image(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
  double& at(int c, int y, int x) { return data[static_cast<std::size_t>(c) * plane() + static_cast<std::size_t>(y) * width + x]; }
  double at(int c, int y, int x) const {
    return data[static_cast<std::size_t>(c) * plane() + static_cast<std::size_t>(y) * width + x];
  }
  bool same_size(const Image& o) const { return channels == o.channels && height == o.height && width == o.width; }
  bool operator==(const Image&) const = default;
};

/// Boolean spatial mask; one byte per pixel (0 or 1).
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(int h, int w, bool fill = false) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill ? 1 : 0) {}

  bool at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int y, int x, bool v) { data[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
  std::size_t count() const;
  bool operator==(const Mask&) const = default;
};

/// Segmentation output: background and face regions, disjoint.
struct RegionMasks {
  Mask background;
  Mask face;

  void validate(int height, int width) const;
};

// 8-bit RGB PNG; [-1, 1] maps to [0, 255] with rounding.
void write_png(const std::filesystem::path& path, const Image& image);
std::string encode_png(const Image& image);
Image read_png(const std::filesystem::path& path);
Image decode_png(std::string_view bytes);

// Round-trip an image through 8-bit quantization, matching what a PNG
// write/read would produce.
Image quantize_8bit(const Image& image);

std::string sha256_hex(std::string_view bytes);
std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

}  // namespace latentedit
