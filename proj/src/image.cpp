#include "latentedit/image.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "latentedit/error.hpp"

namespace latentedit {

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
}

void RegionMasks::validate(int height, int width) const {
  if (background.height != height || background.width != width || face.height != height || face.width != width) {
    throw ShapeError("region masks do not match image size " + std::to_string(height) + "x" + std::to_string(width));
  }
  for (std::size_t i = 0; i < background.data.size(); ++i) {
    if (background.data[i] && face.data[i]) throw ValidationError("background and face masks overlap");
  }
}

namespace {

std::uint8_t to_byte(double v) {
  double scaled = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(scaled);
}

double from_byte(std::uint8_t b) { return static_cast<double>(b) / 127.5 - 1.0; }

struct ReadCursor {
  const unsigned char* data;
  std::size_t size;
  std::size_t pos;
};

void png_read_memory(png_structp png, png_bytep out, png_size_t length) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + length > cur->size) png_error(png, "read past end of buffer");
  std::memcpy(out, cur->data + cur->pos, length);
  cur->pos += length;
}

void png_write_memory(png_structp png, png_bytep in, png_size_t length) {
  auto* buf = static_cast<std::string*>(png_get_io_ptr(png));
  buf->append(reinterpret_cast<const char*>(in), length);
}

void png_flush_noop(png_structp) {}

// Keeps libpng quiet; the message ends up in the thrown error instead.
void png_error_to_string(png_structp png, png_const_charp message) {
  *static_cast<std::string*>(png_get_error_ptr(png)) = message;
  png_longjmp(png, 1);
}

void png_warning_ignore(png_structp, png_const_charp) {}

}  // namespace

std::string encode_png(const Image& image) {
  if (image.channels != 3 && image.channels != 1) throw ShapeError("PNG encoding needs 1 or 3 channels");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  std::string out;
  std::vector<png_byte> rows(static_cast<std::size_t>(image.height) * image.width * image.channels);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encoding failed");
  }
  png_set_write_fn(png, &out, png_write_memory, png_flush_noop);
  png_set_IHDR(png, info, image.width, image.height, 8, image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < image.channels; ++c) {
        rows[(static_cast<std::size_t>(y) * image.width + x) * image.channels + c] = to_byte(image.at(c, y, x));
      }
    }
  }
  for (int y = 0; y < image.height; ++y) {
    png_write_row(png, rows.data() + static_cast<std::size_t>(y) * image.width * image.channels);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Image decode_png(std::string_view bytes) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
    throw ParseError("not a PNG image");
  }
  std::string error;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, png_error_to_string, png_warning_ignore);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  ReadCursor cursor{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), 0};
  Image image;
  std::vector<png_byte> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError("corrupt PNG image: " + error);
  }
  png_set_read_fn(png, &cursor, png_read_memory);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int channels = png_get_channels(png, info);
  buffer.resize(static_cast<std::size_t>(width) * height * channels);
  std::vector<png_bytep> row_ptrs(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) row_ptrs[y] = buffer.data() + static_cast<std::size_t>(y) * width * channels;
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  image = Image(3, height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < 3; ++c) {
        int src = channels >= 3 ? c : 0;
        image.at(c, y, x) = from_byte(buffer[(static_cast<std::size_t>(y) * width + x) * channels + src]);
      }
    }
  }
  return image;
}

Image read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_png(bytes);
}

Image quantize_8bit(const Image& image) {
  Image out = image;
  for (double& v : out.data) v = from_byte(to_byte(v));
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), reinterpret_cast<const unsigned char*>(bytes.data()),
                          static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw ParseError("base64 length is not a multiple of 4");
  std::string out(3 * (text.size() / 4), '\0');
  int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()), reinterpret_cast<const unsigned char*>(text.data()),
                          static_cast<int>(text.size()));
  if (n < 0) throw ParseError("invalid base64 payload");
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

}  // namespace latentedit
