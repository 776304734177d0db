#pragma once

#include <png.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ilmcam {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit interleaved pixels, 1 (gray) or 3 (RGB) channels.
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;
  std::vector<std::uint8_t> pixels;
};

namespace detail {

inline png_uint_32 png_format(std::size_t channels) {
  if (channels == 1) return PNG_FORMAT_GRAY;
  if (channels == 3) return PNG_FORMAT_RGB;
  throw ImageError("PNG: unsupported channel count " + std::to_string(channels));
}

inline void check_image(const Image8& img) {
  if (img.width == 0 || img.height == 0) throw ImageError("PNG: empty image");
  if (img.pixels.size() != img.width * img.height * img.channels) throw ImageError("PNG: pixel buffer size mismatch");
}

inline png_image make_png_image(const Image8& img) {
  png_image p{};
  p.version = PNG_IMAGE_VERSION;
  p.width = static_cast<png_uint_32>(img.width);
  p.height = static_cast<png_uint_32>(img.height);
  p.format = png_format(img.channels);
  return p;
}

inline Image8 finish_read(png_image& p, std::size_t channels, const std::string& what) {
  p.format = png_format(channels);
  Image8 img;
  img.width = p.width;
  img.height = p.height;
  img.channels = channels;
  img.pixels.resize(PNG_IMAGE_SIZE(p));
  if (!png_image_finish_read(&p, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = p.message;
    png_image_free(&p);
    throw ImageError("PNG decode failed for " + what + ": " + msg);
  }
  return img;
}

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const Image8& img) {
  detail::check_image(img);
  png_image p = detail::make_png_image(img);
  if (!png_image_write_to_file(&p, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw ImageError("PNG write failed for " + path.string() + ": " + p.message);
  }
}

inline std::string encode_png(const Image8& img) {
  detail::check_image(img);
  png_image p = detail::make_png_image(img);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&p, nullptr, &size, 0, img.pixels.data(), 0, nullptr)) {
    throw ImageError(std::string("PNG encode failed: ") + p.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&p, out.data(), &size, 0, img.pixels.data(), 0, nullptr)) {
    throw ImageError(std::string("PNG encode failed: ") + p.message);
  }
  out.resize(size);
  return out;
}

/// Reads a PNG converting it to `channels` (1 or 3).
inline Image8 read_png(const std::filesystem::path& path, std::size_t channels) {
  png_image p{};
  p.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&p, path.c_str())) {
    throw ImageError("cannot read PNG " + path.string() + ": " + p.message);
  }
  return detail::finish_read(p, channels, path.string());
}

inline Image8 decode_png(std::string_view bytes, std::size_t channels) {
  png_image p{};
  p.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&p, bytes.data(), bytes.size())) {
    throw ImageError(std::string("not a PNG: ") + p.message);
  }
  return detail::finish_read(p, channels, "payload");
}

inline std::string base64_encode(std::string_view in) {
  static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const std::uint32_t v = (std::uint8_t(in[i]) << 16) | (std::uint8_t(in[i + 1]) << 8) | std::uint8_t(in[i + 2]);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (i < in.size()) {
    std::uint32_t v = std::uint8_t(in[i]) << 16;
    if (i + 1 < in.size()) v |= std::uint8_t(in[i + 1]) << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += i + 1 < in.size() ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

inline std::string base64_decode(std::string_view in) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (in.size() % 4 != 0) throw ImageError("base64 length is not a multiple of 4");
  std::string out;
  out.reserve(in.size() / 4 * 3);
  for (std::size_t i = 0; i < in.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = in[i + k];
      if (c == '=' && i + 4 == in.size() && k >= 2) {
        v[k] = 0;
        ++pad;
      } else if (pad > 0 || (v[k] = value(c)) < 0) {
        throw ImageError("invalid base64 character at offset " + std::to_string(i + k));
      }
    }
    const std::uint32_t n = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out += static_cast<char>((n >> 16) & 0xff);
    if (pad < 2) out += static_cast<char>((n >> 8) & 0xff);
    if (pad < 1) out += static_cast<char>(n & 0xff);
  }
  return out;
}

}  // namespace ilmcam
