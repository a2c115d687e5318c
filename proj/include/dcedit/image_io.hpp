#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <png.h>

#include "dcedit/image.hpp"

namespace dcedit {

// ---------------------------------------------------------------------------
// 8-bit quantization

inline std::uint8_t quantize_unit(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Interleaved 8-bit pixels (HWC) of an image, signed_unit mapped to [0, 255].
inline std::vector<std::uint8_t> to_bytes(const Image& img) {
  const Image u = img.to_unsigned();
  const int c = u.channels(), h = u.height(), w = u.width();
  std::vector<std::uint8_t> out(static_cast<std::size_t>(c) * h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ci = 0; ci < c; ++ci) out[(static_cast<std::size_t>(y) * w + x) * c + ci] = quantize_unit(u(ci, y, x));
  return out;
}

inline Image from_bytes(const std::vector<std::uint8_t>& bytes, int channels, int height, int width) {
  require(bytes.size() == static_cast<std::size_t>(channels) * height * width, ErrorCode::shape_mismatch,
          "pixel buffer size mismatch");
  Tensor t({channels, height, width});
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < channels; ++c)
        t[(static_cast<std::size_t>(c) * height + y) * width + x] =
            2.0 * (bytes[(static_cast<std::size_t>(y) * width + x) * channels + c] / 255.0) - 1.0;
  return Image(std::move(t));
}

// Round-trip through 8-bit storage; idempotent.
inline Image quantize(const Image& img) {
  return from_bytes(to_bytes(img), img.channels(), img.height(), img.width());
}

inline Image mask_as_image(const ActivationMask& m) {
  Tensor t = m.tensor();
  for (double& v : t.values()) v = 2.0 * v - 1.0;
  return Image(std::move(t));
}

// ---------------------------------------------------------------------------
// PNG (lossless raster) via libpng's simplified API

inline std::vector<std::uint8_t> encode_png(const Image& img) {
  png_image desc;
  std::memset(&desc, 0, sizeof desc);
  desc.version = PNG_IMAGE_VERSION;
  desc.width = static_cast<png_uint_32>(img.width());
  desc.height = static_cast<png_uint_32>(img.height());
  desc.format = img.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const auto pixels = to_bytes(img);
  png_alloc_size_t size = 0;
  require(png_image_write_to_memory(&desc, nullptr, &size, 0, pixels.data(), 0, nullptr) != 0, ErrorCode::io,
          std::string("png sizing failed: ") + desc.message);
  std::vector<std::uint8_t> out(size);
  require(png_image_write_to_memory(&desc, out.data(), &size, 0, pixels.data(), 0, nullptr) != 0, ErrorCode::io,
          std::string("png encoding failed: ") + desc.message);
  out.resize(size);
  png_image_free(&desc);
  return out;
}

inline Image decode_png(const std::vector<std::uint8_t>& bytes) {
  png_image desc;
  std::memset(&desc, 0, sizeof desc);
  desc.version = PNG_IMAGE_VERSION;
  require(png_image_begin_read_from_memory(&desc, bytes.data(), bytes.size()) != 0, ErrorCode::io,
          std::string("not a readable png: ") + desc.message);
  const bool gray = (desc.format & PNG_FORMAT_FLAG_COLOR) == 0;
  desc.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const int channels = gray ? 1 : 3;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(desc));
  if (png_image_finish_read(&desc, nullptr, pixels.data(), 0, nullptr) == 0) {
    std::string msg = desc.message;
    png_image_free(&desc);
    fail(ErrorCode::io, "png decoding failed: " + msg);
  }
  return from_bytes(pixels, channels, static_cast<int>(desc.height), static_cast<int>(desc.width));
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::not_found, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Image read_png(const std::filesystem::path& path) { return decode_png(read_file(path)); }
inline void write_png(const std::filesystem::path& path, const Image& img) { write_file(path, encode_png(img)); }
inline void write_mask_png(const std::filesystem::path& path, const ActivationMask& m) {
  write_png(path, mask_as_image(m));
}

// Raw float64 array in NumPy .npy (format 1.0) layout.
inline void write_npy(const std::filesystem::path& path, const Tensor& t) {
  std::string shape = "(";
  for (int i = 0; i < t.rank(); ++i) shape += std::to_string(t.dim(i)) + (t.rank() == 1 || i + 1 < t.rank() ? "," : "");
  shape += ")";
  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': " + shape + ", }";
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header += '\n';
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
  const std::uint16_t hlen = static_cast<std::uint16_t>(header.size());
  out.write("\x93NUMPY\x01\x00", 8);
  out.write(reinterpret_cast<const char*>(&hlen), 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

// ---------------------------------------------------------------------------
// base64 (RFC 4648, padded)

inline std::string base64_encode(const std::vector<std::uint8_t>& in) {
  static constexpr char table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const std::uint32_t v = (in[i] << 16) | (in[i + 1] << 8) | in[i + 2];
    out += table[(v >> 18) & 63];
    out += table[(v >> 12) & 63];
    out += table[(v >> 6) & 63];
    out += table[v & 63];
  }
  if (i < in.size()) {
    const std::uint32_t v = (in[i] << 16) | (i + 1 < in.size() ? in[i + 1] << 8 : 0);
    out += table[(v >> 18) & 63];
    out += table[(v >> 12) & 63];
    out += i + 1 < in.size() ? table[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

inline std::vector<std::uint8_t> base64_decode(std::string_view in) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::vector<std::uint8_t> out;
  std::uint32_t acc = 0;
  int bits = 0;
  for (char c : in) {
    if (c == '=' || c == '\n' || c == '\r') continue;
    const int v = value(c);
    require(v >= 0, ErrorCode::invalid_argument, "invalid base64 character");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xFF));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Content hashes (FNV-1a 64, hex)

inline std::string fnv1a_hex(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// Hash of the 8-bit pixel content (independent of PNG encoder settings).
inline std::string image_hash(const Image& img) {
  auto bytes = to_bytes(img);
  bytes.push_back(static_cast<std::uint8_t>(img.channels()));
  return fnv1a_hex(bytes);
}

}  // namespace dcedit
