#pragma once

// Minimal 8-bit RGB PNG writer for inspecting rendered images. Needs zlib.

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "care/error.hpp"
#include "care/img_repr.hpp"

namespace care {

namespace detail {

inline void png_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

inline void png_chunk(std::vector<unsigned char>& out, const char* type,
                      const std::vector<unsigned char>& payload) {
  png_u32(out, static_cast<std::uint32_t>(payload.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const uLong crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  png_u32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

// value = round(255 * intensity) per channel.
inline std::vector<unsigned char> encode_png(const Image& img) {
  if (img.channels != 3) throw UsageError("encode_png: expected 3 channels");
  std::vector<unsigned char> raw;
  raw.reserve(img.height * (1 + img.width * 3));
  for (std::size_t y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter: none
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(img.at(c, y, x)), 0.0, 1.0);
        raw.push_back(static_cast<unsigned char>(std::lround(255.0 * v)));
      }
    }
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw IoError("encode_png: deflate failed");
  }
  z.resize(zlen);

  std::vector<unsigned char> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  std::vector<unsigned char> ihdr;
  detail::png_u32(ihdr, static_cast<std::uint32_t>(img.width));
  detail::png_u32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit truecolor
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", z);
  detail::png_chunk(out, "IEND", {});
  return out;
}

inline void write_png(const std::string& path, const Image& img) {
  const auto bytes = encode_png(img);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write '" + path + "'");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for '" + path + "'");
}

}  // namespace care
