#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "inctok/error.hpp"

namespace inctok::detail {

// Minimal PNG reader/writer: 8- or 16-bit, gray / gray+alpha / RGB / RGBA,
// no interlacing. The writer emits filter type 0 scanlines; the reader
// handles all five standard filters. Compression goes through zlib, so
// output bytes are deterministic for a given input.
struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 0;   // 1, 2, 3 or 4
  int bit_depth = 0;  // 8 or 16
  std::vector<uint16_t> samples;  // row-major, interleaved channels
};

namespace pngimpl {

inline void put_be32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v >> 24));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v));
}

inline uint32_t get_be32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

inline void append_chunk(std::vector<uint8_t>& out, const char type[4],
                         const std::vector<uint8_t>& payload) {
  put_be32(out, uint32_t(payload.size()));
  size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  uint32_t crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, out.data() + start, uInt(out.size() - start));
  put_be32(out, crc);
}

inline int color_type_for(int channels) {
  switch (channels) {
    case 1: return 0;
    case 2: return 4;
    case 3: return 2;
    case 4: return 6;
  }
  fail(Errc::contract, "png: unsupported channel count");
}

inline int channels_for(int color_type) {
  switch (color_type) {
    case 0: return 1;
    case 4: return 2;
    case 2: return 3;
    case 6: return 4;
  }
  fail(Errc::io, "png: unsupported color type");
}

inline uint8_t paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return uint8_t(a);
  if (pb <= pc) return uint8_t(b);
  return uint8_t(c);
}

}  // namespace pngimpl

inline std::vector<uint8_t> encode_png(const PngImage& img) {
  using namespace pngimpl;
  require(img.width > 0 && img.height > 0, Errc::contract, "png: empty image");
  require(img.bit_depth == 8 || img.bit_depth == 16, Errc::contract, "png: bad bit depth");
  require(img.samples.size() ==
              size_t(img.width) * size_t(img.height) * size_t(img.channels),
          Errc::contract, "png: sample count mismatch");

  int bytes_per_sample = img.bit_depth / 8;
  size_t stride = size_t(img.width) * img.channels * bytes_per_sample;
  std::vector<uint8_t> raw;
  raw.reserve((stride + 1) * img.height);
  size_t si = 0;
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter: none
    for (int x = 0; x < img.width * img.channels; ++x) {
      uint16_t s = img.samples[si++];
      if (img.bit_depth == 16) {
        raw.push_back(uint8_t(s >> 8));
        raw.push_back(uint8_t(s & 0xff));
      } else {
        raw.push_back(uint8_t(s & 0xff));
      }
    }
  }

  uLongf bound = compressBound(uLong(raw.size()));
  std::vector<uint8_t> compressed(bound);
  int rc = compress2(compressed.data(), &bound, raw.data(), uLong(raw.size()), 6);
  require(rc == Z_OK, Errc::io, "png: deflate failed");
  compressed.resize(bound);

  std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<uint8_t> ihdr;
  put_be32(ihdr, uint32_t(img.width));
  put_be32(ihdr, uint32_t(img.height));
  ihdr.push_back(uint8_t(img.bit_depth));
  ihdr.push_back(uint8_t(color_type_for(img.channels)));
  ihdr.push_back(0);  // compression
  ihdr.push_back(0);  // filter method
  ihdr.push_back(0);  // no interlace
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", compressed);
  append_chunk(out, "IEND", {});
  return out;
}

inline PngImage decode_png(const std::vector<uint8_t>& bytes) {
  using namespace pngimpl;
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  require(bytes.size() > 8 && std::memcmp(bytes.data(), sig, 8) == 0, Errc::io,
          "png: bad signature");

  PngImage img;
  std::vector<uint8_t> idat;
  size_t pos = 8;
  bool saw_ihdr = false;
  while (pos + 12 <= bytes.size()) {
    uint32_t len = get_be32(bytes.data() + pos);
    require(pos + 12 + len <= bytes.size(), Errc::io, "png: truncated chunk");
    std::string type(reinterpret_cast<const char*>(bytes.data() + pos + 4), 4);
    const uint8_t* payload = bytes.data() + pos + 8;
    if (type == "IHDR") {
      require(len == 13, Errc::io, "png: bad IHDR");
      img.width = int(get_be32(payload));
      img.height = int(get_be32(payload + 4));
      img.bit_depth = payload[8];
      img.channels = channels_for(payload[9]);
      require(img.bit_depth == 8 || img.bit_depth == 16, Errc::io, "png: unsupported depth");
      require(payload[12] == 0, Errc::io, "png: interlaced images unsupported");
      saw_ihdr = true;
    } else if (type == "IDAT") {
      idat.insert(idat.end(), payload, payload + len);
    } else if (type == "IEND") {
      break;
    }
    pos += 12 + len;
  }
  require(saw_ihdr && !idat.empty(), Errc::io, "png: missing chunks");

  int bytes_per_sample = img.bit_depth / 8;
  int bpp = img.channels * bytes_per_sample;  // filter unit
  size_t stride = size_t(img.width) * bpp;
  uLongf raw_len = uLongf((stride + 1) * img.height);
  std::vector<uint8_t> raw(raw_len);
  int rc = uncompress(raw.data(), &raw_len, idat.data(), uLong(idat.size()));
  require(rc == Z_OK && raw_len == (stride + 1) * size_t(img.height), Errc::io,
          "png: inflate failed");

  std::vector<uint8_t> prev(stride, 0);
  std::vector<uint8_t> cur(stride);
  img.samples.resize(size_t(img.width) * img.height * img.channels);
  size_t si = 0;
  for (int y = 0; y < img.height; ++y) {
    const uint8_t* line = raw.data() + size_t(y) * (stride + 1);
    uint8_t filter = line[0];
    const uint8_t* src = line + 1;
    for (size_t i = 0; i < stride; ++i) {
      int a = i >= size_t(bpp) ? cur[i - bpp] : 0;
      int b = prev[i];
      int c = i >= size_t(bpp) ? prev[i - bpp] : 0;
      int x = src[i];
      switch (filter) {
        case 0: cur[i] = uint8_t(x); break;
        case 1: cur[i] = uint8_t(x + a); break;
        case 2: cur[i] = uint8_t(x + b); break;
        case 3: cur[i] = uint8_t(x + (a + b) / 2); break;
        case 4: cur[i] = uint8_t(x + paeth(a, b, c)); break;
        default: fail(Errc::io, "png: unknown filter");
      }
    }
    for (int x = 0; x < img.width * img.channels; ++x) {
      if (img.bit_depth == 16) {
        img.samples[si++] = uint16_t((cur[size_t(x) * 2] << 8) | cur[size_t(x) * 2 + 1]);
      } else {
        img.samples[si++] = cur[x];
      }
    }
    std::swap(prev, cur);
  }
  return img;
}

inline void write_png_file(const std::filesystem::path& path, const PngImage& img) {
  auto bytes = encode_png(img);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), Errc::io, "png: cannot open for write: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  require(f.good(), Errc::io, "png: write failed: " + path.string());
}

inline PngImage read_png_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), Errc::io, "png: cannot open for read: " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  return decode_png(bytes);
}

}  // namespace inctok::detail
