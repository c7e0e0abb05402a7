#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tpcnet/tensor.hpp"

// Minimal 8-bit RGB PNG codec (color type 2, no interlace). Values map to
// [0,1] on load and quantize round-half-up on save. Writes are atomic
// (temp file + rename).

namespace tpc {

struct PngError : std::runtime_error {
  explicit PngError(const std::string& what) : std::runtime_error(what) {}
};

namespace png_detail {

inline constexpr unsigned char kSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

inline void put_u32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>(v & 0xff));
}

inline uint32_t get_u32(const unsigned char* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

inline void append_chunk(std::string& out, const char type[4], const std::string& payload) {
  put_u32(out, static_cast<uint32_t>(payload.size()));
  std::string body(type, 4);
  body += payload;
  out += body;
  uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
  put_u32(out, static_cast<uint32_t>(crc));
}

inline int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace png_detail

template <typename T>
void write_png(const std::filesystem::path& path, const Tensor<T>& img) {
  namespace pd = png_detail;
  if (img.c != 3) throw PngError("write_png: expected 3 x H x W image");
  size_t plane = static_cast<size_t>(img.h) * img.w;

  // filter 0 scanlines, round-half-up quantization
  std::string raw;
  raw.reserve((static_cast<size_t>(img.w) * 3 + 1) * img.h);
  for (int y = 0; y < img.h; ++y) {
    raw.push_back('\0');
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        double v = static_cast<double>(img.v[ch * plane + static_cast<size_t>(y) * img.w + x]);
        int q = static_cast<int>(std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5));
        raw.push_back(static_cast<char>(std::clamp(q, 0, 255)));
      }
  }

  uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
  std::string compressed(comp_size, '\0');
  if (compress2(reinterpret_cast<Bytef*>(compressed.data()), &comp_size,
                reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                Z_DEFAULT_COMPRESSION) != Z_OK)
    throw PngError("write_png: deflate failed");
  compressed.resize(comp_size);

  std::string out(reinterpret_cast<const char*>(pd::kSig), 8);
  std::string ihdr;
  pd::put_u32(ihdr, static_cast<uint32_t>(img.w));
  pd::put_u32(ihdr, static_cast<uint32_t>(img.h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // no interlace
  pd::append_chunk(out, "IHDR", ihdr);
  pd::append_chunk(out, "IDAT", compressed);
  pd::append_chunk(out, "IEND", "");

  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw PngError("write_png: cannot open '" + tmp.string() + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw PngError("write_png: short write");
  }
  fs::rename(tmp, path);
}

template <typename T>
Tensor<T> read_png(const std::filesystem::path& path) {
  namespace pd = png_detail;
  std::ifstream f(path, std::ios::binary);
  if (!f) throw PngError("read_png: cannot open '" + path.string() + "'");
  std::string all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(all.data());
  if (all.size() < 8 || std::memcmp(p, pd::kSig, 8) != 0)
    throw PngError("read_png: '" + path.string() + "' is not a PNG file");

  size_t pos = 8;
  int width = 0, height = 0;
  bool have_ihdr = false, have_iend = false;
  std::string idat;
  while (pos + 8 <= all.size()) {
    uint32_t len = pd::get_u32(p + pos);
    std::string type(all, pos + 4, 4);
    if (pos + 12 + len > all.size()) throw PngError("read_png: truncated chunk in '" + path.string() + "'");
    const unsigned char* payload = p + pos + 8;
    if (type == "IHDR") {
      if (len != 13) throw PngError("read_png: bad IHDR");
      width = static_cast<int>(pd::get_u32(payload));
      height = static_cast<int>(pd::get_u32(payload + 4));
      int depth = payload[8], color = payload[9], interlace = payload[12];
      if (depth != 8 || color != 2)
        throw PngError("read_png: '" + path.string() + "' is not 8-bit RGB (depth " +
                       std::to_string(depth) + ", color type " + std::to_string(color) + ")");
      if (interlace != 0) throw PngError("read_png: interlaced PNGs are not supported");
      have_ihdr = true;
    } else if (type == "IDAT") {
      idat.append(reinterpret_cast<const char*>(payload), len);
    } else if (type == "IEND") {
      have_iend = true;
      break;
    }
    pos += 12 + len;
  }
  if (!have_ihdr || !have_iend || width <= 0 || height <= 0)
    throw PngError("read_png: malformed PNG '" + path.string() + "'");

  size_t stride = static_cast<size_t>(width) * 3;
  size_t raw_size = (stride + 1) * height;
  std::vector<unsigned char> raw(raw_size);
  uLongf out_size = static_cast<uLongf>(raw_size);
  int zret = uncompress(raw.data(), &out_size, reinterpret_cast<const Bytef*>(idat.data()),
                        static_cast<uLong>(idat.size()));
  if (zret != Z_OK || out_size != raw_size)
    throw PngError("read_png: inflate failed for '" + path.string() + "'");

  // undo per-scanline filters
  std::vector<unsigned char> pix(static_cast<size_t>(height) * stride);
  for (int y = 0; y < height; ++y) {
    unsigned char filter = raw[static_cast<size_t>(y) * (stride + 1)];
    const unsigned char* src = raw.data() + static_cast<size_t>(y) * (stride + 1) + 1;
    unsigned char* dst = pix.data() + static_cast<size_t>(y) * stride;
    const unsigned char* prev = y > 0 ? pix.data() + static_cast<size_t>(y - 1) * stride : nullptr;
    for (size_t i = 0; i < stride; ++i) {
      int a = i >= 3 ? dst[i - 3] : 0;
      int b = prev ? prev[i] : 0;
      int c = (prev && i >= 3) ? prev[i - 3] : 0;
      int x = src[i];
      switch (filter) {
        case 0: break;
        case 1: x += a; break;
        case 2: x += b; break;
        case 3: x += (a + b) / 2; break;
        case 4: x += pd::paeth(a, b, c); break;
        default: throw PngError("read_png: unknown filter type");
      }
      dst[i] = static_cast<unsigned char>(x & 0xff);
    }
  }

  Tensor<T> img(3, height, width);
  size_t plane = static_cast<size_t>(height) * width;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int ch = 0; ch < 3; ++ch)
        img.v[ch * plane + static_cast<size_t>(y) * width + x] =
            static_cast<T>(pix[static_cast<size_t>(y) * stride + x * 3 + ch] / 255.0);
  return img;
}

}  // namespace tpc
