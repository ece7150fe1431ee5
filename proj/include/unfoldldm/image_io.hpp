#pragma once

// 8-bit PNG and PGM/PPM (ASCII P2/P3, binary P5/P6) images as [c, h, w]
// tensors on [0, 1].

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace uldm {

namespace detail {

inline std::string lower_ext(const std::string& path) {
  const auto dot = path.find_last_of('.');
  if (dot == std::string::npos) return {};
  std::string e = path.substr(dot + 1);
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return e;
}

template <class T>
unsigned char to_byte(T v) {
  const double c = std::clamp(double(v), 0.0, 1.0);
  return static_cast<unsigned char>(std::lround(c * 255.0));
}

// Reads the next header token, skipping whitespace and '#' comments.
inline std::string pnm_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {}
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

template <class T>
Tensor<T> read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  const std::string magic = pnm_token(in);
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6") throw FormatError(path + ": not a PGM/PPM file");
  const bool ascii = magic == "P2" || magic == "P3";
  const std::size_t c = (magic == "P3" || magic == "P6") ? 3 : 1;
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(pnm_token(in));
    h = std::stoul(pnm_token(in));
    maxval = std::stoul(pnm_token(in));
  } catch (const std::exception&) {
    throw FormatError(path + ": malformed header");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw FormatError(path + ": bad extents or maxval");
  Tensor<T> img({c, h, w});
  const std::size_t n = c * h * w;
  std::vector<unsigned> raw(n);
  if (ascii) {
    for (auto& v : raw) {
      const std::string t = pnm_token(in);
      if (t.empty()) throw FormatError(path + ": truncated pixel data");
      v = static_cast<unsigned>(std::stoul(t));
    }
  } else {
    const std::size_t bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> buf(n * bytes);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size()) throw FormatError(path + ": truncated pixel data");
    for (std::size_t i = 0; i < n; ++i) raw[i] = bytes == 2 ? (buf[2 * i] << 8) | buf[2 * i + 1] : buf[i];
  }
  // Interleaved to planar.
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) img[ch * h * w + i] = static_cast<T>(double(raw[i * c + ch]) / double(maxval));
  return img;
}

template <class T>
void write_pnm(const std::string& path, const Tensor<T>& img, bool ascii) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  const char* magic = c == 1 ? (ascii ? "P2" : "P5") : (ascii ? "P3" : "P6");
  out << magic << "\n" << w << " " << h << "\n255\n";
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const unsigned char b = to_byte(img[ch * h * w + i]);
      if (ascii)
        out << int(b) << ((ch + 1 == c && (i + 1) % w == 0) ? '\n' : ' ');
      else
        out.put(static_cast<char>(b));
    }
  if (!out) throw FormatError("write failed: " + path);
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

template <class T>
Tensor<T> read_png(const std::string& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw FormatError("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("libpng initialisation failed");
  }
  std::vector<unsigned char> pixels;
  png_uint_32 w = 0, h = 0;
  int channels = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path + ": invalid PNG data");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_packing(png);
  png_set_palette_to_rgb(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  pixels.resize(stride * h);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 i = 0; i < h; ++i) rows[i] = pixels.data() + i * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  if (channels != 1 && channels != 3) throw FormatError(path + ": unsupported channel count " + std::to_string(channels));
  const std::size_t c = channels;
  Tensor<T> img({c, std::size_t(h), std::size_t(w)});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t ch = 0; ch < c; ++ch)
        img[(ch * h + i) * w + j] = static_cast<T>(pixels[i * stride + j * c + ch] / 255.0);
  return img;
}

template <class T>
void write_png(const std::string& path, const Tensor<T>& img) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw FormatError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("libpng initialisation failed");
  }
  std::vector<unsigned char> pixels(c * h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) pixels[(i * w + j) * c + ch] = to_byte(img[(ch * h + i) * w + j]);
  std::vector<png_bytep> rows(h);
  for (std::size_t i = 0; i < h; ++i) rows[i] = pixels.data() + i * w * c;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("PNG encoding failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

/// Reads by extension: .png, .pgm, .ppm, .pnm.
template <class T>
Tensor<T> read_image(const std::string& path) {
  const std::string ext = detail::lower_ext(path);
  if (ext == "png") return detail::read_png<T>(path);
  if (ext == "pgm" || ext == "ppm" || ext == "pnm") return detail::read_pnm<T>(path);
  throw FormatError("unsupported image extension: " + path);
}

/// Writes [c, h, w] with c in {1, 3}, clamped to [0, 1] and quantized to 8 bits.
template <class T>
void write_image(const std::string& path, const Tensor<T>& img, bool ascii = false) {
  if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
    throw ShapeError("write_image", "expected [1|3, h, w], got " + to_string(img.shape()));
  const std::string ext = detail::lower_ext(path);
  if (ext == "png") return detail::write_png(path, img);
  if (ext == "pgm" || ext == "ppm" || ext == "pnm") return detail::write_pnm(path, img, ascii);
  throw FormatError("unsupported image extension: " + path);
}

}  // namespace uldm
