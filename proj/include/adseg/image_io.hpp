#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "adseg/error.hpp"
#include "adseg/tensor.hpp"

namespace adseg {

/// Decoded 8-bit raster, interleaved channels.
struct Raster {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;
};

namespace detail {

struct PngImage {
  png_image img;
  PngImage() {
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
  }
  ~PngImage() { png_image_free(&img); }
  PngImage(const PngImage&) = delete;
  PngImage& operator=(const PngImage&) = delete;
};

inline Raster finish_read(PngImage& p, std::uint32_t format, std::size_t channels, const std::string& what) {
  p.img.format = format;
  Raster r;
  r.height = p.img.height;
  r.width = p.img.width;
  r.channels = channels;
  if (r.height == 0 || r.width == 0) throw IoError(what + ": empty image");
  r.pixels.resize(PNG_IMAGE_SIZE(p.img));
  if (!png_image_finish_read(&p.img, nullptr, r.pixels.data(), 0, nullptr))
    throw IoError(what + ": " + p.img.message);
  return r;
}

inline std::pair<std::uint32_t, std::size_t> read_format(bool gray) {
  return gray ? std::pair<std::uint32_t, std::size_t>{PNG_FORMAT_GRAY, 1}
              : std::pair<std::uint32_t, std::size_t>{PNG_FORMAT_RGB, 3};
}

}  // namespace detail

/// Reads any PNG and converts it to 8-bit RGB (or gray when `gray` is set).
inline Raster read_png(const std::string& path, bool gray = false) {
  detail::PngImage p;
  if (!png_image_begin_read_from_file(&p.img, path.c_str())) throw IoError("cannot read PNG " + path + ": " + p.img.message);
  auto [fmt, ch] = detail::read_format(gray);
  return detail::finish_read(p, fmt, ch, path);
}

inline Raster decode_png(const std::string& bytes, bool gray = false) {
  detail::PngImage p;
  if (bytes.empty() || !png_image_begin_read_from_memory(&p.img, bytes.data(), bytes.size()))
    throw IoError(std::string("invalid PNG data: ") + (bytes.empty() ? "empty" : p.img.message));
  auto [fmt, ch] = detail::read_format(gray);
  return detail::finish_read(p, fmt, ch, "PNG data");
}

inline std::string encode_png(const Raster& r) {
  if (r.channels != 1 && r.channels != 3) throw IoError("encode_png: 1 or 3 channels expected");
  if (r.pixels.size() != r.height * r.width * r.channels) throw IoError("encode_png: pixel buffer size mismatch");
  detail::PngImage p;
  p.img.width = static_cast<png_uint_32>(r.width);
  p.img.height = static_cast<png_uint_32>(r.height);
  p.img.format = r.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&p.img, nullptr, &size, 0, r.pixels.data(), 0, nullptr))
    throw IoError(std::string("PNG encode failed: ") + p.img.message);
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&p.img, out.data(), &size, 0, r.pixels.data(), 0, nullptr))
    throw IoError(std::string("PNG encode failed: ") + p.img.message);
  out.resize(size);
  return out;
}

/// 16-bit linear grayscale PNG of an [H,W] map in [0,1].
inline std::string encode_png16(const Tensor& m) {
  require_rank(m, 2, "encode_png16");
  std::vector<std::uint16_t> px(m.size());
  for (std::size_t k = 0; k < m.size(); ++k)
    px[k] = static_cast<std::uint16_t>(std::lround(std::clamp(m[k], Real{0}, Real{1}) * 65535));
  detail::PngImage p;
  p.img.width = static_cast<png_uint_32>(m.dim(1));
  p.img.height = static_cast<png_uint_32>(m.dim(0));
  p.img.format = PNG_FORMAT_LINEAR_Y;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&p.img, nullptr, &size, 0, px.data(), 0, nullptr))
    throw IoError(std::string("PNG encode failed: ") + p.img.message);
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&p.img, out.data(), &size, 0, px.data(), 0, nullptr))
    throw IoError(std::string("PNG encode failed: ") + p.img.message);
  out.resize(size);
  return out;
}

/// Inverse of encode_png16.
inline Tensor decode_png16(const std::string& bytes) {
  detail::PngImage p;
  if (bytes.empty() || !png_image_begin_read_from_memory(&p.img, bytes.data(), bytes.size()))
    throw IoError("invalid PNG data");
  p.img.format = PNG_FORMAT_LINEAR_Y;
  std::vector<std::uint16_t> px(static_cast<std::size_t>(p.img.width) * p.img.height);
  if (px.empty() || !png_image_finish_read(&p.img, nullptr, px.data(), 0, nullptr))
    throw IoError(std::string("PNG decode failed: ") + p.img.message);
  Tensor m({p.img.height, p.img.width});
  for (std::size_t k = 0; k < px.size(); ++k) m[k] = px[k] / Real{65535};
  return m;
}

inline void write_png(const std::string& path, const Raster& r) {
  const std::string bytes = encode_png(r);
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot write " + path);
  const bool ok = std::fwrite(bytes.data(), 1, bytes.size(), f) == bytes.size();
  if (std::fclose(f) != 0 || !ok) throw IoError("failed writing " + path);
}

/// [C,H,W] in [0,1] from an interleaved raster.
inline Tensor to_tensor(const Raster& r) {
  Tensor t({r.channels, r.height, r.width});
  for (std::size_t i = 0; i < r.height; ++i)
    for (std::size_t j = 0; j < r.width; ++j)
      for (std::size_t c = 0; c < r.channels; ++c)
        t.at(c, i, j) = r.pixels[(i * r.width + j) * r.channels + c] / Real{255};
  return t;
}

/// Rank-2 tensors become gray, [1|3,H,W] tensors gray or RGB. Values are clamped to [0,1].
inline Raster to_raster(const Tensor& t) {
  Raster r;
  if (t.rank() == 2) {
    r.channels = 1;
    r.height = t.dim(0);
    r.width = t.dim(1);
  } else if (t.rank() == 3 && (t.dim(0) == 1 || t.dim(0) == 3)) {
    r.channels = t.dim(0);
    r.height = t.dim(1);
    r.width = t.dim(2);
  } else {
    throw ShapeError("to_raster: expected [H,W] or [1|3,H,W], got " + shape_str(t.shape()));
  }
  const std::size_t hw = r.height * r.width;
  r.pixels.resize(hw * r.channels);
  for (std::size_t c = 0; c < r.channels; ++c)
    for (std::size_t k = 0; k < hw; ++k) {
      const Real v = std::clamp(t[c * hw + k], Real{0}, Real{1});
      r.pixels[k * r.channels + c] = static_cast<std::uint8_t>(std::lround(v * 255));
    }
  return r;
}

/// Bilinear resize of a [C,H,W] tensor, half-pixel centres, edges clamped.
inline Tensor resize_bilinear(const Tensor& t, std::size_t H, std::size_t W) {
  require_rank(t, 3, "resize_bilinear");
  if (H == 0 || W == 0) throw ShapeError("resize_bilinear: zero target size");
  const std::size_t C = t.dim(0), h = t.dim(1), w = t.dim(2);
  if (h == H && w == W) return t;
  Tensor out({C, H, W});
  const double sy = static_cast<double>(h) / static_cast<double>(H);
  const double sx = static_cast<double>(w) / static_cast<double>(W);
  for (std::size_t i = 0; i < H; ++i) {
    const double fy = std::clamp((static_cast<double>(i) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ay = fy - static_cast<double>(y0);
    for (std::size_t j = 0; j < W; ++j) {
      const double fx = std::clamp((static_cast<double>(j) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double ax = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const double top = (1 - ax) * t.at(c, y0, x0) + ax * t.at(c, y0, x1);
        const double bot = (1 - ax) * t.at(c, y1, x0) + ax * t.at(c, y1, x1);
        out.at(c, i, j) = (1 - ay) * top + ay * bot;
      }
    }
  }
  return out;
}

/// Nearest-neighbour resize of an [H,W] map; keeps the value set intact.
inline Tensor resize_nearest(const Tensor& m, std::size_t H, std::size_t W) {
  require_rank(m, 2, "resize_nearest");
  if (H == 0 || W == 0) throw ShapeError("resize_nearest: zero target size");
  const std::size_t h = m.dim(0), w = m.dim(1);
  if (h == H && w == W) return m;
  Tensor out({H, W});
  for (std::size_t i = 0; i < H; ++i) {
    const std::size_t y = std::min(h - 1, static_cast<std::size_t>((static_cast<double>(i) + 0.5) * h / H));
    for (std::size_t j = 0; j < W; ++j) {
      const std::size_t x = std::min(w - 1, static_cast<std::size_t>((static_cast<double>(j) + 0.5) * w / W));
      out.at(i, j) = m.at(y, x);
    }
  }
  return out;
}

inline Tensor binarize(const Raster& gray, std::uint8_t threshold = 128) {
  if (gray.channels != 1) throw ShapeError("binarize: gray raster expected");
  Tensor m({gray.height, gray.width});
  for (std::size_t k = 0; k < m.size(); ++k) m[k] = gray.pixels[k] >= threshold ? 1 : 0;
  return m;
}

}  // namespace adseg
