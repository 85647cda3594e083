#pragma once

// 8-bit rasters, float planes, resampling and PNG I/O.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "defect_forge/error.hpp"
#include "defect_forge/geometry.hpp"
#include "defect_forge/tensor.hpp"

namespace defect_forge {

// Interleaved 8-bit raster with 1 (gray) or 3 (RGB) channels.
struct Image {
  std::size_t width = 0, height = 0, channels = 3;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) {
    return pixels[(y * width + x) * channels + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
  bool empty() const { return width == 0 || height == 0; }
};

// A single-channel float image stored as a rank-2 tensor [H, W].
using Plane = Tensor;

inline Plane make_plane(std::size_t height, std::size_t width, double fill = 0.0) {
  return Plane({height, width}, fill);
}

inline Plane to_gray_plane(const Image& img) {
  if (img.empty()) throw Error(ErrorKind::InvalidArgument, "image has a zero dimension");
  Plane p = make_plane(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      double v;
      if (img.channels >= 3) {
        v = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
      } else {
        v = img.at(y, x, 0);
      }
      p.at(y, x) = v / 255.0;
    }
  return p;
}

inline Image plane_to_image(const Plane& p, double scale = 255.0) {
  Image img(p.dim(1), p.dim(0), 1);
  for (std::size_t i = 0; i < p.size(); ++i)
    img.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::round(p[i] * scale), 0.0, 255.0));
  return img;
}

// Bilinear resize that maps pixel centres onto pixel centres.
inline Plane resize_bilinear(const Plane& src, std::size_t out_h, std::size_t out_w) {
  require_rank(src, 2, "resize input");
  if (out_h == 0 || out_w == 0) throw Error(ErrorKind::InvalidArgument, "resize to zero extent");
  const std::size_t H = src.dim(0), W = src.dim(1);
  Plane out = make_plane(out_h, out_w);
  const double sy = static_cast<double>(H) / static_cast<double>(out_h);
  const double sx = static_cast<double>(W) / static_cast<double>(out_w);
  for (std::size_t i = 0; i < out_h; ++i) {
    const double y = (static_cast<double>(i) + 0.5) * sy - 0.5;
    for (std::size_t j = 0; j < out_w; ++j) {
      const double x = (static_cast<double>(j) + 0.5) * sx - 0.5;
      out.at(i, j) = bilinear_taps_clamped(H, W, y, x).sample(src.data().data());
    }
  }
  return out;
}

// Area-weighted resample of `region` (in src pixel-edge coordinates) onto an
// out_h x out_w grid. Each output pixel is the exact coverage-weighted mean of
// the source pixels under its footprint.
inline Plane resample_region(const Plane& src, const Box& region, std::size_t out_h,
                             std::size_t out_w) {
  require_rank(src, 2, "resample input");
  if (!(region.width() > 0 && region.height() > 0) || out_h == 0 || out_w == 0) {
    throw Error(ErrorKind::InvalidArgument, "resample needs a positive-area region and output");
  }
  const std::size_t H = src.dim(0), W = src.dim(1);
  const double fy = region.height() / static_cast<double>(out_h);
  const double fx = region.width() / static_cast<double>(out_w);

  // Per-output-column source spans with coverage weights, reused for every row.
  struct Span {
    std::size_t lo;
    std::vector<double> w;
  };
  auto spans = [](double start, double step, std::size_t n, std::size_t limit) {
    std::vector<Span> s(n);
    for (std::size_t k = 0; k < n; ++k) {
      double a = start + step * static_cast<double>(k);
      double b = a + step;
      a = std::clamp(a, 0.0, static_cast<double>(limit));
      b = std::clamp(b, 0.0, static_cast<double>(limit));
      if (b <= a) {  // footprint entirely outside: take the nearest edge pixel
        const auto idx = static_cast<std::size_t>(std::min(std::floor(a), static_cast<double>(limit - 1)));
        s[k] = {idx, {1.0}};
        continue;
      }
      const auto lo = static_cast<std::size_t>(std::floor(a));
      const auto hi = std::min(static_cast<std::size_t>(std::ceil(b)), limit);
      s[k].lo = lo;
      double total = 0.0;
      for (std::size_t p = lo; p < hi; ++p) {
        const double cover = std::min(b, static_cast<double>(p + 1)) - std::max(a, static_cast<double>(p));
        s[k].w.push_back(std::max(0.0, cover));
        total += s[k].w.back();
      }
      for (double& v : s[k].w) v /= total;
    }
    return s;
  };
  const auto ys = spans(region.y_min, fy, out_h, H);
  const auto xs = spans(region.x_min, fx, out_w, W);
  Plane out = make_plane(out_h, out_w);
  for (std::size_t i = 0; i < out_h; ++i)
    for (std::size_t j = 0; j < out_w; ++j) {
      double acc = 0.0;
      for (std::size_t a = 0; a < ys[i].w.size(); ++a) {
        const double* row = src.data().data() + (ys[i].lo + a) * W + xs[j].lo;
        double racc = 0.0;
        for (std::size_t b = 0; b < xs[j].w.size(); ++b) racc += xs[j].w[b] * row[b];
        acc += ys[i].w[a] * racc;
      }
      out.at(i, j) = acc;
    }
  return out;
}

inline Plane crop(const Plane& src, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  Plane out = make_plane(h, w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) out.at(i, j) = src.at(y0 + i, x0 + j);
  return out;
}

inline Plane threshold_plane(const Plane& p, double t) {
  Plane out(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[i] >= t ? 1.0 : 0.0;
  return out;
}

// --------------------------------------------------------------------------
// PNG

inline Image read_png(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "rb"), &std::fclose);
  if (!fp) throw Error(ErrorKind::Io, "cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw Error(ErrorKind::Format, "not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorKind::Io, "libpng initialisation failed");
  }
  Image img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorKind::Format, "corrupt PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  img.pixels.resize(img.width * img.height * img.channels);
  rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * img.width * img.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.empty() || (img.channels != 1 && img.channels != 3)) {
    throw Error(ErrorKind::InvalidArgument, "write_png needs a non-empty 1- or 3-channel image");
  }
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) throw Error(ErrorKind::Io, "cannot create " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorKind::Io, "libpng initialisation failed");
  }
  std::vector<png_bytep> rows(img.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorKind::Io, "failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y)
    rows[y] = const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace defect_forge
