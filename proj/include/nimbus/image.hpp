#pragma once

// PNG decoding/encoding (libpng) and resampling helpers.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "nimbus/error.hpp"

namespace nimbus {

/// Interleaved 8- or 16-bit image, 1 to 4 channels.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;

  Image() = default;
  Image(int w, int h, int c, int depth = 8)
      : width(w), height(h), channels(c), bit_depth(depth),
        samples(static_cast<std::size_t>(w) * h * c, 0) {}

  std::uint16_t& at(int y, int x, int c) {
    return samples[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint16_t at(int y, int x, int c) const {
    return samples[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

namespace detail {

struct PngContext {
  std::FILE* file = nullptr;
  png_structp png = nullptr;
  png_infop info = nullptr;
  bool writing = false;
  char message[256] = {};
  std::vector<png_byte> buffer;
  std::vector<png_bytep> rows;

  ~PngContext() {
    if (png) {
      if (writing)
        png_destroy_write_struct(&png, info ? &info : nullptr);
      else
        png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    }
    if (file) std::fclose(file);
  }
};

[[noreturn]] inline void png_error_handler(png_structp png, png_const_charp msg) {
  auto* ctx = static_cast<PngContext*>(png_get_error_ptr(png));
  std::snprintf(ctx->message, sizeof(ctx->message), "%s", msg ? msg : "libpng error");
  png_longjmp(png, 1);
}

inline void png_warning_handler(png_structp, png_const_charp) {}

// All state lives in `ctx`; nothing with a destructor is created between
// setjmp and a possible longjmp in this frame.
inline bool png_read_into(PngContext* ctx, Image* out) {
  if (setjmp(png_jmpbuf(ctx->png))) return false;
  png_init_io(ctx->png, ctx->file);
  png_set_sig_bytes(ctx->png, 8);
  png_read_info(ctx->png, ctx->info);

  const png_byte color = png_get_color_type(ctx->png, ctx->info);
  const png_byte depth = png_get_bit_depth(ctx->png, ctx->info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(ctx->png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(ctx->png);
  if (png_get_valid(ctx->png, ctx->info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(ctx->png);
  png_set_interlace_handling(ctx->png);
  png_read_update_info(ctx->png, ctx->info);

  out->width = static_cast<int>(png_get_image_width(ctx->png, ctx->info));
  out->height = static_cast<int>(png_get_image_height(ctx->png, ctx->info));
  out->channels = png_get_channels(ctx->png, ctx->info);
  out->bit_depth = png_get_bit_depth(ctx->png, ctx->info);

  const std::size_t rowbytes = png_get_rowbytes(ctx->png, ctx->info);
  ctx->buffer.resize(rowbytes * static_cast<std::size_t>(out->height));
  ctx->rows.resize(static_cast<std::size_t>(out->height));
  for (int y = 0; y < out->height; ++y) ctx->rows[static_cast<std::size_t>(y)] = ctx->buffer.data() + rowbytes * y;
  png_read_image(ctx->png, ctx->rows.data());
  png_read_end(ctx->png, nullptr);
  return true;
}

inline bool png_write_from(PngContext* ctx, const Image* img) {
  if (setjmp(png_jmpbuf(ctx->png))) return false;
  png_init_io(ctx->png, ctx->file);
  static constexpr int kColorTypes[] = {PNG_COLOR_TYPE_GRAY, PNG_COLOR_TYPE_GRAY_ALPHA,
                                        PNG_COLOR_TYPE_RGB, PNG_COLOR_TYPE_RGB_ALPHA};
  png_set_IHDR(ctx->png, ctx->info, static_cast<png_uint_32>(img->width),
               static_cast<png_uint_32>(img->height), img->bit_depth, kColorTypes[img->channels - 1],
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(ctx->png, 6);
  png_write_info(ctx->png, ctx->info);
  png_write_image(ctx->png, ctx->rows.data());
  png_write_end(ctx->png, nullptr);
  return true;
}

}  // namespace detail

/// Decodes any PNG to 8- or 16-bit samples. Palettes and low bit depths are
/// expanded; channels are kept as stored (1 gray .. 4 RGBA).
inline Image read_png(const std::string& path) {
  detail::PngContext ctx;
  ctx.file = std::fopen(path.c_str(), "rb");
  if (!ctx.file) throw DatasetError(path, "cannot open file");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, ctx.file) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw DatasetError(path, "not a PNG file");
  ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &ctx, detail::png_error_handler,
                                   detail::png_warning_handler);
  if (!ctx.png) throw DatasetError(path, "libpng initialisation failed");
  ctx.info = png_create_info_struct(ctx.png);
  if (!ctx.info) throw DatasetError(path, "libpng initialisation failed");

  Image img;
  if (!detail::png_read_into(&ctx, &img))
    throw DatasetError(path, std::string("undecodable PNG: ") + ctx.message);

  img.samples.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
  const std::size_t per_row = static_cast<std::size_t>(img.width) * img.channels;
  for (int y = 0; y < img.height; ++y) {
    const png_byte* row = ctx.rows[static_cast<std::size_t>(y)];
    std::uint16_t* dst = img.samples.data() + per_row * y;
    if (img.bit_depth == 16) {
      for (std::size_t i = 0; i < per_row; ++i)
        dst[i] = static_cast<std::uint16_t>((row[2 * i] << 8) | row[2 * i + 1]);
    } else {
      for (std::size_t i = 0; i < per_row; ++i) dst[i] = row[i];
    }
  }
  return img;
}

inline void write_png(const std::string& path, const Image& img) {
  if (img.channels < 1 || img.channels > 4 || (img.bit_depth != 8 && img.bit_depth != 16) ||
      img.width < 1 || img.height < 1 ||
      img.samples.size() != static_cast<std::size_t>(img.width) * img.height * img.channels)
    throw Error("write_png: malformed image for " + path);

  detail::PngContext ctx;
  ctx.writing = true;
  const std::size_t per_row = static_cast<std::size_t>(img.width) * img.channels;
  const std::size_t rowbytes = per_row * (img.bit_depth / 8);
  ctx.buffer.resize(rowbytes * img.height);
  for (int y = 0; y < img.height; ++y) {
    const std::uint16_t* src = img.samples.data() + per_row * y;
    png_byte* row = ctx.buffer.data() + rowbytes * y;
    if (img.bit_depth == 16) {
      for (std::size_t i = 0; i < per_row; ++i) {
        row[2 * i] = static_cast<png_byte>(src[i] >> 8);
        row[2 * i + 1] = static_cast<png_byte>(src[i] & 0xff);
      }
    } else {
      for (std::size_t i = 0; i < per_row; ++i) row[i] = static_cast<png_byte>(src[i]);
    }
    ctx.rows.push_back(row);
  }

  ctx.file = std::fopen(path.c_str(), "wb");
  if (!ctx.file) throw Error("write_png: cannot open " + path + " for writing");
  ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &ctx, detail::png_error_handler,
                                    detail::png_warning_handler);
  if (!ctx.png) throw Error("write_png: libpng initialisation failed");
  ctx.info = png_create_info_struct(ctx.png);
  if (!ctx.info) throw Error("write_png: libpng initialisation failed");
  if (!detail::png_write_from(&ctx, &img)) throw Error("write_png: " + path + ": " + ctx.message);
}

// ---------------------------------------------------------------------------
// Resampling on planar float data (channel-major).

/// Bilinear resize with half-pixel centres and edge clamping. Same-size
/// resizes return the input unchanged.
inline std::vector<float> resize_bilinear(const std::vector<float>& src, int channels, int h, int w,
                                          int out_h, int out_w) {
  std::vector<float> out(static_cast<std::size_t>(channels) * out_h * out_w);
  const double sy_scale = static_cast<double>(h) / out_h;
  const double sx_scale = static_cast<double>(w) / out_w;
  std::vector<int> x0(out_w), x1(out_w);
  std::vector<double> fx(out_w);
  for (int x = 0; x < out_w; ++x) {
    const double sx = std::clamp((x + 0.5) * sx_scale - 0.5, 0.0, static_cast<double>(w - 1));
    x0[x] = static_cast<int>(std::floor(sx));
    x1[x] = std::min(x0[x] + 1, w - 1);
    fx[x] = sx - x0[x];
  }
  for (int y = 0; y < out_h; ++y) {
    const double sy = std::clamp((y + 0.5) * sy_scale - 0.5, 0.0, static_cast<double>(h - 1));
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - y0;
    for (int c = 0; c < channels; ++c) {
      const float* plane = src.data() + static_cast<std::size_t>(c) * h * w;
      const float* r0 = plane + static_cast<std::size_t>(y0) * w;
      const float* r1 = plane + static_cast<std::size_t>(y1) * w;
      float* dst = out.data() + (static_cast<std::size_t>(c) * out_h + y) * out_w;
      for (int x = 0; x < out_w; ++x) {
        const double top = r0[x0[x]] + (r0[x1[x]] - static_cast<double>(r0[x0[x]])) * fx[x];
        const double bot = r1[x0[x]] + (r1[x1[x]] - static_cast<double>(r1[x0[x]])) * fx[x];
        dst[x] = static_cast<float>(top + (bot - top) * fy);
      }
    }
  }
  return out;
}

/// Nearest-neighbour resize of a single-plane grid.
template <typename V>
std::vector<V> resize_nearest(const std::vector<V>& src, int h, int w, int out_h, int out_w) {
  std::vector<V> out(static_cast<std::size_t>(out_h) * out_w);
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(h - 1, static_cast<int>(std::floor((y + 0.5) * h / out_h)));
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(w - 1, static_cast<int>(std::floor((x + 0.5) * w / out_w)));
      out[static_cast<std::size_t>(y) * out_w + x] = src[static_cast<std::size_t>(sy) * w + sx];
    }
  }
  return out;
}

}  // namespace nimbus
