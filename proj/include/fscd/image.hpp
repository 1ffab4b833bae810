#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fscd/geometry.hpp"
#include "fscd/nn/tensor.hpp"

namespace fscd {

/// 8-bit RGB raster, row-major, interleaved channels.
struct Image {
  long width = 0;
  long height = 0;
  std::vector<std::uint8_t> rgb;  // height * width * 3

  Image() = default;
  Image(long w, long h, std::uint8_t fill = 0);

  std::uint8_t& at(long x, long y, long c) {
    return rgb[static_cast<std::size_t>((y * width + x) * 3 + c)];
  }
  std::uint8_t at(long x, long y, long c) const {
    return rgb[static_cast<std::size_t>((y * width + x) * 3 + c)];
  }
  bool in_bounds(long x, long y) const {
    return x >= 0 && x < width && y >= 0 && y < height;
  }
};

// Binary PPM (P6) with maxval 255: deterministic bytes, no external decoder.
Image load_ppm(const std::string& path);
void save_ppm(const Image& img, const std::string& path);

/// Bilinear resize to exactly new_w x new_h.
Image resize(const Image& img, long new_w, long new_h);

/// Downscales so the longer side is at most max_side, preserving aspect.
/// Images already within the bound are returned unchanged.
Image resize_longest_side(const Image& img, long max_side);

/// [H, W, 3] tensor with per-channel standardization of intensities in [0,1].
nn::Tensor image_to_tensor(const Image& img);

// ---- drawing (used by the prediction renderer and the scene generator) ----

struct Rgb {
  std::uint8_t r, g, b;
};

void fill_rect(Image& img, long x0, long y0, long x1, long y1, Rgb color);
void fill_ellipse(Image& img, double cx, double cy, double rx, double ry,
                  Rgb color);
/// Isoceles triangle: apex at top-center of the box, base on the bottom edge.
void fill_triangle(Image& img, long x0, long y0, long x1, long y1, Rgb color);

/// Axis-aligned rectangle outline in pixel corner coordinates.
void draw_rect_outline(Image& img, long x0, long y0, long x1, long y1,
                       Rgb color, long thickness = 1);
void draw_disc(Image& img, double cx, double cy, double radius, Rgb color);
/// Renders digits and '#' with a 5x7 bitmap font; other characters advance
/// the cursor without marks.
void draw_text(Image& img, long x, long y, const std::string& text, Rgb color,
               long scale = 1);

}  // namespace fscd
