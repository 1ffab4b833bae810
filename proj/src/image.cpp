#include "fscd/image.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "fscd/errors.hpp"

namespace fscd {

Image::Image(long w, long h, std::uint8_t fill)
    : width(w), height(h), rgb(static_cast<std::size_t>(w * h * 3), fill) {
  if (w <= 0 || h <= 0) throw ValueError("Image: dimensions must be positive");
}

namespace {

// Reads one whitespace-delimited token, skipping '#' comment lines.
std::string next_token(std::istream& in) {
  std::string tok;
  while (in >> tok) {
    if (tok[0] == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    return tok;
  }
  throw SchemaViolationError("ppm: truncated header");
}

}  // namespace

Image load_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("ppm: cannot open " + path);
  if (next_token(in) != "P6") {
    throw SchemaViolationError("ppm: not a binary P6 file: " + path);
  }
  const long w = std::stol(next_token(in));
  const long h = std::stol(next_token(in));
  const long maxval = std::stol(next_token(in));
  if (w <= 0 || h <= 0 || maxval != 255) {
    throw SchemaViolationError("ppm: unsupported dimensions/maxval in " + path);
  }
  in.get();  // single whitespace byte after maxval
  Image img(w, h);
  in.read(reinterpret_cast<char*>(img.rgb.data()),
          static_cast<std::streamsize>(img.rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.rgb.size())) {
    throw SchemaViolationError("ppm: truncated pixel data in " + path);
  }
  return img;
}

void save_ppm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("ppm: cannot write " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
  if (!out) throw Error("ppm: write failed for " + path);
}

Image resize(const Image& img, long new_w, long new_h) {
  if (new_w <= 0 || new_h <= 0) {
    throw ValueError("resize: target dimensions must be positive");
  }
  Image out(new_w, new_h);
  const double sx = static_cast<double>(img.width) / static_cast<double>(new_w);
  const double sy =
      static_cast<double>(img.height) / static_cast<double>(new_h);
  for (long y = 0; y < new_h; ++y) {
    const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    const long y0 = std::clamp(static_cast<long>(std::floor(fy)), 0L,
                               img.height - 1);
    const long y1 = std::min(y0 + 1, img.height - 1);
    const double wy = std::clamp(fy - static_cast<double>(y0), 0.0, 1.0);
    for (long x = 0; x < new_w; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      const long x0 = std::clamp(static_cast<long>(std::floor(fx)), 0L,
                                 img.width - 1);
      const long x1 = std::min(x0 + 1, img.width - 1);
      const double wx = std::clamp(fx - static_cast<double>(x0), 0.0, 1.0);
      for (long c = 0; c < 3; ++c) {
        const double top = (1.0 - wx) * img.at(x0, y0, c) + wx * img.at(x1, y0, c);
        const double bot = (1.0 - wx) * img.at(x0, y1, c) + wx * img.at(x1, y1, c);
        const double v = (1.0 - wy) * top + wy * bot;
        out.at(x, y, c) = static_cast<std::uint8_t>(std::lround(
            std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  return out;
}

Image resize_longest_side(const Image& img, long max_side) {
  const long longest = std::max(img.width, img.height);
  if (longest <= max_side) return img;
  const double scale =
      static_cast<double>(max_side) / static_cast<double>(longest);
  const long nw = std::max(1L, static_cast<long>(std::lround(img.width * scale)));
  const long nh =
      std::max(1L, static_cast<long>(std::lround(img.height * scale)));
  return resize(img, nw, nh);
}

nn::Tensor image_to_tensor(const Image& img) {
  static constexpr std::array<double, 3> kMean = {0.485, 0.456, 0.406};
  static constexpr std::array<double, 3> kStd = {0.229, 0.224, 0.225};
  nn::Tensor t({img.height, img.width, 3});
  for (long y = 0; y < img.height; ++y) {
    for (long x = 0; x < img.width; ++x) {
      for (long c = 0; c < 3; ++c) {
        const double v = static_cast<double>(img.at(x, y, c)) / 255.0;
        t[(y * img.width + x) * 3 + c] =
            (v - kMean[static_cast<std::size_t>(c)]) /
            kStd[static_cast<std::size_t>(c)];
      }
    }
  }
  return t;
}

void fill_rect(Image& img, long x0, long y0, long x1, long y1, Rgb color) {
  for (long y = std::max(0L, y0); y <= std::min(img.height - 1, y1); ++y) {
    for (long x = std::max(0L, x0); x <= std::min(img.width - 1, x1); ++x) {
      img.at(x, y, 0) = color.r;
      img.at(x, y, 1) = color.g;
      img.at(x, y, 2) = color.b;
    }
  }
}

void fill_ellipse(Image& img, double cx, double cy, double rx, double ry,
                  Rgb color) {
  if (rx <= 0 || ry <= 0) return;
  const long y0 = std::max(0L, static_cast<long>(std::floor(cy - ry)));
  const long y1 = std::min(img.height - 1, static_cast<long>(std::ceil(cy + ry)));
  const long x0 = std::max(0L, static_cast<long>(std::floor(cx - rx)));
  const long x1 = std::min(img.width - 1, static_cast<long>(std::ceil(cx + rx)));
  for (long y = y0; y <= y1; ++y) {
    for (long x = x0; x <= x1; ++x) {
      const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
      const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
      if (dx * dx + dy * dy <= 1.0) {
        img.at(x, y, 0) = color.r;
        img.at(x, y, 1) = color.g;
        img.at(x, y, 2) = color.b;
      }
    }
  }
}

void fill_triangle(Image& img, long x0, long y0, long x1, long y1, Rgb color) {
  if (x1 <= x0 || y1 <= y0) return;
  const double apex_x = 0.5 * static_cast<double>(x0 + x1);
  const double h = static_cast<double>(y1 - y0);
  for (long y = std::max(0L, y0); y <= std::min(img.height - 1, y1); ++y) {
    // Width grows linearly from 0 at the apex row to full at the base row.
    const double frac = (static_cast<double>(y) - static_cast<double>(y0)) / h;
    const double half = 0.5 * frac * static_cast<double>(x1 - x0);
    const long xa = std::max(0L, static_cast<long>(std::ceil(apex_x - half)));
    const long xb =
        std::min(img.width - 1, static_cast<long>(std::floor(apex_x + half)));
    for (long x = xa; x <= xb; ++x) {
      img.at(x, y, 0) = color.r;
      img.at(x, y, 1) = color.g;
      img.at(x, y, 2) = color.b;
    }
  }
}

void draw_rect_outline(Image& img, long x0, long y0, long x1, long y1,
                       Rgb color, long thickness) {
  for (long t = 0; t < thickness; ++t) {
    const long ax0 = x0 + t, ay0 = y0 + t, ax1 = x1 - t, ay1 = y1 - t;
    if (ax1 < ax0 || ay1 < ay0) break;
    for (long x = std::max(0L, ax0); x <= std::min(img.width - 1, ax1); ++x) {
      if (ay0 >= 0 && ay0 < img.height) {
        img.at(x, ay0, 0) = color.r;
        img.at(x, ay0, 1) = color.g;
        img.at(x, ay0, 2) = color.b;
      }
      if (ay1 >= 0 && ay1 < img.height) {
        img.at(x, ay1, 0) = color.r;
        img.at(x, ay1, 1) = color.g;
        img.at(x, ay1, 2) = color.b;
      }
    }
    for (long y = std::max(0L, ay0); y <= std::min(img.height - 1, ay1); ++y) {
      if (ax0 >= 0 && ax0 < img.width) {
        img.at(ax0, y, 0) = color.r;
        img.at(ax0, y, 1) = color.g;
        img.at(ax0, y, 2) = color.b;
      }
      if (ax1 >= 0 && ax1 < img.width) {
        img.at(ax1, y, 0) = color.r;
        img.at(ax1, y, 1) = color.g;
        img.at(ax1, y, 2) = color.b;
      }
    }
  }
}

void draw_disc(Image& img, double cx, double cy, double radius, Rgb color) {
  fill_ellipse(img, cx, cy, radius, radius, color);
}

namespace {

// 5x7 glyphs, one bit per pixel, rows top to bottom.
struct Glyph {
  char ch;
  std::array<std::uint8_t, 7> rows;  // low 5 bits used, MSB = leftmost
};

constexpr std::array<Glyph, 11> kFont = {{
    {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
    {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
    {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
    {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
    {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
    {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
    {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
    {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
    {'#', {0x0A, 0x0A, 0x1F, 0x0A, 0x1F, 0x0A, 0x0A}},
}};

const Glyph* find_glyph(char c) {
  for (const auto& g : kFont) {
    if (g.ch == c) return &g;
  }
  return nullptr;
}

}  // namespace

void draw_text(Image& img, long x, long y, const std::string& text, Rgb color,
               long scale) {
  long cursor = x;
  for (char c : text) {
    if (const Glyph* g = find_glyph(c)) {
      for (long gy = 0; gy < 7; ++gy) {
        for (long gx = 0; gx < 5; ++gx) {
          if ((g->rows[static_cast<std::size_t>(gy)] >> (4 - gx)) & 1) {
            for (long sy = 0; sy < scale; ++sy) {
              for (long sx = 0; sx < scale; ++sx) {
                const long px = cursor + gx * scale + sx;
                const long py = y + gy * scale + sy;
                if (img.in_bounds(px, py)) {
                  img.at(px, py, 0) = color.r;
                  img.at(px, py, 1) = color.g;
                  img.at(px, py, 2) = color.b;
                }
              }
            }
          }
        }
      }
    }
    cursor += 6 * scale;  // 5-wide glyph + 1 column spacing
  }
}

}  // namespace fscd
