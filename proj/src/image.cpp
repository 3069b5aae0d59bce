#include "ettk/image.hpp"

#include <png.h>

#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>

namespace ettk {

namespace {

// Skips PPM whitespace and '#' comments between header tokens.
int next_token(std::istream& in) {
  int v = 0;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    if (!std::isspace(static_cast<unsigned char>(c))) {
      in.unget();
      break;
    }
  }
  if (!(in >> v)) throw std::runtime_error("ppm: malformed header");
  return v;
}

}  // namespace

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("ppm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw std::runtime_error("ppm: " + path + " is not a binary P6 file");
  const int w = next_token(in);
  const int h = next_token(in);
  const int maxval = next_token(in);
  if (w < 1 || h < 1 || maxval != 255) throw std::runtime_error("ppm: unsupported geometry in " + path);
  in.get();  // single whitespace after maxval
  Image img(h, w);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.rgb.size())) {
    throw std::runtime_error("ppm: truncated pixel data in " + path);
  }
  return img;
}

void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("ppm: cannot write " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

Image read_png(const std::string& path) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw std::runtime_error("png: cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png: allocation failure");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("png: allocation failure");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png: failed to decode " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  // Normalize any input (palette, grey, 16-bit, alpha) to 8-bit RGB.
  png_set_expand(png);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (png_get_color_type(png, info) & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
      png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(png);
  }
  png_set_interlace_handling(png);
  png_read_update_info(png, info);

  const std::int64_t w = png_get_image_width(png, info);
  const std::int64_t h = png_get_image_height(png, info);
  Image img(h, w);
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (std::int64_t y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = img.rgb.data() + y * w * 3;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

Image read_image(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".png") return read_png(path);
  return read_ppm(path);
}

void draw_box(Image& img, const Box& box, std::uint8_t r, std::uint8_t g, std::uint8_t b, std::int64_t thickness) {
  const auto clamp_x = [&](double v) { return std::min(img.width - 1.0, std::max(0.0, v)); };
  const auto clamp_y = [&](double v) { return std::min(img.height - 1.0, std::max(0.0, v)); };
  const std::int64_t x1 = static_cast<std::int64_t>(clamp_x(box.x1));
  const std::int64_t y1 = static_cast<std::int64_t>(clamp_y(box.y1));
  const std::int64_t x2 = static_cast<std::int64_t>(clamp_x(box.x2));
  const std::int64_t y2 = static_cast<std::int64_t>(clamp_y(box.y2));
  for (std::int64_t t = 0; t < thickness; ++t) {
    for (std::int64_t x = x1; x <= x2; ++x) {
      for (std::int64_t y : {std::min(y1 + t, img.height - 1), std::max<std::int64_t>(y2 - t, 0)}) {
        img.at(y, x, 0) = r;
        img.at(y, x, 1) = g;
        img.at(y, x, 2) = b;
      }
    }
    for (std::int64_t y = y1; y <= y2; ++y) {
      for (std::int64_t x : {std::min(x1 + t, img.width - 1), std::max<std::int64_t>(x2 - t, 0)}) {
        img.at(y, x, 0) = r;
        img.at(y, x, 1) = g;
        img.at(y, x, 2) = b;
      }
    }
  }
}

}  // namespace ettk
