#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ettk/box.hpp"

namespace ettk {

// 8-bit RGB frame, row-major H x W x 3.
struct Image {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::int64_t h, std::int64_t w) : height(h), width(w), rgb(static_cast<std::size_t>(h * w * 3), 0) {}

  std::uint8_t& at(std::int64_t y, std::int64_t x, std::int64_t c) {
    return rgb[static_cast<std::size_t>((y * width + x) * 3 + c)];
  }
  std::uint8_t at(std::int64_t y, std::int64_t x, std::int64_t c) const {
    return rgb[static_cast<std::size_t>((y * width + x) * 3 + c)];
  }
};

Image read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image& img);
Image read_png(const std::string& path);
// Dispatches on the file extension (.ppm or .png).
Image read_image(const std::string& path);

void draw_box(Image& img, const Box& box, std::uint8_t r, std::uint8_t g, std::uint8_t b,
              std::int64_t thickness = 2);

}  // namespace ettk
