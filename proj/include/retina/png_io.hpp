#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace retina {

struct Rgb8Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB, row-major
};

// Reads any 8-bit PNG (gray, palette, RGB, with or without alpha) as RGB.
// 16-bit files are rejected.
Rgb8Image read_png_rgb8(const std::string& path);

void write_png_rgb8(const std::string& path, int height, int width, const std::uint8_t* rgb);
void write_png_gray8(const std::string& path, int height, int width, const std::uint8_t* gray);

}  // namespace retina
