#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "rsvm/common.hpp"

namespace rsvm {

struct ImageU8 {
  int width = 0, height = 0;
  std::vector<uint8_t> pixels;  // interleaved RGB, row-major

  uint8_t& at(int y, int x, int c) { return pixels[(y * width + x) * 3 + c]; }
  uint8_t at(int y, int x, int c) const { return pixels[(y * width + x) * 3 + c]; }
};

// Reads width/height from the PNG IHDR or JPEG SOF marker without decoding
// pixel data. Returns false for unrecognized or truncated files.
bool read_image_dims(const std::filesystem::path& file, int& width, int& height);

// Full RGB decode (PNG and JPEG). Throws IoError with the file path on
// failure.
ImageU8 decode_image(const std::filesystem::path& file);

// Fixed-settings RGB PNG writer; identical input produces identical bytes.
void write_png_rgb(const std::filesystem::path& file, const ImageU8& img);

ImageU8 resize_bilinear(const ImageU8& src, int out_w, int out_h);

}  // namespace rsvm
