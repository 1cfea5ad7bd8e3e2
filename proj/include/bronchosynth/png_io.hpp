#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "bronchosynth/image.hpp"

namespace bsynth::png {

struct Gray16 {
  int height = 0;
  int width = 0;
  std::vector<std::uint16_t> values;
};

// All readers throw InputError for missing or undecodable files. Any PNG
// color type is accepted and converted.
RgbImage read_rgb(const std::filesystem::path& path);
Gray16 read_gray16(const std::filesystem::path& path);

void write_rgb(const std::filesystem::path& path, const RgbImage& image);
void write_gray16(const std::filesystem::path& path, const Gray16& image);
void write_gray8(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& values);

// Depth is quantized to 16 bits: value * 65535.
DepthImage read_depth(const std::filesystem::path& path);
void write_depth(const std::filesystem::path& path, const DepthImage& depth);

// Masks are stored as 0/255 and read back thresholded at 128.
OrificeMask read_mask(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const OrificeMask& mask);

}  // namespace bsynth::png
