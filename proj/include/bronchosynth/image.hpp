#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace bsynth {

inline constexpr int kMinImageSide = 32;

// 8-bit interleaved RGB (row-major, HWC).
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  std::uint8_t& at(int r, int c, int ch) { return pixels[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }
  std::uint8_t at(int r, int c, int ch) const { return pixels[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }
  std::size_t size() const { return static_cast<std::size_t>(height) * width; }

  bool operator==(const RgbImage&) const = default;
};

// Throws InputError unless the image is at least kMinImageSide on each side
// and its buffer matches its shape.
void validate(const RgbImage& image);

// Single-channel depth field in [0, 1]. Larger values are farther away.
struct DepthImage {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  DepthImage() = default;
  DepthImage(int h, int w, double fill = 0.0)
      : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

  double& at(int r, int c) { return values[static_cast<std::size_t>(r) * width + c]; }
  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
  std::size_t size() const { return values.size(); }

  bool operator==(const DepthImage&) const = default;
};

// Binary per-pixel orifice labels (0 or 1).
struct OrificeMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;

  OrificeMask() = default;
  OrificeMask(int h, int w) : height(h), width(w), labels(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int r, int c) { return labels[static_cast<std::size_t>(r) * width + c]; }
  std::uint8_t at(int r, int c) const { return labels[static_cast<std::size_t>(r) * width + c]; }
  std::size_t size() const { return labels.size(); }
  std::size_t count() const;

  bool operator==(const OrificeMask&) const = default;
};

// Relaxed mask with pixel values in [0, 1].
struct SoftMask {
  int height = 0;
  int width = 0;
  double temperature = 1.0;
  std::vector<double> values;

  OrificeMask threshold(double level = 0.5) const;
};

// Per-image min-max normalization in place. A constant field becomes all zeros.
void normalize_min_max(std::span<double> values);
DepthImage normalized(DepthImage depth);

// Rec.601 luma of each pixel, scaled to [0, 1].
std::vector<double> luminance(const RgbImage& image);

// Bilinear resampling (pixel-center aligned).
RgbImage resize_bilinear(const RgbImage& image, int height, int width);
DepthImage resize_bilinear(const DepthImage& depth, int height, int width);

// Blacks out every pixel farther than radius_fraction * min(H, W) / 2 from
// the image center. Pixels inside are left untouched.
RgbImage circular_crop(const RgbImage& image, double radius_fraction);

// 4-connected component count of the foreground.
int count_components(const OrificeMask& mask);

// Mean of each pixel's channels when the image is viewed as gray.
std::vector<double> to_gray(const RgbImage& image);

}  // namespace bsynth
