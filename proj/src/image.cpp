#include "bronchosynth/image.hpp"

#include <algorithm>
#include <cmath>
#include <stack>
#include <string>

#include "bronchosynth/errors.hpp"

namespace bsynth {

void validate(const RgbImage& image) {
  if (image.height < kMinImageSide || image.width < kMinImageSide) {
    throw InputError("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     ", minimum side is " + std::to_string(kMinImageSide));
  }
  if (image.pixels.size() != image.size() * 3) {
    throw InputError("RGB buffer size does not match image shape");
  }
}

std::size_t OrificeMask::count() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
}

OrificeMask SoftMask::threshold(double level) const {
  OrificeMask mask(height, width);
  for (std::size_t i = 0; i < values.size(); ++i) mask.labels[i] = values[i] > level ? 1 : 0;
  return mask;
}

void normalize_min_max(std::span<double> values) {
  if (values.empty()) return;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double min = *lo;
  const double range = *hi - min;
  if (!(range > 0.0)) {
    std::fill(values.begin(), values.end(), 0.0);
    return;
  }
  for (double& v : values) v = (v - min) / range;
}

DepthImage normalized(DepthImage depth) {
  normalize_min_max(depth.values);
  return depth;
}

std::vector<double> luminance(const RgbImage& image) {
  std::vector<double> luma(image.size());
  for (std::size_t i = 0; i < luma.size(); ++i) {
    const double r = image.pixels[3 * i], g = image.pixels[3 * i + 1], b = image.pixels[3 * i + 2];
    luma[i] = (0.299 * r + 0.587 * g + 0.114 * b) / 255.0;
  }
  return luma;
}

std::vector<double> to_gray(const RgbImage& image) {
  std::vector<double> gray(image.size());
  for (std::size_t i = 0; i < gray.size(); ++i) {
    gray[i] = (image.pixels[3 * i] + image.pixels[3 * i + 1] + image.pixels[3 * i + 2]) / 3.0;
  }
  return gray;
}

namespace {

// Samples a planar channel at continuous coordinates with edge clamping.
template <typename Get>
double bilinear(Get&& get, int h, int w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0, fx = x - x0;
  return (1 - fy) * ((1 - fx) * get(y0, x0) + fx * get(y0, x1)) + fy * ((1 - fx) * get(y1, x0) + fx * get(y1, x1));
}

}  // namespace

RgbImage resize_bilinear(const RgbImage& image, int height, int width) {
  if (height == image.height && width == image.width) return image;
  RgbImage out(height, width);
  const double sy = static_cast<double>(image.height) / height;
  const double sx = static_cast<double>(image.width) / width;
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      const double y = (r + 0.5) * sy - 0.5;
      const double x = (c + 0.5) * sx - 0.5;
      for (int ch = 0; ch < 3; ++ch) {
        const double v = bilinear([&](int yy, int xx) { return double(image.at(yy, xx, ch)); }, image.height,
                                  image.width, y, x);
        out.at(r, c, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

DepthImage resize_bilinear(const DepthImage& depth, int height, int width) {
  if (height == depth.height && width == depth.width) return depth;
  DepthImage out(height, width);
  const double sy = static_cast<double>(depth.height) / height;
  const double sx = static_cast<double>(depth.width) / width;
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      out.at(r, c) = bilinear([&](int yy, int xx) { return depth.at(yy, xx); }, depth.height, depth.width,
                              (r + 0.5) * sy - 0.5, (c + 0.5) * sx - 0.5);
    }
  }
  return out;
}

RgbImage circular_crop(const RgbImage& image, double radius_fraction) {
  if (!(radius_fraction > 0.0 && radius_fraction <= 1.0)) {
    throw ParameterError("circular crop radius fraction must lie in (0, 1]");
  }
  RgbImage out = image;
  const double cy = (image.height - 1) / 2.0;
  const double cx = (image.width - 1) / 2.0;
  const double radius = radius_fraction * std::min(image.height, image.width) / 2.0;
  for (int r = 0; r < image.height; ++r) {
    for (int c = 0; c < image.width; ++c) {
      if (std::hypot(r - cy, c - cx) > radius) {
        for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = 0;
      }
    }
  }
  return out;
}

int count_components(const OrificeMask& mask) {
  std::vector<std::uint8_t> seen(mask.size(), 0);
  int components = 0;
  std::stack<std::pair<int, int>> todo;
  for (int r = 0; r < mask.height; ++r) {
    for (int c = 0; c < mask.width; ++c) {
      const auto idx = static_cast<std::size_t>(r) * mask.width + c;
      if (!mask.labels[idx] || seen[idx]) continue;
      ++components;
      seen[idx] = 1;
      todo.emplace(r, c);
      while (!todo.empty()) {
        const auto [y, x] = todo.top();
        todo.pop();
        constexpr int dy[] = {-1, 1, 0, 0};
        constexpr int dx[] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int ny = y + dy[k], nx = x + dx[k];
          if (ny < 0 || nx < 0 || ny >= mask.height || nx >= mask.width) continue;
          const auto n = static_cast<std::size_t>(ny) * mask.width + nx;
          if (mask.labels[n] && !seen[n]) {
            seen[n] = 1;
            todo.emplace(ny, nx);
          }
        }
      }
    }
  }
  return components;
}

}  // namespace bsynth
