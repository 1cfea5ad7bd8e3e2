#include "bronchosynth/depth_backend.hpp"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "bronchosynth/errors.hpp"
#include "bronchosynth/hash.hpp"
#include "bronchosynth/png_io.hpp"
#include "bronchosynth/subprocess.hpp"

namespace fs = std::filesystem;

namespace bsynth {

namespace {
constexpr double kLumaWeights[3] = {0.299, 0.587, 0.114};
}

std::string to_string(BackendKind kind) { return kind == BackendKind::synthetic ? "synthetic" : "external"; }

BackendKind backend_kind_from_string(const std::string& name) {
  if (name == "synthetic") return BackendKind::synthetic;
  if (name == "external") return BackendKind::external;
  throw ConfigError("unknown depth backend '" + name + "' (expected synthetic or external)");
}

std::string fingerprint(const BackendConfig& config) {
  std::ostringstream key;
  key << to_string(config.kind) << '|';
  if (config.kind == BackendKind::synthetic) {
    key << "blur=" << config.blur_sigma;
  } else {
    key << "cmd=" << config.command << "|inverse=" << config.inverse_output;
  }
  return hex_digest(key.str());
}

ColorField to_color_field(const RgbImage& image) {
  ColorField field{image.height, image.width, std::vector<double>(image.size() * 3)};
  const std::size_t n = image.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (int ch = 0; ch < 3; ++ch) field.planes[ch * n + i] = image.pixels[3 * i + ch] / 255.0;
  }
  return field;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) return {1.0};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= sum;
  return k;
}

std::vector<double> blur_separable(std::span<const double> values, int height, int width,
                                   const std::vector<double>& kernel) {
  const int radius = static_cast<int>(kernel.size() / 2);
  std::vector<double> tmp(values.size(), 0.0), out(values.size(), 0.0);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * values[r * width + std::clamp(c + k, 0, width - 1)];
      tmp[r * width + c] = acc;
    }
  }
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * tmp[std::clamp(r + k, 0, height - 1) * width + c];
      out[r * width + c] = acc;
    }
  }
  return out;
}

std::vector<double> blur_separable_transpose(std::span<const double> grad, int height, int width,
                                             const std::vector<double>& kernel) {
  const int radius = static_cast<int>(kernel.size() / 2);
  std::vector<double> tmp(grad.size(), 0.0), out(grad.size(), 0.0);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      const double g = grad[r * width + c];
      for (int k = -radius; k <= radius; ++k) tmp[std::clamp(r + k, 0, height - 1) * width + c] += kernel[k + radius] * g;
    }
  }
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      const double g = tmp[r * width + c];
      for (int k = -radius; k <= radius; ++k) out[r * width + std::clamp(c + k, 0, width - 1)] += kernel[k + radius] * g;
    }
  }
  return out;
}

LuminanceDepth::LuminanceDepth(double blur_sigma) : kernel_(gaussian_kernel(blur_sigma)) {}

DepthImage LuminanceDepth::forward(const ColorField& rgb) {
  height_ = rgb.height;
  width_ = rgb.width;
  const std::size_t n = static_cast<std::size_t>(height_) * width_;
  if (rgb.planes.size() != 3 * n) throw InputError("color field buffer does not match its shape");

  std::vector<double> luma(n);
  for (std::size_t i = 0; i < n; ++i) {
    luma[i] = kLumaWeights[0] * rgb.planes[i] + kLumaWeights[1] * rgb.planes[n + i] + kLumaWeights[2] * rgb.planes[2 * n + i];
  }
  std::vector<double> inv = kernel_.size() > 1 ? blur_separable(luma, height_, width_, kernel_) : std::move(luma);
  for (double& v : inv) v = 1.0 - v;

  argmin_ = static_cast<std::size_t>(std::min_element(inv.begin(), inv.end()) - inv.begin());
  argmax_ = static_cast<std::size_t>(std::max_element(inv.begin(), inv.end()) - inv.begin());
  range_ = inv[argmax_] - inv[argmin_];

  DepthImage depth(height_, width_);
  if (range_ > 0.0) {
    for (std::size_t i = 0; i < n; ++i) depth.values[i] = (inv[i] - inv[argmin_]) / range_;
  }
  normalized_ = depth.values;
  return depth;
}

std::vector<double> LuminanceDepth::backward(std::span<const double> grad_depth) const {
  const std::size_t n = normalized_.size();
  std::vector<double> grad_inv(n, 0.0);
  if (range_ > 0.0) {
    double to_min = 0.0, to_max = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      grad_inv[i] = grad_depth[i] / range_;
      to_min += grad_depth[i] * (normalized_[i] - 1.0) / range_;
      to_max -= grad_depth[i] * normalized_[i] / range_;
    }
    grad_inv[argmin_] += to_min;
    grad_inv[argmax_] += to_max;
  }
  // inv = 1 - blur(luma)
  for (double& g : grad_inv) g = -g;
  std::vector<double> grad_luma =
      kernel_.size() > 1 ? blur_separable_transpose(grad_inv, height_, width_, kernel_) : std::move(grad_inv);

  std::vector<double> grad_rgb(3 * n);
  for (int ch = 0; ch < 3; ++ch) {
    for (std::size_t i = 0; i < n; ++i) grad_rgb[ch * n + i] = kLumaWeights[ch] * grad_luma[i];
  }
  return grad_rgb;
}

namespace {

DepthImage run_external(const RgbImage& image, const BackendConfig& config) {
  if (config.command.empty()) throw ConfigError("external depth backend selected but no command configured");
  static std::atomic<unsigned long> counter{0};
  const fs::path dir = fs::temp_directory_path() /
                       ("bsynth-depth-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::create_directories(dir);
  struct Cleanup {
    fs::path dir;
    ~Cleanup() {
      std::error_code ec;
      fs::remove_all(dir, ec);
    }
  } cleanup{dir};

  const fs::path input = dir / "input.png";
  const fs::path output = dir / "depth.png";
  png::write_rgb(input, image);
  const CommandResult result = run_command(config.command, {input.string(), output.string()});
  if (result.exit_code != 0) {
    throw BackendError("depth command exited with status " + std::to_string(result.exit_code), result.output);
  }
  png::Gray16 raw;
  try {
    raw = png::read_gray16(output);
  } catch (const InputError& e) {
    throw BackendError(std::string("depth command produced no readable output: ") + e.what(), result.output);
  }
  if (raw.height != image.height || raw.width != image.width) {
    throw BackendError("depth command returned " + std::to_string(raw.height) + "x" + std::to_string(raw.width) +
                           " for a " + std::to_string(image.height) + "x" + std::to_string(image.width) + " input",
                       result.output);
  }
  DepthImage depth(raw.height, raw.width);
  for (std::size_t i = 0; i < depth.size(); ++i) {
    const double v = raw.values[i] / 65535.0;
    depth.values[i] = config.inverse_output ? 1.0 - v : v;
  }
  normalize_min_max(depth.values);
  return depth;
}

}  // namespace

DepthImage estimate_depth(const RgbImage& image, const BackendConfig& config) {
  validate(image);
  if (config.kind == BackendKind::external) return run_external(image, config);
  LuminanceDepth estimator(config.blur_sigma);
  return estimator.forward(to_color_field(image));
}

}  // namespace bsynth
