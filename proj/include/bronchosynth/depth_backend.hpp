#pragma once

#include <span>
#include <string>
#include <vector>

#include "bronchosynth/image.hpp"

namespace bsynth {

enum class BackendKind { synthetic, external };

struct BackendConfig {
  BackendKind kind = BackendKind::synthetic;
  // synthetic: Gaussian blur applied to luminance before inversion;
  // 0 passes luminance straight through.
  double blur_sigma = 1.0;
  // external: shell command invoked as `<command> <input.png> <output.png>`.
  std::string command;
  // external: the command emits inverse depth (near = bright) and must be flipped.
  bool inverse_output = true;
  int max_concurrency = 2;
};

std::string to_string(BackendKind kind);
BackendKind backend_kind_from_string(const std::string& name);

// Stable hex digest of every field that affects estimator output.
std::string fingerprint(const BackendConfig& config);

// F_DA: RGB -> normalized depth of identical shape, larger = farther.
// Throws InputError for invalid images and BackendError when the external
// command fails or returns a wrongly shaped image.
DepthImage estimate_depth(const RgbImage& image, const BackendConfig& config);

// Planar (CHW) RGB with values in [0, 1].
struct ColorField {
  int height = 0;
  int width = 0;
  std::vector<double> planes;
};

ColorField to_color_field(const RgbImage& image);

// The synthetic estimator as a differentiable map: luminance, separable
// Gaussian blur with replicated borders, inversion, min-max normalization.
// forward() caches what backward() needs.
class LuminanceDepth {
 public:
  explicit LuminanceDepth(double blur_sigma);

  DepthImage forward(const ColorField& rgb);
  // Vector-Jacobian product: gradient w.r.t. the ColorField planes.
  std::vector<double> backward(std::span<const double> grad_depth) const;

 private:
  std::vector<double> kernel_;
  int height_ = 0;
  int width_ = 0;
  std::vector<double> normalized_;
  std::size_t argmin_ = 0;
  std::size_t argmax_ = 0;
  double range_ = 0.0;
};

// Separable blur helpers (exposed for tests).
std::vector<double> gaussian_kernel(double sigma);
std::vector<double> blur_separable(std::span<const double> values, int height, int width,
                                   const std::vector<double>& kernel);
std::vector<double> blur_separable_transpose(std::span<const double> grad, int height, int width,
                                             const std::vector<double>& kernel);

}  // namespace bsynth
