#include "bronchosynth/synthetic_scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "bronchosynth/errors.hpp"

namespace bsynth {
namespace {

constexpr double kEdgeWidth = 0.75;  // pixels, width of the orifice rim transition

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Uniform doubles from a 64-bit engine without relying on
// std::uniform_real_distribution (whose output is implementation-defined).
double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

void validate(const SceneParams& params) {
  if (params.height < kMinImageSide || params.width < kMinImageSide) {
    throw ParameterError("scene must be at least " + std::to_string(kMinImageSide) + " pixels per side");
  }
  if (params.lumens.empty() || params.lumens.size() > 3) {
    throw ParameterError("lumen count must be between 1 and 3, got " + std::to_string(params.lumens.size()));
  }
  if (params.noise_amplitude < 0.0 || params.background_amplitude < 0.0) {
    throw ParameterError("noise and background amplitudes must be non-negative");
  }
  for (const Lumen& l : params.lumens) {
    if (l.row < 0 || l.col < 0 || l.row >= params.height || l.col >= params.width) {
      throw ParameterError("lumen center outside the image");
    }
    if (!(l.radius >= 1.0) || l.radius > std::min(params.height, params.width) / 2.0) {
      throw ParameterError("lumen radius out of range");
    }
    if (!(l.amplitude > 0.0)) throw ParameterError("lumen amplitude must be positive");
  }
  for (std::size_t i = 0; i < params.lumens.size(); ++i) {
    for (std::size_t j = i + 1; j < params.lumens.size(); ++j) {
      const Lumen& a = params.lumens[i];
      const Lumen& b = params.lumens[j];
      const double dist = std::hypot(a.row - b.row, a.col - b.col);
      if (a.radius + b.radius - dist > params.overlap_tolerance) {
        throw ParameterError("lumen discs " + std::to_string(i) + " and " + std::to_string(j) + " overlap");
      }
    }
  }
}

SyntheticScene generate_synthetic_scene(const SceneParams& params, std::uint64_t seed) {
  validate(params);
  std::mt19937_64 rng(seed);

  const double fy = 0.5 + unit(rng), fx = 0.5 + unit(rng);
  const double py = 2.0 * std::numbers::pi * unit(rng), px = 2.0 * std::numbers::pi * unit(rng);

  SyntheticScene scene;
  scene.params = params;
  scene.seed = seed;
  scene.depth = DepthImage(params.height, params.width);
  scene.truth_mask = OrificeMask(params.height, params.width);

  for (int r = 0; r < params.height; ++r) {
    for (int c = 0; c < params.width; ++c) {
      const double v = r / static_cast<double>(params.height), u = c / static_cast<double>(params.width);
      double d = params.background_amplitude * 0.25 *
                 (2.0 + std::sin(2.0 * std::numbers::pi * fy * v + py) + std::sin(2.0 * std::numbers::pi * fx * u + px));
      for (const Lumen& l : params.lumens) {
        const double dist = std::hypot(r - l.row, c - l.col);
        const double rho = dist / l.radius;
        if (dist <= l.radius) scene.truth_mask.at(r, c) = 1;
        const double cone = rho < 1.0 ? 0.5 + 0.5 * (1.0 - rho) : 0.5;
        d += l.amplitude * cone * sigmoid((l.radius - dist) / kEdgeWidth);
      }
      scene.depth.at(r, c) = d;
    }
  }
  if (params.noise_amplitude > 0.0) {
    for (double& d : scene.depth.values) d += params.noise_amplitude * (2.0 * unit(rng) - 1.0);
  }
  normalize_min_max(scene.depth.values);
  return scene;
}

RgbImage render_from_depth(const DepthImage& depth, std::uint64_t style_seed) {
  std::mt19937_64 rng(style_seed ^ 0x9e3779b97f4a7c15ULL);
  const double base[3] = {175.0 + 30.0 * unit(rng), 95.0 + 25.0 * unit(rng), 85.0 + 25.0 * unit(rng)};

  struct Wave {
    double ky, kx, phase, amp[3];
  };
  Wave waves[3];
  for (Wave& w : waves) {
    const double angle = 2.0 * std::numbers::pi * unit(rng);
    const double freq = 2.0 * std::numbers::pi * (1.0 + 2.0 * unit(rng)) / std::max(depth.height, depth.width);
    w.ky = freq * std::sin(angle);
    w.kx = freq * std::cos(angle);
    w.phase = 2.0 * std::numbers::pi * unit(rng);
    for (double& a : w.amp) a = 1.0 + 1.5 * unit(rng);
  }

  RgbImage out(depth.height, depth.width);
  for (int r = 0; r < depth.height; ++r) {
    for (int c = 0; c < depth.width; ++c) {
      const double d = std::clamp(depth.at(r, c), 0.0, 1.0);
      const double shade = 1.0 - 0.85 * d;
      const double tissue = (1.0 - d) * (1.0 - d);
      for (int ch = 0; ch < 3; ++ch) {
        double texture = 0.0;
        for (const Wave& w : waves) texture += w.amp[ch] * std::sin(w.ky * r + w.kx * c + w.phase);
        const double v = base[ch] * shade + tissue * texture;
        out.at(r, c, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

}  // namespace bsynth
