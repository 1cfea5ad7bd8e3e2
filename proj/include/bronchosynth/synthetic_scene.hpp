#pragma once

#include <cstdint>
#include <vector>

#include "bronchosynth/image.hpp"

namespace bsynth {

struct Lumen {
  int row = 0;
  int col = 0;
  double radius = 10.0;
  // Relative well depth before normalization; the deepest lumen maps to 1.
  double amplitude = 1.0;
};

struct SceneParams {
  int height = 64;
  int width = 64;
  std::vector<Lumen> lumens;
  // Half-width of the uniform per-pixel depth noise.
  double noise_amplitude = 0.0;
  // Peak-to-peak amplitude of the smooth background undulation.
  double background_amplitude = 0.04;
  // Discs may overlap by at most this many pixels (r1 + r2 - distance).
  double overlap_tolerance = 0.0;
};

struct SyntheticScene {
  DepthImage depth;
  OrificeMask truth_mask;
  SceneParams params;
  std::uint64_t seed = 0;
};

// Throws ParameterError for 0 or more than 3 lumens, centers or radii outside
// the image, and overlapping discs.
void validate(const SceneParams& params);

// Background undulation plus one cone-shaped far well per lumen plus uniform
// noise, min-max normalized. Pure function of (params, seed).
SyntheticScene generate_synthetic_scene(const SceneParams& params, std::uint64_t seed);

// Pseudo bronchoscopy rendering of a depth field: far regions are shaded
// dark, near tissue carries a seeded low-frequency color texture.
RgbImage render_from_depth(const DepthImage& depth, std::uint64_t style_seed);

inline RgbImage render_pseudo_target(const SyntheticScene& scene, std::uint64_t style_seed) {
  return render_from_depth(scene.depth, style_seed);
}

}  // namespace bsynth
