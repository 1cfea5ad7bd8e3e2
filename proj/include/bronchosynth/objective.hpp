#pragma once

#include <array>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "bronchosynth/autograd.hpp"
#include "bronchosynth/depth_backend.hpp"
#include "bronchosynth/losses.hpp"
#include "bronchosynth/networks.hpp"
#include "bronchosynth/orifice_seg.hpp"

namespace bsynth {

// How the Dice term reaches the generator: through the soft segmentation and
// the differentiable synthetic estimator, or as a detached score only.
enum class DiceMode { differentiable, score_only };

std::string to_string(DiceMode mode);
DiceMode dice_mode_from_string(const std::string& name);

struct ObjectiveSettings {
  LossWeights weights;
  SegParams seg;
  BackendConfig backend;
  DiceMode dice_mode = DiceMode::differentiable;
};

// Throws ConfigError for a differentiable Dice term on a non-differentiable backend.
void validate(const ObjectiveSettings& settings);

struct Batch {
  ag::Tensor depth;   // [N,1,H,W] in [0,1]
  ag::Tensor target;  // [N,3,H,W] in [-1,1]
  std::vector<OrificeMask> input_masks;  // S(x) per sample
};

// Generator output sample b as an 8-bit image.
RgbImage to_rgb_image(const ag::Tensor& images, int b);
// Inverse of to_rgb_image for loading targets.
void write_rgb_to_tensor(const RgbImage& image, ag::Tensor& images, int b);
DepthImage to_depth_image(const ag::Tensor& depth, int b);
void write_depth_to_tensor(const DepthImage& depth, ag::Tensor& tensor, int b);

struct AnatomicalTerm {
  double value = 0.0;
  ag::Tensor grad;  // d value / d generated; empty unless requested
};

// Mean over the batch of dice_loss(S(x), S(F_DA(G(x)))) for generated images
// in [-1,1]. With need_grad the differentiable route is used and grad is filled.
AnatomicalTerm anatomical_term(const std::vector<OrificeMask>& input_masks, const ag::Tensor& generated,
                               const ObjectiveSettings& settings, bool need_grad);

// Single-image score-only form: G is any image producer, depth re-inference
// goes through the configured backend on the 8-bit rendering.
double anatomical_constraint_loss(const DepthImage& x, const std::function<RgbImage(const DepthImage&)>& generator,
                                  const BackendConfig& backend, const SegParams& seg, double epsilon);

using Seeds = std::vector<std::pair<ag::Var, ag::Tensor>>;

std::vector<double> to_doubles(const ag::Tensor& t);

// Discriminator objective for one (real, fake) evaluation of the bank. Seeds
// hold gradients of -total_d, i.e. the direction a minimizer follows.
struct DiscriminatorTerms {
  std::array<double, kNumDiscriminators> gan_d_k{};
  Seeds seeds;
};

DiscriminatorTerms discriminator_terms(const std::array<DiscriminatorOutput, kNumDiscriminators>& real,
                                       const std::array<DiscriminatorOutput, kNumDiscriminators>& fake,
                                       GanVariant variant, bool need_seeds);

// Generator-side adversarial and feature-matching terms. Seeds are already
// scaled by their lambda.
struct GeneratorTerms {
  std::array<double, kNumDiscriminators> gan_g_k{};
  std::array<double, kNumDiscriminators> fm_k{};
  Seeds seeds;
};

GeneratorTerms generator_terms(const std::array<DiscriminatorOutput, kNumDiscriminators>& real,
                               const std::array<DiscriminatorOutput, kNumDiscriminators>& fake,
                               const LossWeights& weights, bool need_seeds);

// Full objective evaluated without updating anything.
LossBreakdown total_objective(const Batch& batch, const Generator& generator, const DiscriminatorBank& bank,
                              const ObjectiveSettings& settings);

// Accumulates d total_g / d theta_G into the generator parameters (which
// must start zeroed) and returns the generator-side terms. The
// discriminator's parameters receive no gradient.
struct GeneratorPass {
  std::array<double, kNumDiscriminators> gan_g_k{};
  std::array<double, kNumDiscriminators> fm_k{};
  double dice = 0.0;
};

GeneratorPass generator_backward(const Batch& batch, const ag::Var& generated, const DiscriminatorBank& bank,
                                 const ObjectiveSettings& settings);

}  // namespace bsynth
