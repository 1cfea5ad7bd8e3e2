#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "bronchosynth/image.hpp"

namespace bsynth {

enum class GanVariant { log, least_squares };

std::string to_string(GanVariant variant);
GanVariant gan_variant_from_string(const std::string& name);

// Floor applied inside every logarithm of the log variant.
inline constexpr double kLogFloor = 1e-7;

struct LossWeights {
  double lambda_fm = 10.0;
  double lambda_dice = 1.0;
  double epsilon = 1e-6;
  GanVariant gan_variant = GanVariant::log;
};

void validate(const LossWeights& weights);

struct GanLoss {
  // Minimized by G. Non-saturating -E[log D(x,G(x))] for the log variant,
  // E[(D(x,G(x)) - 1)^2] for least squares.
  double generator = 0.0;
  // Maximized by D. E[log D(x,y)] + E[log(1 - D(x,G(x)))] for the log
  // variant, -(E[(D(x,y) - 1)^2] + E[D(x,G(x))^2]) for least squares.
  double discriminator = 0.0;
  std::vector<double> generator_grad_fake;
  std::vector<double> discriminator_grad_real;
  std::vector<double> discriminator_grad_fake;
};

// Scores are probabilities for the log variant and raw outputs for least
// squares. Means run over batch and score-map positions.
GanLoss gan_loss(std::span<const double> real_scores, std::span<const double> fake_scores, GanVariant variant);

// One discriminator layer for a whole batch; element count per sample is
// values.size() / batch.
struct FeatureLayer {
  int batch = 1;
  std::vector<double> values;
};

struct FeatureMatching {
  double value = 0.0;
  std::vector<std::vector<double>> grad_fake;  // one entry per layer
};

// Sum over layers of (1 / N_m) * L1 distance, averaged over the batch. The
// real features are constants.
FeatureMatching feature_matching_loss(std::span<const FeatureLayer> real, std::span<const FeatureLayer> fake);

struct DiceLoss {
  double value = 0.0;
  std::vector<double> grad_a;
  std::vector<double> grad_b;
};

// 1 - 2 sum(A B) / (sum A + sum B + epsilon); 0 when both masks are empty.
DiceLoss dice_loss(std::span<const double> a, std::span<const double> b, double epsilon);
double dice_loss(const OrificeMask& a, const OrificeMask& b, double epsilon);

inline constexpr int kNumDiscriminators = 3;

struct LossBreakdown {
  double gan_g = 0.0;
  double gan_d = 0.0;
  double fm = 0.0;
  double dice = 0.0;
  double total_g = 0.0;
  double total_d = 0.0;
  std::array<double, kNumDiscriminators> gan_g_k{};
  std::array<double, kNumDiscriminators> gan_d_k{};
  std::array<double, kNumDiscriminators> fm_k{};
};

// Fills the sums and totals from the per-discriminator terms and dice.
void finalize(LossBreakdown& breakdown, const LossWeights& weights);

// Largest absolute deviation of the stored totals from their recomputation.
double identity_residual(const LossBreakdown& breakdown, const LossWeights& weights);

}  // namespace bsynth
