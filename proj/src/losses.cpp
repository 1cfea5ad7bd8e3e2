#include "bronchosynth/losses.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "bronchosynth/errors.hpp"

namespace bsynth {

std::string to_string(GanVariant variant) { return variant == GanVariant::log ? "log" : "least-squares"; }

GanVariant gan_variant_from_string(const std::string& name) {
  if (name == "log") return GanVariant::log;
  if (name == "least-squares" || name == "lsgan") return GanVariant::least_squares;
  throw ConfigError("unknown gan variant '" + name + "' (expected log or least-squares)");
}

void validate(const LossWeights& weights) {
  if (!(weights.epsilon > 0.0) || !std::isfinite(weights.epsilon)) throw ConfigError("epsilon must be positive");
  if (!(weights.lambda_fm >= 0.0) || !std::isfinite(weights.lambda_fm)) throw ConfigError("lambda_fm must be >= 0");
  if (!(weights.lambda_dice >= 0.0) || !std::isfinite(weights.lambda_dice)) throw ConfigError("lambda_dice must be >= 0");
}

namespace {

void require_finite(std::span<const double> values, const char* what) {
  if (!std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); })) {
    throw NumericalError(std::string("non-finite ") + what);
  }
}

}  // namespace

GanLoss gan_loss(std::span<const double> real, std::span<const double> fake, GanVariant variant) {
  require_finite(real, "real discriminator scores");
  require_finite(fake, "fake discriminator scores");
  if (real.empty() || fake.empty()) throw InputError("gan_loss needs non-empty score maps");

  GanLoss out;
  out.generator_grad_fake.resize(fake.size());
  out.discriminator_grad_real.resize(real.size());
  out.discriminator_grad_fake.resize(fake.size());
  const double nr = static_cast<double>(real.size());
  const double nf = static_cast<double>(fake.size());

  if (variant == GanVariant::log) {
    for (std::size_t i = 0; i < real.size(); ++i) {
      const double p = real[i];
      out.discriminator += std::log(std::max(p, kLogFloor)) / nr;
      out.discriminator_grad_real[i] = p > kLogFloor ? 1.0 / (p * nr) : 0.0;
    }
    for (std::size_t i = 0; i < fake.size(); ++i) {
      const double p = fake[i];
      const double q = 1.0 - p;
      out.discriminator += std::log(std::max(q, kLogFloor)) / nf;
      out.discriminator_grad_fake[i] = q > kLogFloor ? -1.0 / (q * nf) : 0.0;
      out.generator -= std::log(std::max(p, kLogFloor)) / nf;
      out.generator_grad_fake[i] = p > kLogFloor ? -1.0 / (p * nf) : 0.0;
    }
  } else {
    for (std::size_t i = 0; i < real.size(); ++i) {
      const double e = real[i] - 1.0;
      out.discriminator -= e * e / nr;
      out.discriminator_grad_real[i] = -2.0 * e / nr;
    }
    for (std::size_t i = 0; i < fake.size(); ++i) {
      const double p = fake[i];
      out.discriminator -= p * p / nf;
      out.discriminator_grad_fake[i] = -2.0 * p / nf;
      out.generator += (p - 1.0) * (p - 1.0) / nf;
      out.generator_grad_fake[i] = 2.0 * (p - 1.0) / nf;
    }
  }
  return out;
}

FeatureMatching feature_matching_loss(std::span<const FeatureLayer> real, std::span<const FeatureLayer> fake) {
  if (real.size() != fake.size()) {
    throw InputError("feature lists differ in length: " + std::to_string(real.size()) + " vs " + std::to_string(fake.size()));
  }
  FeatureMatching out;
  out.grad_fake.resize(fake.size());
  for (std::size_t m = 0; m < real.size(); ++m) {
    const FeatureLayer& r = real[m];
    const FeatureLayer& f = fake[m];
    if (r.values.size() != f.values.size() || r.batch != f.batch || r.batch <= 0 || r.values.size() % r.batch != 0) {
      throw InputError("feature layer " + std::to_string(m) + " shape mismatch");
    }
    const double elements = static_cast<double>(r.values.size() / r.batch);
    const double scale = 1.0 / (elements * r.batch);
    auto& grad = out.grad_fake[m];
    grad.resize(f.values.size());
    for (std::size_t i = 0; i < f.values.size(); ++i) {
      const double diff = f.values[i] - r.values[i];
      out.value += std::abs(diff) * scale;
      grad[i] = diff > 0.0 ? scale : (diff < 0.0 ? -scale : 0.0);
    }
  }
  return out;
}

DiceLoss dice_loss(std::span<const double> a, std::span<const double> b, double epsilon) {
  if (a.size() != b.size()) throw InputError("dice_loss: mask sizes differ");
  DiceLoss out;
  out.grad_a.assign(a.size(), 0.0);
  out.grad_b.assign(b.size(), 0.0);
  double inter = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    inter += a[j] * b[j];
    sum_a += a[j];
    sum_b += b[j];
  }
  if (sum_a == 0.0 && sum_b == 0.0) return out;
  const double denom = sum_a + sum_b + epsilon;
  out.value = 1.0 - 2.0 * inter / denom;
  const double d2 = denom * denom;
  for (std::size_t j = 0; j < a.size(); ++j) {
    out.grad_b[j] = (2.0 * inter - 2.0 * a[j] * denom) / d2;
    out.grad_a[j] = (2.0 * inter - 2.0 * b[j] * denom) / d2;
  }
  return out;
}

double dice_loss(const OrificeMask& a, const OrificeMask& b, double epsilon) {
  if (a.height != b.height || a.width != b.width) throw InputError("dice_loss: mask shapes differ");
  std::size_t inter = 0, sum_a = 0, sum_b = 0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    inter += a.labels[j] & b.labels[j];
    sum_a += a.labels[j];
    sum_b += b.labels[j];
  }
  if (sum_a == 0 && sum_b == 0) return 0.0;
  return 1.0 - 2.0 * static_cast<double>(inter) / (static_cast<double>(sum_a + sum_b) + epsilon);
}

void finalize(LossBreakdown& b, const LossWeights& weights) {
  b.gan_g = b.gan_d = b.fm = 0.0;
  for (int k = 0; k < kNumDiscriminators; ++k) {
    b.gan_g += b.gan_g_k[k];
    b.gan_d += b.gan_d_k[k];
    b.fm += b.fm_k[k];
  }
  b.total_g = b.gan_g + weights.lambda_fm * b.fm + weights.lambda_dice * b.dice;
  b.total_d = b.gan_d;
  const std::pair<const char*, double> terms[] = {{"gan_g", b.gan_g}, {"gan_d", b.gan_d},     {"fm", b.fm},
                                                  {"dice", b.dice},   {"total_g", b.total_g}, {"total_d", b.total_d}};
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite loss term: ") + name);
  }
}

double identity_residual(const LossBreakdown& b, const LossWeights& weights) {
  double gan_g = 0.0, gan_d = 0.0, fm = 0.0;
  for (int k = 0; k < kNumDiscriminators; ++k) {
    gan_g += b.gan_g_k[k];
    gan_d += b.gan_d_k[k];
    fm += b.fm_k[k];
  }
  const double total_g = gan_g + weights.lambda_fm * fm + weights.lambda_dice * b.dice;
  return std::max({std::abs(total_g - b.total_g), std::abs(gan_d - b.total_d), std::abs(gan_g - b.gan_g),
                   std::abs(fm - b.fm)});
}

}  // namespace bsynth
