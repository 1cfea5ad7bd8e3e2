#include "bronchosynth/objective.hpp"

#include <algorithm>
#include <cmath>

#include "bronchosynth/errors.hpp"

namespace bsynth {

std::string to_string(DiceMode mode) { return mode == DiceMode::differentiable ? "differentiable" : "score-only"; }

DiceMode dice_mode_from_string(const std::string& name) {
  if (name == "differentiable") return DiceMode::differentiable;
  if (name == "score-only" || name == "score_only") return DiceMode::score_only;
  throw ConfigError("unknown dice mode '" + name + "' (expected differentiable or score-only)");
}

void validate(const ObjectiveSettings& settings) {
  validate(settings.weights);
  validate(settings.seg);
  if (settings.dice_mode == DiceMode::differentiable && settings.backend.kind != BackendKind::synthetic) {
    throw ConfigError("differentiable dice mode requires the synthetic depth backend; use score-only");
  }
}

std::vector<double> to_doubles(const ag::Tensor& t) { return {t.data.begin(), t.data.end()}; }

namespace {

ag::Tensor from_doubles(const std::vector<double>& values, const ag::Tensor& like, double scale = 1.0) {
  ag::Tensor t(like.n, like.c, like.h, like.w);
  for (std::size_t i = 0; i < values.size(); ++i) t.data[i] = static_cast<float>(scale * values[i]);
  return t;
}

std::vector<double> mask_values(const OrificeMask& mask) { return {mask.labels.begin(), mask.labels.end()}; }

ColorField color_field(const ag::Tensor& images, int b) {
  const std::size_t n = images.plane();
  ColorField field{images.h, images.w, std::vector<double>(3 * n)};
  const float* src = images.data.data() + static_cast<std::size_t>(b) * 3 * n;
  for (std::size_t i = 0; i < 3 * n; ++i) field.planes[i] = 0.5 * (static_cast<double>(src[i]) + 1.0);
  return field;
}

std::vector<FeatureLayer> feature_layers(const DiscriminatorOutput& out) {
  std::vector<FeatureLayer> layers;
  layers.reserve(out.features.size());
  for (const auto& f : out.features) layers.push_back({f->value.n, to_doubles(f->value)});
  return layers;
}

}  // namespace

RgbImage to_rgb_image(const ag::Tensor& images, int b) {
  RgbImage image(images.h, images.w);
  const std::size_t n = images.plane();
  const float* src = images.data.data() + static_cast<std::size_t>(b) * 3 * n;
  for (std::size_t i = 0; i < n; ++i) {
    for (int ch = 0; ch < 3; ++ch) {
      const double v = (static_cast<double>(src[ch * n + i]) + 1.0) * 127.5;
      image.pixels[3 * i + ch] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  return image;
}

void write_rgb_to_tensor(const RgbImage& image, ag::Tensor& images, int b) {
  const std::size_t n = images.plane();
  float* dst = images.data.data() + static_cast<std::size_t>(b) * 3 * n;
  for (std::size_t i = 0; i < n; ++i) {
    for (int ch = 0; ch < 3; ++ch) dst[ch * n + i] = static_cast<float>(image.pixels[3 * i + ch] / 127.5 - 1.0);
  }
}

DepthImage to_depth_image(const ag::Tensor& depth, int b) {
  DepthImage image(depth.h, depth.w);
  const float* src = depth.data.data() + static_cast<std::size_t>(b) * depth.plane();
  for (std::size_t i = 0; i < image.size(); ++i) image.values[i] = src[i];
  return image;
}

void write_depth_to_tensor(const DepthImage& depth, ag::Tensor& tensor, int b) {
  float* dst = tensor.data.data() + static_cast<std::size_t>(b) * tensor.plane();
  for (std::size_t i = 0; i < depth.size(); ++i) dst[i] = static_cast<float>(depth.values[i]);
}

AnatomicalTerm anatomical_term(const std::vector<OrificeMask>& input_masks, const ag::Tensor& generated,
                               const ObjectiveSettings& settings, bool need_grad) {
  if (static_cast<int>(input_masks.size()) != generated.n) throw InputError("one input mask per sample required");
  const bool differentiable = need_grad && settings.dice_mode == DiceMode::differentiable;
  if (differentiable && settings.backend.kind != BackendKind::synthetic) {
    throw ConfigError("differentiable dice mode requires the synthetic depth backend");
  }
  AnatomicalTerm term;
  if (differentiable) term.grad = ag::Tensor(generated.n, generated.c, generated.h, generated.w);
  const double inv_batch = 1.0 / generated.n;

  for (int b = 0; b < generated.n; ++b) {
    const OrificeMask& target = input_masks[b];
    if (target.height != generated.h || target.width != generated.w) throw InputError("input mask shape mismatch");
    if (settings.backend.kind == BackendKind::external) {
      const DepthImage depth = estimate_depth(to_rgb_image(generated, b), settings.backend);
      term.value += inv_batch * dice_loss(target, segment_orifices(depth, settings.seg), settings.weights.epsilon);
      continue;
    }
    LuminanceDepth estimator(settings.backend.blur_sigma);
    const DepthImage depth = estimator.forward(color_field(generated, b));
    if (settings.dice_mode == DiceMode::score_only) {
      term.value += inv_batch * dice_loss(target, segment_orifices(depth, settings.seg), settings.weights.epsilon);
      continue;
    }
    SoftSegmenter segmenter(settings.seg);
    const SoftMask soft = segmenter.forward(depth);
    const DiceLoss dice = dice_loss(mask_values(target), soft.values, settings.weights.epsilon);
    term.value += inv_batch * dice.value;
    if (!differentiable) continue;
    const std::vector<double> grad_depth = segmenter.backward(dice.grad_b);
    const std::vector<double> grad_rgb = estimator.backward(grad_depth);
    float* dst = term.grad.data.data() + static_cast<std::size_t>(b) * 3 * generated.plane();
    // generated = 2 * field - 1
    for (std::size_t i = 0; i < grad_rgb.size(); ++i) dst[i] = static_cast<float>(0.5 * inv_batch * grad_rgb[i]);
  }
  return term;
}

double anatomical_constraint_loss(const DepthImage& x, const std::function<RgbImage(const DepthImage&)>& generator,
                                  const BackendConfig& backend, const SegParams& seg, double epsilon) {
  const OrificeMask input_mask = segment_orifices(x, seg);
  const DepthImage reinferred = estimate_depth(generator(x), backend);
  return dice_loss(input_mask, segment_orifices(reinferred, seg), epsilon);
}

DiscriminatorTerms discriminator_terms(const std::array<DiscriminatorOutput, kNumDiscriminators>& real,
                                       const std::array<DiscriminatorOutput, kNumDiscriminators>& fake,
                                       GanVariant variant, bool need_seeds) {
  DiscriminatorTerms terms;
  for (int k = 0; k < kNumDiscriminators; ++k) {
    const GanLoss loss = gan_loss(to_doubles(real[k].score->value), to_doubles(fake[k].score->value), variant);
    terms.gan_d_k[k] = loss.discriminator;
    if (need_seeds) {
      terms.seeds.emplace_back(real[k].score, from_doubles(loss.discriminator_grad_real, real[k].score->value, -1.0));
      terms.seeds.emplace_back(fake[k].score, from_doubles(loss.discriminator_grad_fake, fake[k].score->value, -1.0));
    }
  }
  return terms;
}

GeneratorTerms generator_terms(const std::array<DiscriminatorOutput, kNumDiscriminators>& real,
                               const std::array<DiscriminatorOutput, kNumDiscriminators>& fake,
                               const LossWeights& weights, bool need_seeds) {
  GeneratorTerms terms;
  for (int k = 0; k < kNumDiscriminators; ++k) {
    const GanLoss loss =
        gan_loss(to_doubles(real[k].score->value), to_doubles(fake[k].score->value), weights.gan_variant);
    terms.gan_g_k[k] = loss.generator;
    const auto real_layers = feature_layers(real[k]);
    const auto fake_layers = feature_layers(fake[k]);
    const FeatureMatching fm = feature_matching_loss(real_layers, fake_layers);
    terms.fm_k[k] = fm.value;
    if (!need_seeds) continue;
    terms.seeds.emplace_back(fake[k].score, from_doubles(loss.generator_grad_fake, fake[k].score->value));
    if (weights.lambda_fm != 0.0) {
      for (std::size_t m = 0; m < fake[k].features.size(); ++m) {
        terms.seeds.emplace_back(fake[k].features[m],
                                 from_doubles(fm.grad_fake[m], fake[k].features[m]->value, weights.lambda_fm));
      }
    }
  }
  return terms;
}

LossBreakdown total_objective(const Batch& batch, const Generator& generator, const DiscriminatorBank& bank,
                              const ObjectiveSettings& settings) {
  validate(settings.weights);
  ag::NoGradGuard guard;
  const ag::Var depth = ag::constant(batch.depth);
  const ag::Var target = ag::constant(batch.target);
  const ag::Var fake = generator.forward(depth);
  const auto real_out = bank.forward(depth, target);
  const auto fake_out = bank.forward(depth, fake);

  LossBreakdown b;
  const DiscriminatorTerms d = discriminator_terms(real_out, fake_out, settings.weights.gan_variant, false);
  const GeneratorTerms g = generator_terms(real_out, fake_out, settings.weights, false);
  b.gan_d_k = d.gan_d_k;
  b.gan_g_k = g.gan_g_k;
  b.fm_k = g.fm_k;
  b.dice = anatomical_term(batch.input_masks, fake->value, settings, false).value;
  finalize(b, settings.weights);
  return b;
}

GeneratorPass generator_backward(const Batch& batch, const ag::Var& generated, const DiscriminatorBank& bank,
                                 const ObjectiveSettings& settings) {
  const ag::Var depth = ag::constant(batch.depth);
  std::array<DiscriminatorOutput, kNumDiscriminators> real_out;
  {
    ag::NoGradGuard guard;
    real_out = bank.forward(depth, ag::constant(batch.target));
  }
  // Frozen for the whole pass: conv nodes consult requires_grad during backward.
  struct Freeze {
    const std::vector<ag::Var>& params;
    explicit Freeze(const std::vector<ag::Var>& p) : params(p) { set_requires_grad(params, false); }
    ~Freeze() { set_requires_grad(params, true); }
  } freeze(bank.parameters());
  const auto fake_out = bank.forward(depth, generated);

  GeneratorTerms g = generator_terms(real_out, fake_out, settings.weights, true);
  const bool dice_grad = settings.weights.lambda_dice != 0.0 && settings.dice_mode == DiceMode::differentiable;
  AnatomicalTerm dice = anatomical_term(batch.input_masks, generated->value, settings, dice_grad);
  if (dice_grad) {
    for (float& v : dice.grad.data) v = static_cast<float>(settings.weights.lambda_dice * v);
    g.seeds.emplace_back(generated, std::move(dice.grad));
  }
  ag::backward(g.seeds);
  return {g.gan_g_k, g.fm_k, dice.value};
}

}  // namespace bsynth
