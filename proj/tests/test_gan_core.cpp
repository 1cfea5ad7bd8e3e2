#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bronchosynth/autograd.hpp"
#include "bronchosynth/errors.hpp"
#include "bronchosynth/losses.hpp"
#include "bronchosynth/metrics.hpp"
#include "bronchosynth/networks.hpp"
#include "bronchosynth/objective.hpp"
#include "bronchosynth/synthetic_scene.hpp"
#include "support.hpp"

using namespace bsynth;

namespace {

std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (double& x : v) x = testing::uniform(rng, lo, hi);
  return v;
}

ag::Tensor random_tensor(std::mt19937_64& rng, int n, int c, int h, int w, double lo = -1.0, double hi = 1.0) {
  ag::Tensor t(n, c, h, w);
  for (float& v : t.data) v = static_cast<float>(testing::uniform(rng, lo, hi));
  return t;
}

Batch scene_batch(int n, int side, std::uint64_t seed) {
  Batch b{ag::Tensor(n, 1, side, side), ag::Tensor(n, 3, side, side), {}};
  for (int i = 0; i < n; ++i) {
    SceneParams p;
    p.height = p.width = side;
    p.lumens = {{side / 3, side / 3, side / 6.0, 1.0}, {2 * side / 3 + 1, 2 * side / 3, side / 7.0, 0.8}};
    p.noise_amplitude = 0.003;
    const SyntheticScene s = generate_synthetic_scene(p, seed + i);
    write_depth_to_tensor(s.depth, b.depth, i);
    write_rgb_to_tensor(render_pseudo_target(s, seed * 7 + i), b.target, i);
    b.input_masks.push_back(segment_orifices(s.depth, SegParams{}));
  }
  return b;
}

GeneratorConfig small_generator() {
  GeneratorConfig g;
  g.base_width = 8;
  g.num_residual_blocks = 2;
  return g;
}

DiscriminatorConfig small_discriminator() {
  DiscriminatorConfig d;
  d.base_width = 8;
  return d;
}

// Float-precision check of an op: d/dx of sum(w * op(x)).
double op_gradient_error(const std::function<ag::Var(const ag::Var&)>& op, ag::Tensor x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const ag::Var in = ag::parameter(x);
  const ag::Var out = op(in);
  const ag::Tensor w = random_tensor(rng, out->value.n, out->value.c, out->value.h, out->value.w);
  ag::backward({{out, w}});
  std::vector<double> analytic(in->grad.data.begin(), in->grad.data.end());
  std::vector<double> numeric(x.size());
  const float h = 1e-2f;
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto eval = [&](float delta) {
      ag::NoGradGuard guard;
      ag::Tensor xp = x;
      xp.data[i] += delta;
      const ag::Tensor y = op(ag::constant(xp))->value;
      double s = 0.0;
      for (std::size_t j = 0; j < y.size(); ++j) s += static_cast<double>(w.data[j]) * y.data[j];
      return s;
    };
    numeric[i] = (eval(h) - eval(-h)) / (2.0 * h);
  }
  return testing::relative_error(analytic, numeric);
}

}  // namespace

TEST_CASE("dice loss hand values") {
  std::vector<double> a(400, 0.0), b(400, 0.0);
  for (int i = 0; i < 100; ++i) a[i] = 1.0;
  CHECK(dice_loss(a, a, 1e-6).value == doctest::Approx(1.0 - 200.0 / (200.0 + 1e-6)).epsilon(1e-12));
  for (int i = 200; i < 300; ++i) b[i] = 1.0;
  CHECK(dice_loss(a, b, 1e-6).value == doctest::Approx(1.0).epsilon(1e-8));

  std::vector<double> full(16, 1.0), half(16, 0.0);
  for (int i = 0; i < 8; ++i) half[i] = 1.0;
  CHECK(dice_loss(full, half, 1e-6).value == doctest::Approx(1.0 - 16.0 / 24.0).epsilon(1e-6));
  CHECK(dice_loss(std::vector<double>(16, 0.0), std::vector<double>(16, 0.0), 1e-6).value == 0.0);
  CHECK_THROWS_AS(dice_loss(full, std::vector<double>(15, 1.0), 1e-6), InputError);
}

TEST_CASE("dice loss properties on random soft masks") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = random_vector(rng, 64, 0.0, 1.0);
    const auto b = random_vector(rng, 64, 0.0, 1.0);
    const double ab = dice_loss(a, b, 1e-6).value;
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
    CHECK(ab == doctest::Approx(dice_loss(b, a, 1e-6).value).epsilon(1e-15));
  }
  std::vector<double> a(64, 0.0);
  a[3] = a[9] = 1.0;
  CHECK(dice_loss(a, a, 1e-6).value <= 1e-6 / (2.0 * 2.0 + 1e-6) + 1e-15);
}

TEST_CASE("dice coefficient plus dice loss is one") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const OrificeMask a = testing::random_mask(rng, 16, 16, testing::uniform(rng, 0.0, 0.5));
    const OrificeMask b = testing::random_mask(rng, 16, 16, testing::uniform(rng, 0.0, 0.5));
    CHECK(dice_coefficient(a, b) + dice_loss(a, b, 1e-6) == doctest::Approx(1.0).epsilon(1e-12));
  }
  const OrificeMask empty(16, 16);
  CHECK(dice_coefficient(empty, empty) + dice_loss(empty, empty, 1e-6) == 1.0);
}

TEST_CASE("dice loss gradient matches finite differences") {
  std::mt19937_64 rng(9);
  const auto a = random_vector(rng, 64, 0.0, 1.0);
  const auto b = random_vector(rng, 64, 0.0, 1.0);
  const DiceLoss d = dice_loss(a, b, 1e-6);
  const auto na = testing::numeric_gradient([&](const auto& x) { return dice_loss(x, b, 1e-6).value; }, a, 1e-6);
  const auto nb = testing::numeric_gradient([&](const auto& x) { return dice_loss(a, x, 1e-6).value; }, b, 1e-6);
  CHECK(testing::relative_error(d.grad_a, na) < 1e-4);
  CHECK(testing::relative_error(d.grad_b, nb) < 1e-4);
}

TEST_CASE("gan loss closed forms") {
  const std::vector<double> half(10, 0.5);
  const GanLoss l = gan_loss(half, half, GanVariant::log);
  CHECK(l.discriminator == doctest::Approx(2.0 * std::log(0.5)).epsilon(1e-12));
  CHECK(l.discriminator == doctest::Approx(-1.3863).epsilon(1e-4));
  CHECK(l.generator == doctest::Approx(-std::log(0.5)).epsilon(1e-12));

  const GanLoss opt = gan_loss(std::vector<double>(10, 1.0), std::vector<double>(10, 0.0), GanVariant::log);
  CHECK(std::abs(opt.discriminator) < 1e-6);

  const GanLoss ls = gan_loss(std::vector<double>(10, 1.0), std::vector<double>(10, 0.0), GanVariant::least_squares);
  CHECK(ls.discriminator == 0.0);
  CHECK(ls.generator == doctest::Approx(1.0).epsilon(1e-15));

  CHECK_THROWS_AS(gan_loss(std::vector<double>{NAN}, half, GanVariant::log), NumericalError);
}

TEST_CASE("gan loss gradients match finite differences") {
  std::mt19937_64 rng(11);
  for (GanVariant v : {GanVariant::log, GanVariant::least_squares}) {
    const double lo = v == GanVariant::log ? 0.05 : -1.5, hi = v == GanVariant::log ? 0.95 : 1.5;
    const auto real = random_vector(rng, 50, lo, hi);
    const auto fake = random_vector(rng, 40, lo, hi);
    const GanLoss l = gan_loss(real, fake, v);
    const auto ng = testing::numeric_gradient([&](const auto& x) { return gan_loss(real, x, v).generator; }, fake, 1e-6);
    const auto ndr =
        testing::numeric_gradient([&](const auto& x) { return gan_loss(x, fake, v).discriminator; }, real, 1e-6);
    const auto ndf =
        testing::numeric_gradient([&](const auto& x) { return gan_loss(real, x, v).discriminator; }, fake, 1e-6);
    CHECK(testing::relative_error(l.generator_grad_fake, ng) < 1e-4);
    CHECK(testing::relative_error(l.discriminator_grad_real, ndr) < 1e-4);
    CHECK(testing::relative_error(l.discriminator_grad_fake, ndf) < 1e-4);
  }
}

TEST_CASE("feature matching hand values") {
  std::mt19937_64 rng(2);
  std::vector<FeatureLayer> real = {{2, random_vector(rng, 2 * 30, -1, 1)},
                                    {2, random_vector(rng, 2 * 12, -1, 1)},
                                    {2, random_vector(rng, 2 * 5, -1, 1)}};
  CHECK(feature_matching_loss(real, real).value == 0.0);

  auto shifted = real;
  for (auto& layer : shifted) {
    for (double& v : layer.values) v += 1.0;
  }
  CHECK(feature_matching_loss(real, shifted).value == doctest::Approx(3.0).epsilon(1e-12));

  // Only the scaled layer's summand moves.
  auto scaled = shifted;
  for (double& v : scaled[1].values) v = 2.0 * v;
  double expect = 0.0;
  for (std::size_t i = 0; i < real[1].values.size(); ++i) expect += std::abs(scaled[1].values[i] - real[1].values[i]);
  expect /= 2.0 * 12.0;
  CHECK(feature_matching_loss(real, scaled).value == doctest::Approx(2.0 + expect).epsilon(1e-12));

  CHECK_THROWS_AS(feature_matching_loss(real, std::span(shifted).first(2)), InputError);
  auto bad = shifted;
  bad[2].values.pop_back();
  CHECK_THROWS_AS(feature_matching_loss(real, bad), InputError);
  CHECK(feature_matching_loss(real, scaled).value >= 0.0);
}

TEST_CASE("feature matching gradient matches finite differences") {
  std::mt19937_64 rng(4);
  const std::vector<FeatureLayer> real = {{2, random_vector(rng, 2 * 16, -1, 1)}, {2, random_vector(rng, 2 * 8, -1, 1)}};
  std::vector<FeatureLayer> fake = {{2, random_vector(rng, 2 * 16, -1, 1)}, {2, random_vector(rng, 2 * 8, -1, 1)}};
  const FeatureMatching fm = feature_matching_loss(real, fake);
  for (std::size_t m = 0; m < fake.size(); ++m) {
    const auto numeric = testing::numeric_gradient(
        [&](const auto& x) {
          auto f = fake;
          f[m].values = x;
          return feature_matching_loss(real, f).value;
        },
        fake[m].values, 1e-7);
    CHECK(testing::relative_error(fm.grad_fake[m], numeric) < 1e-4);
  }
}

TEST_CASE("autograd ops agree with finite differences") {
  std::mt19937_64 rng(6);
  const ag::Tensor x = random_tensor(rng, 2, 3, 6, 6);
  const ag::Var w = ag::constant(random_tensor(rng, 4, 3, 3, 3, -0.5, 0.5));
  const ag::Var bias = ag::constant(random_tensor(rng, 1, 4, 1, 1));
  CHECK(op_gradient_error([&](const ag::Var& v) { return ag::conv2d(v, w, bias, 1, 1); }, x, 1) < 2e-3);
  CHECK(op_gradient_error([&](const ag::Var& v) { return ag::conv2d(v, w, bias, 2, 1); }, x, 2) < 2e-3);
  CHECK(op_gradient_error([](const ag::Var& v) { return ag::instance_norm(v); }, x, 3) < 2e-2);
  CHECK(op_gradient_error([](const ag::Var& v) { return ag::tanh(v); }, x, 4) < 2e-3);
  CHECK(op_gradient_error([](const ag::Var& v) { return ag::sigmoid(v); }, x, 5) < 2e-3);
  CHECK(op_gradient_error([](const ag::Var& v) { return ag::leaky_relu(v, 0.2f); }, x, 6) < 2e-2);
  CHECK(op_gradient_error([](const ag::Var& v) { return ag::avg_pool2(v); }, x, 7) < 2e-3);
  CHECK(op_gradient_error([](const ag::Var& v) { return ag::upsample2(v); }, x, 8) < 2e-3);
  CHECK(op_gradient_error([](const ag::Var& v) { return ag::affine(v, 2.0f, -1.0f); }, x, 9) < 2e-3);
  CHECK(op_gradient_error([](const ag::Var& v) { return ag::concat_channels(v, ag::tanh(v)); }, x, 10) < 2e-3);
  CHECK(op_gradient_error([](const ag::Var& v) { return ag::add(v, ag::relu(v)); }, x, 11) < 2e-2);
}

TEST_CASE("conv weight gradient matches finite differences") {
  std::mt19937_64 rng(13);
  const ag::Var x = ag::constant(random_tensor(rng, 2, 2, 5, 5));
  const ag::Tensor w0 = random_tensor(rng, 3, 2, 3, 3);
  const ag::Var b = ag::constant(ag::Tensor(1, 3, 1, 1));
  CHECK(op_gradient_error([&](const ag::Var& w) { return ag::conv2d(x, w, b, 2, 1); }, w0, 14) < 2e-3);
}

TEST_CASE("generator shape, range and determinism") {
  Generator g(small_generator(), 1);
  std::mt19937_64 rng(1);
  const ag::Tensor x = random_tensor(rng, 2, 1, 64, 64, 0.0, 1.0);
  const ag::Tensor y = g.infer(x);
  CHECK(y.n == 2);
  CHECK(y.c == 3);
  CHECK(y.h == 64);
  CHECK(y.w == 64);
  for (float v : y.data) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }
  CHECK(g.infer(x).data == y.data);
  CHECK(Generator(small_generator(), 1).infer(x).data == y.data);
  CHECK_THROWS_AS(g.check_input(60, 64), ConfigError);
  CHECK_THROWS_AS(g.forward(ag::constant(ag::Tensor(1, 1, 36, 36))), ConfigError);

  GeneratorConfig bad = small_generator();
  bad.base_width = 4;
  CHECK_THROWS_AS(Generator(bad, 1), ConfigError);
  bad = small_generator();
  bad.num_downsamples = 1;
  CHECK_THROWS_AS(Generator(bad, 1), ConfigError);
}

TEST_CASE("generator with the local enhancer keeps the shape") {
  GeneratorConfig c = small_generator();
  c.use_local_enhancer = true;
  c.local_residual_blocks = 1;
  Generator g(c, 2);
  const ag::Tensor y = g.infer(ag::Tensor(1, 1, 64, 64, 0.5f));
  CHECK(y.h == 64);
  CHECK(y.w == 64);
  CHECK(y.c == 3);
  CHECK_THROWS_AS(g.check_input(40, 40), ConfigError);
}

TEST_CASE("discriminator bank scales, feature counts and score sizes") {
  // Output side of a 4x4 convolution with padding 2.
  auto conv_side = [](int s, int stride) { return (s + 2 * 2 - 4) / stride + 1; };
  for (int layers : {2, 3}) {
    DiscriminatorConfig c = small_discriminator();
    c.num_layers = layers;
    DiscriminatorBank bank(c, GanVariant::log, 3);
    const auto out = bank.forward(ag::constant(ag::Tensor(2, 1, 64, 64, 0.3f)), ag::constant(ag::Tensor(2, 3, 64, 64)));
    const int sides[3] = {64, 32, 16};
    for (int k = 0; k < kNumDiscriminators; ++k) {
      CHECK(out[k].input_height == sides[k]);
      CHECK(out[k].input_width == sides[k]);
      CHECK(static_cast<int>(out[k].features.size()) == layers + 1);
      int s = sides[k];
      for (int i = 0; i < layers; ++i) s = conv_side(s, 2);
      s = conv_side(conv_side(s, 1), 1);
      CHECK(out[k].score->value.h == s);
      CHECK(out[k].score->value.w == s);
      CHECK(Discriminator::score_side(sides[k], layers) == s);
      for (float v : out[k].score->value.data) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
      }
    }
  }
  DiscriminatorBank bank(small_discriminator(), GanVariant::log, 3);
  CHECK_THROWS_AS(bank.forward(ag::constant(ag::Tensor(1, 1, 64, 64)), ag::constant(ag::Tensor(1, 3, 32, 32))),
                  InputError);
  CHECK_THROWS_AS(bank.forward(ag::constant(ag::Tensor(1, 1, 64, 64)), ag::constant(ag::Tensor(2, 3, 64, 64))),
                  InputError);
}

TEST_CASE("objective reductions and breakdown identity") {
  const Batch batch = scene_batch(2, 32, 4);
  Generator g(small_generator(), 5);
  DiscriminatorBank bank(small_discriminator(), GanVariant::log, 6);
  ObjectiveSettings s;
  const LossBreakdown full = total_objective(batch, g, bank, s);
  CHECK(identity_residual(full, s.weights) < 1e-6);

  double sum_g = 0.0, sum_fm = 0.0, sum_d = 0.0;
  for (int k = 0; k < kNumDiscriminators; ++k) {
    sum_g += full.gan_g_k[k];
    sum_fm += full.fm_k[k];
    sum_d += full.gan_d_k[k];
  }
  CHECK(full.total_g == doctest::Approx(sum_g + 10.0 * sum_fm + full.dice).epsilon(1e-12));
  CHECK(full.total_d == doctest::Approx(sum_d).epsilon(1e-12));

  ObjectiveSettings no_dice = s;
  no_dice.weights.lambda_dice = 0.0;
  const LossBreakdown nd = total_objective(batch, g, bank, no_dice);
  CHECK(full.total_g - nd.total_g == doctest::Approx(full.dice).epsilon(1e-9));
  CHECK(nd.dice == full.dice);

  ObjectiveSettings pure = no_dice;
  pure.weights.lambda_fm = 0.0;
  const LossBreakdown p = total_objective(batch, g, bank, pure);
  CHECK(std::abs(p.total_g - sum_g) < 1e-6);

  for (GanVariant v : {GanVariant::least_squares}) {
    ObjectiveSettings ls = s;
    ls.weights.gan_variant = v;
    DiscriminatorBank ls_bank(small_discriminator(), v, 6);
    CHECK(identity_residual(total_objective(batch, g, ls_bank, ls), ls.weights) < 1e-6);
  }
}

TEST_CASE("finalize names the offending non-finite term") {
  LossBreakdown b;
  b.fm_k[1] = NAN;
  try {
    finalize(b, LossWeights{});
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("fm") != std::string::npos);
  }
}

TEST_CASE("loss weights are validated") {
  LossWeights w;
  w.epsilon = 0.0;
  CHECK_THROWS_AS(validate(w), ConfigError);
  w = LossWeights{};
  w.lambda_fm = -1.0;
  CHECK_THROWS_AS(validate(w), ConfigError);
  w = LossWeights{};
  w.lambda_dice = INFINITY;
  CHECK_THROWS_AS(validate(w), ConfigError);
  CHECK(gan_variant_from_string("least-squares") == GanVariant::least_squares);
  CHECK_THROWS_AS(gan_variant_from_string("wasserstein"), ConfigError);
}

TEST_CASE("anatomical constraint loss on faithful and constant generators") {
  SceneParams p;
  p.lumens = {{20, 20, 9, 1.0}, {44, 42, 8, 0.8}};
  p.noise_amplitude = 0.003;
  const SyntheticScene s = generate_synthetic_scene(p, 3);
  const BackendConfig backend;
  auto faithful = [&](const DepthImage& d) { return render_from_depth(d, 5); };
  CHECK(anatomical_constraint_loss(s.depth, faithful, backend, SegParams{}, 1e-6) < 0.1);
  auto flat = [](const DepthImage& d) { return RgbImage(d.height, d.width, 120); };
  CHECK(anatomical_constraint_loss(s.depth, flat, backend, SegParams{}, 1e-6) == doctest::Approx(1.0));
  CHECK(anatomical_constraint_loss(DepthImage(64, 64, 0.0), flat, backend, SegParams{}, 1e-6) == 0.0);
}

TEST_CASE("anatomical term gradient chains through segmentation and depth") {
  const Batch batch = scene_batch(1, 32, 8);
  // A slightly perturbed copy of the target keeps the output segmentation non-trivial.
  std::mt19937_64 rng(3);
  ag::Tensor gen = batch.target;
  for (float& v : gen.data) v = std::clamp(v + static_cast<float>(testing::uniform(rng, -0.05, 0.05)), -1.0f, 1.0f);
  ObjectiveSettings s;
  const AnatomicalTerm t = anatomical_term(batch.input_masks, gen, s, true);
  REQUIRE(t.grad.size() == gen.size());
  double norm = 0.0;
  for (float v : t.grad.data) norm += static_cast<double>(v) * v;
  REQUIRE(norm > 0.0);

  // Directional derivative along the gradient.
  const double h = 1e-3 / std::sqrt(norm);
  ag::Tensor up = gen, down = gen;
  for (std::size_t i = 0; i < gen.size(); ++i) {
    up.data[i] += static_cast<float>(h * t.grad.data[i]);
    down.data[i] -= static_cast<float>(h * t.grad.data[i]);
  }
  const double numeric = (anatomical_term(batch.input_masks, up, s, false).value -
                          anatomical_term(batch.input_masks, down, s, false).value) / (2.0 * h);
  CHECK(numeric == doctest::Approx(norm).epsilon(2e-2));
}

TEST_CASE("differentiable dice needs the synthetic backend") {
  ObjectiveSettings s;
  s.backend.kind = BackendKind::external;
  s.backend.command = "true";
  CHECK_THROWS_AS(validate(s), ConfigError);
  s.dice_mode = DiceMode::score_only;
  CHECK_NOTHROW(validate(s));
}
