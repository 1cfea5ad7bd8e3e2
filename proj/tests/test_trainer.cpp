#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "bronchosynth/checkpoint.hpp"
#include "bronchosynth/config.hpp"
#include "bronchosynth/errors.hpp"
#include "bronchosynth/trainer.hpp"
#include "support.hpp"

using namespace bsynth;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.generator.base_width = 8;
  c.generator.num_residual_blocks = 2;
  c.discriminator.base_width = 8;
  c.batch_size = 4;
  c.seed = 5;
  return c;
}

Batch sample_batch(int n, std::uint64_t seed) {
  testing::TempDir dir("batch");
  const DatasetManifest m = build_synthetic_dataset(n, SceneRanges{}, {1.0, 0.0, 0.0}, seed, dir / "data");
  const auto samples = load_samples(m, Split::train, SegParams{});
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return make_batch(samples, idx);
}

std::vector<float> gradients(const std::vector<ag::Var>& params) {
  std::vector<float> out;
  for (const auto& p : params) {
    if (p->grad.size() == p->value.size()) {
      out.insert(out.end(), p->grad.data.begin(), p->grad.data.end());
    } else {
      out.insert(out.end(), p->value.size(), 0.0f);
    }
  }
  return out;
}

void clear(const std::vector<ag::Var>& params) {
  for (const auto& p : params) p->grad = ag::Tensor();
}

std::vector<float> generator_gradient(const Batch& batch, const Generator& g, const DiscriminatorBank& bank,
                                      const ObjectiveSettings& s) {
  clear(g.parameters());
  clear(bank.parameters());
  const ag::Var fake = g.forward(ag::constant(batch.depth));
  generator_backward(batch, fake, bank, s);
  return gradients(g.parameters());
}

std::vector<float> weights(const TrainingState& s) {
  std::vector<float> out;
  for (const auto* params : {&s.generator.parameters(), &s.bank.parameters()}) {
    for (const auto& p : *params) out.insert(out.end(), p->value.data.begin(), p->value.data.end());
  }
  return out;
}

std::vector<json> read_log(const fs::path& path) {
  std::vector<json> out;
  std::ifstream in(path);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

}  // namespace

TEST_CASE("with both lambdas zero the generator follows the adversarial gradient") {
  const Batch batch = sample_batch(2, 3);
  const TrainConfig c = small_config();
  Generator g(c.generator, 1);
  DiscriminatorBank bank(c.discriminator, GanVariant::log, 2);
  ObjectiveSettings s = c.objective();
  s.weights.lambda_fm = 0.0;
  s.weights.lambda_dice = 0.0;
  const std::vector<float> grad = generator_gradient(batch, g, bank, s);
  double norm = 0.0;
  for (float v : grad) norm += static_cast<double>(v) * v;
  REQUIRE(norm > 0.0);

  auto shift = [&](double h) {
    std::size_t k = 0;
    for (const auto& p : g.parameters()) {
      for (float& v : p->value.data) v += static_cast<float>(h * grad[k++]);
    }
  };
  auto adversarial = [&] {
    const LossBreakdown b = total_objective(batch, g, bank, s);
    double sum = 0.0;
    for (double v : b.gan_g_k) sum += v;
    CHECK(b.total_g == doctest::Approx(sum).epsilon(1e-12));
    return sum;
  };
  // The loss curves sharply along this direction; larger steps underestimate.
  const double h = 1e-4 / std::sqrt(norm);
  shift(h);
  const double up = adversarial();
  shift(-2.0 * h);
  const double down = adversarial();
  shift(h);
  const double numeric = (up - down) / (2.0 * h);
  MESSAGE("directional derivative " << numeric << " vs " << norm);
  CHECK(numeric == doctest::Approx(norm).epsilon(5e-2));
}

TEST_CASE("score-only dice leaves the generator gradient untouched") {
  const Batch batch = sample_batch(2, 4);
  const TrainConfig c = small_config();
  Generator g(c.generator, 1);
  DiscriminatorBank bank(c.discriminator, GanVariant::log, 2);
  ObjectiveSettings zero = c.objective();
  zero.weights.lambda_dice = 0.0;
  ObjectiveSettings score = c.objective();
  score.dice_mode = DiceMode::score_only;
  ObjectiveSettings diff = c.objective();
  diff.weights.lambda_dice = 5.0;

  const auto g_zero = generator_gradient(batch, g, bank, zero);
  const auto g_score = generator_gradient(batch, g, bank, score);
  const auto g_diff = generator_gradient(batch, g, bank, diff);
  CHECK(g_score == g_zero);
  CHECK(g_diff != g_zero);
}

TEST_CASE("generator pass leaves discriminator parameters without gradient") {
  const Batch batch = sample_batch(2, 5);
  const TrainConfig c = small_config();
  Generator g(c.generator, 1);
  DiscriminatorBank bank(c.discriminator, GanVariant::log, 2);
  generator_gradient(batch, g, bank, c.objective());
  for (float v : gradients(bank.parameters())) REQUIRE(v == 0.0f);
  for (const auto& p : bank.parameters()) CHECK(p->requires_grad);
}

TEST_CASE("train_step is deterministic and its breakdown satisfies the identity") {
  const Batch batch = sample_batch(4, 6);
  const TrainConfig c = small_config();
  TrainingState a(c), b(c);
  for (int i = 0; i < 2; ++i) {
    const LossBreakdown la = train_step(batch, a.generator, a.bank, a.optim_g, a.optim_d, c.objective());
    const LossBreakdown lb = train_step(batch, b.generator, b.bank, b.optim_g, b.optim_d, c.objective());
    CHECK(identity_residual(la, c.weights) < 1e-6);
    CHECK(la.total_g == lb.total_g);
    CHECK(la.total_d == lb.total_d);
    CHECK(la.dice == lb.dice);
  }
  CHECK(weights(a) == weights(b));
  CHECK(weights(a) != weights(TrainingState(c)));
}

TEST_CASE("epoch order is a deterministic permutation") {
  const auto a = epoch_order(37, 9, 2);
  CHECK(a == epoch_order(37, 9, 2));
  CHECK(a != epoch_order(37, 9, 3));
  CHECK(a != epoch_order(37, 10, 2));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
  CHECK(epoch_order(0, 1, 0).empty());
}

TEST_CASE("smoke: one epoch writes a checkpoint and one log record per step") {
  testing::TempDir dir("smoke");
  const DatasetManifest m = build_synthetic_dataset(20, SceneRanges{}, {0.8, 0.1, 0.1}, 2, dir / "data");
  TrainConfig c = small_config();
  c.epochs = 1;
  const TrainResult r = train(m, c, {dir / "run", std::nullopt, json(), 0});
  CHECK(fs::exists(r.final_checkpoint));
  CHECK(fs::exists(dir / "run" / "checkpoints" / "latest.ckpt"));
  CHECK(fs::exists(dir / "run" / "config.resolved.json"));
  CHECK(r.steps == 4);
  REQUIRE(r.val_dice.has_value());
  const auto log = read_log(r.log);
  REQUIRE(log.size() == 4);
  for (std::size_t i = 0; i < log.size(); ++i) {
    const json& j = log[i];
    CHECK(j.at("step").get<int>() == static_cast<int>(i) + 1);
    for (const char* key : {"gan_g", "gan_d", "fm", "dice", "total_g", "total_d", "wall_clock"}) {
      CHECK(std::isfinite(j.at(key).get<double>()));
    }
    LossBreakdown b;
    b.gan_g_k = j.at("gan_g_k").get<std::array<double, kNumDiscriminators>>();
    b.gan_d_k = j.at("gan_d_k").get<std::array<double, kNumDiscriminators>>();
    b.fm_k = j.at("fm_k").get<std::array<double, kNumDiscriminators>>();
    b.dice = j.at("dice").get<double>();
    b.gan_g = j.at("gan_g").get<double>();
    b.gan_d = j.at("gan_d").get<double>();
    b.fm = j.at("fm").get<double>();
    b.total_g = j.at("total_g").get<double>();
    b.total_d = j.at("total_d").get<double>();
    CHECK(identity_residual(b, c.weights) < 1e-6);
  }
  CHECK(log.back().at("val_dice").get<double>() == *r.val_dice);
  CHECK(log.front().at("val_dice").is_null());
}

TEST_CASE("resumed training matches an uninterrupted run bit for bit") {
  testing::TempDir dir("resume");
  const DatasetManifest m = build_synthetic_dataset(12, SceneRanges{}, {0.75, 0.25, 0.0}, 3, dir / "data");
  TrainConfig c = small_config();
  c.epochs = 2;
  const TrainResult full = train(m, c, {dir / "full", std::nullopt, json(), 0});
  const TrainResult half = train(m, c, {dir / "split", std::nullopt, json(), 1});
  CHECK(half.epochs_completed == 1);
  const TrainResult rest = train(m, c, {dir / "split", half.final_checkpoint, json(), 0});
  CHECK(rest.epochs_completed == 2);
  CHECK(rest.steps == full.steps);

  const auto a = load_checkpoint(full.final_checkpoint);
  const auto b = load_checkpoint(rest.final_checkpoint);
  CHECK(weights(*a) == weights(*b));
  CHECK(a->optim_g.first_moments() == b->optim_g.first_moments());
  CHECK(a->optim_d.second_moments() == b->optim_d.second_moments());
  CHECK(read_log(full.log).size() == read_log(rest.log).size());

  TrainConfig other = c;
  other.weights.lambda_dice = 0.5;
  CHECK_THROWS_AS(train(m, other, {dir / "split", half.final_checkpoint, json(), 0}), ConfigError);
}

TEST_CASE("checkpoint round trip and corruption") {
  testing::TempDir dir("ckpt");
  TrainConfig c = small_config();
  TrainingState s(c);
  const Batch batch = sample_batch(2, 7);
  train_step(batch, s.generator, s.bank, s.optim_g, s.optim_d, c.objective());
  s.epoch = 3;
  s.step = 11;
  save_checkpoint(s, dir / "a.ckpt");
  const auto back = load_checkpoint(dir / "a.ckpt");
  CHECK(back->epoch == 3);
  CHECK(back->step == 11);
  CHECK(back->optim_g.steps() == 1);
  CHECK(weights(*back) == weights(s));
  CHECK(to_json(back->config) == to_json(c));
  CHECK(back->generator.infer(batch.depth).data == s.generator.infer(batch.depth).data);

  std::string bytes = read_text(dir / "a.ckpt");
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  write_text_atomic(dir / "b.ckpt", flipped);
  CHECK_THROWS_AS(load_checkpoint(dir / "b.ckpt"), InputError);
  write_text_atomic(dir / "c.ckpt", bytes.substr(0, bytes.size() - 100));
  CHECK_THROWS_AS(load_checkpoint(dir / "c.ckpt"), InputError);
  write_text_atomic(dir / "d.ckpt", "not a checkpoint");
  CHECK_THROWS_AS(load_checkpoint(dir / "d.ckpt"), InputError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), InputError);
}

TEST_CASE("config layering, validation and unknown keys") {
  testing::TempDir dir("cfg");
  const GlobalConfig d = load_config(std::nullopt, {});
  CHECK(d.train.epochs == 10);
  CHECK(d.train.batch_size == 4);
  CHECK(d.train.optim_g.learning_rate == 2e-4);
  CHECK(d.train.optim_g.beta1 == 0.5);
  CHECK(d.train.weights.lambda_fm == 10.0);
  CHECK(d.train.dice_mode == DiceMode::differentiable);

  write_text_atomic(dir / "c.json", R"({"loss": {"lambda_dice": 0.25}, "train": {"epochs": 3}})");
  const GlobalConfig f = load_config(dir / "c.json", {{"train.epochs", "7"}, {"loss.gan_variant", "least-squares"}});
  CHECK(f.train.weights.lambda_dice == 0.25);
  CHECK(f.train.epochs == 7);
  CHECK(f.train.weights.gan_variant == GanVariant::least_squares);

  CHECK_THROWS_AS(load_config(std::nullopt, {{"loss.lamda_dice", "1"}}), ConfigError);
  write_text_atomic(dir / "bad.json", R"({"trian": {}})");
  CHECK_THROWS_AS(load_config(dir / "bad.json", {}), ConfigError);
  CHECK_THROWS_AS(load_config(std::nullopt, {{"train.batch_size", "0"}}), ConfigError);
  CHECK_THROWS_AS(load_config(std::nullopt, {{"loss.dice_mode", "differentiable"}, {"backend.kind", "external"},
                                             {"backend.command", "x"}}),
                  ConfigError);
  const GlobalConfig ext = load_config(std::nullopt, {{"backend.kind", "external"}, {"backend.command", "x"}});
  CHECK(ext.train.dice_mode == DiceMode::score_only);

  const json a = layer_config(std::nullopt, {{"seed", "4"}});
  CHECK(config_hash(a) == config_hash(layer_config(std::nullopt, {{"seed", "4"}})));
  CHECK(config_hash(a) != config_hash(layer_config(std::nullopt, {{"seed", "5"}})));
  CHECK(train_config_from_json(to_json(d.train)).seed == d.train.seed);
  CHECK(to_json(global_config_from_json(to_json(f))) == to_json(f));
}
