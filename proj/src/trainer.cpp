#include "bronchosynth/trainer.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "bronchosynth/errors.hpp"
#include "bronchosynth/hash.hpp"
#include "bronchosynth/metrics.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace bsynth {

LossBreakdown train_step(const Batch& batch, Generator& generator, DiscriminatorBank& bank, Adam& optim_g,
                         Adam& optim_d, const ObjectiveSettings& settings) {
  const ag::Var depth = ag::constant(batch.depth);
  const ag::Var fake = generator.forward(depth);

  optim_d.zero_grad();
  const auto real_out = bank.forward(depth, ag::constant(batch.target));
  const auto fake_out = bank.forward(depth, ag::constant(fake->value));
  const DiscriminatorTerms d = discriminator_terms(real_out, fake_out, settings.weights.gan_variant, true);
  ag::backward(d.seeds);
  optim_d.step();

  optim_g.zero_grad();
  const GeneratorPass g = generator_backward(batch, fake, bank, settings);
  optim_g.step();

  LossBreakdown b;
  b.gan_d_k = d.gan_d_k;
  b.gan_g_k = g.gan_g_k;
  b.fm_k = g.fm_k;
  b.dice = g.dice;
  finalize(b, settings.weights);
  return b;
}

std::vector<Sample> load_samples(const DatasetManifest& manifest, Split split, const SegParams& seg, int limit) {
  std::vector<Sample> samples;
  for (const ImagePair* record : manifest.split(split)) {
    if (limit > 0 && static_cast<int>(samples.size()) >= limit) break;
    LoadedPair pair = load_pair(manifest, *record);
    OrificeMask mask = segment_orifices(pair.depth, seg);
    samples.push_back({record->id, std::move(pair.depth), std::move(pair.target), std::move(mask)});
  }
  return samples;
}

Batch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices) {
  const int n = static_cast<int>(indices.size());
  const Sample& first = samples.at(indices.front());
  const int h = first.depth.height;
  const int w = first.depth.width;
  Batch batch{ag::Tensor(n, 1, h, w), ag::Tensor(n, 3, h, w), {}};
  for (int b = 0; b < n; ++b) {
    const Sample& s = samples.at(indices[b]);
    if (s.depth.height != h || s.depth.width != w) throw InputError("samples in a batch must share one resolution");
    write_depth_to_tensor(s.depth, batch.depth, b);
    write_rgb_to_tensor(s.target, batch.target, b);
    batch.input_masks.push_back(s.input_mask);
  }
  return batch;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(fnv1a("epoch#" + std::to_string(seed) + "#" + std::to_string(epoch)));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

RgbImage generate(const Generator& generator, const DepthImage& depth) {
  ag::Tensor input(1, 1, depth.height, depth.width);
  write_depth_to_tensor(depth, input, 0);
  return to_rgb_image(generator.infer(input), 0);
}

double validation_dice(const Generator& generator, const std::vector<Sample>& samples, const BackendConfig& backend,
                       const SegParams& seg, double epsilon) {
  if (samples.empty()) throw InputError("validation set is empty");
  double sum = 0.0;
  for (const Sample& s : samples) {
    sum += anatomical_dice(s.input_mask, generate(generator, s.depth), backend, seg, epsilon);
  }
  return sum / static_cast<double>(samples.size());
}

namespace {

json log_record(std::int64_t step, int epoch, const LossBreakdown& b, const std::optional<double>& val_dice,
                double wall_clock) {
  json j = {{"step", step},         {"epoch", epoch},        {"gan_g", b.gan_g},   {"gan_d", b.gan_d},
            {"fm", b.fm},           {"dice", b.dice},        {"total_g", b.total_g}, {"total_d", b.total_d},
            {"gan_g_k", b.gan_g_k}, {"gan_d_k", b.gan_d_k}, {"fm_k", b.fm_k},     {"wall_clock", wall_clock}};
  j["val_dice"] = val_dice ? json(*val_dice) : json(nullptr);
  return j;
}

// Keeps the records up to and including step; returns the last val_dice seen.
std::optional<double> truncate_log(const fs::path& log, std::int64_t step) {
  std::optional<double> val;
  if (!fs::exists(log)) return val;
  std::istringstream in(read_text(log));
  std::string kept;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || j.value("step", std::int64_t{-1}) > step) break;
    if (j.contains("val_dice") && j["val_dice"].is_number()) val = j["val_dice"].get<double>();
    kept += line + "\n";
  }
  write_text_atomic(log, kept);
  return val;
}

json without_epochs(json config) {
  config["train"].erase("epochs");
  return config;
}

}  // namespace

TrainResult train(const DatasetManifest& manifest, const TrainConfig& config, const TrainOptions& options) {
  validate(config);
  const fs::path ckpt_dir = options.out_dir / "checkpoints";
  const fs::path log_path = options.out_dir / kTrainLog;
  fs::create_directories(ckpt_dir);

  std::unique_ptr<TrainingState> state;
  std::optional<double> val_dice;
  if (options.resume) {
    state = load_checkpoint(*options.resume);
    if (without_epochs(to_json(state->config)) != without_epochs(to_json(config))) {
      throw ConfigError("resume config differs from the checkpoint's (only train.epochs may change)");
    }
    state->config.epochs = config.epochs;
    val_dice = truncate_log(log_path, state->step);
    spdlog::info("resuming from {} at epoch {} step {}", options.resume->string(), state->epoch, state->step);
  } else {
    state = std::make_unique<TrainingState>(config);
    write_text_atomic(log_path, "");
  }
  save_resolved_config(options.resolved_config.is_null() ? to_json(config) : options.resolved_config,
                       options.out_dir);

  const std::vector<Sample> train_set = load_samples(manifest, Split::train, config.seg);
  if (train_set.empty()) throw InputError("manifest has no training records");
  const std::vector<Sample> val_set = load_samples(manifest, Split::val, config.seg, config.val_limit);
  for (const Sample& s : train_set) state->generator.check_input(s.depth.height, s.depth.width);
  const ObjectiveSettings settings = config.objective();

  TrainResult result;
  result.log = log_path;
  fs::path last_checkpoint = options.resume.value_or(fs::path{});
  const auto started = std::chrono::steady_clock::now();
  std::ofstream log(log_path, std::ios::app);
  int epochs_this_run = 0;

  while (state->epoch < config.epochs) {
    if (options.max_epochs_this_run > 0 && epochs_this_run >= options.max_epochs_this_run) break;
    const int epoch = state->epoch;
    const std::vector<std::size_t> order = epoch_order(train_set.size(), config.seed, epoch);
    const bool last_epoch = epoch + 1 == config.epochs;
    const bool evaluate_now = !val_set.empty() && ((epoch + 1) % config.eval_every == 0 || last_epoch);

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const Batch batch = make_batch(train_set, std::span(order).subspan(start, end - start));
      LossBreakdown b;
      try {
        b = train_step(batch, state->generator, state->bank, state->optim_g, state->optim_d, settings);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " at step " + std::to_string(state->step + 1) +
                             "; last good checkpoint: " +
                             (last_checkpoint.empty() ? std::string("none") : last_checkpoint.string()));
      }
      ++state->step;
      const bool final_batch = end == order.size();
      if (final_batch && evaluate_now) {
        val_dice = validation_dice(state->generator, val_set, config.backend, config.seg, config.weights.epsilon);
      }
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      log << log_record(state->step, epoch, b, val_dice, wall).dump() << "\n";
      log.flush();
    }
    ++state->epoch;
    ++epochs_this_run;
    spdlog::info("epoch {}/{} done, step {}{}", state->epoch, config.epochs, state->step,
                 val_dice ? fmt::format(", val dice {:.4f}", *val_dice) : std::string());

    if (state->epoch % config.checkpoint_every == 0 || state->epoch == config.epochs) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04d.ckpt", state->epoch);
      last_checkpoint = ckpt_dir / name;
      save_checkpoint(*state, last_checkpoint);
      save_checkpoint(*state, ckpt_dir / "latest.ckpt");
    }
  }

  result.final_checkpoint = last_checkpoint;
  result.epochs_completed = state->epoch;
  result.steps = state->step;
  result.val_dice = val_dice;
  return result;
}

}  // namespace bsynth
