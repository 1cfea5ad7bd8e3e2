#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "bronchosynth/checkpoint.hpp"
#include "bronchosynth/config.hpp"
#include "bronchosynth/dataset.hpp"
#include "bronchosynth/objective.hpp"

namespace bsynth {

// One D update on the detached fake, then one G update on total_g. The
// breakdown combines gan_d from the D step with the G-side terms evaluated
// for the G step.
LossBreakdown train_step(const Batch& batch, Generator& generator, DiscriminatorBank& bank, Adam& optim_g,
                         Adam& optim_d, const ObjectiveSettings& settings);

struct Sample {
  std::string id;
  DepthImage depth;
  RgbImage target;
  OrificeMask input_mask;
};

// Loads a split in manifest order; limit 0 keeps everything.
std::vector<Sample> load_samples(const DatasetManifest& manifest, Split split, const SegParams& seg, int limit = 0);
Batch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices);
// Permutation of [0, n) that depends only on (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

RgbImage generate(const Generator& generator, const DepthImage& depth);
// Mean anatomical Dice of the generator over the samples.
double validation_dice(const Generator& generator, const std::vector<Sample>& samples, const BackendConfig& backend,
                       const SegParams& seg, double epsilon);

struct TrainOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  // Stored next to the log; defaults to the TrainConfig tree.
  nlohmann::json resolved_config;
  // Stop after this many epochs in this invocation (0 = run to the end).
  int max_epochs_this_run = 0;
};

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path log;
  int epochs_completed = 0;
  std::int64_t steps = 0;
  std::optional<double> val_dice;
};

inline constexpr const char* kTrainLog = "train_log.jsonl";

// Writes <out>/checkpoints/epoch_NNNN.ckpt and latest.ckpt at the cadence and
// at the end, and one log record per step. Resuming truncates the log to
// the checkpoint's step and continues with the same batch order.
TrainResult train(const DatasetManifest& manifest, const TrainConfig& config, const TrainOptions& options);

}  // namespace bsynth
