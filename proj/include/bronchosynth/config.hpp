#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bronchosynth/dataset.hpp"
#include "bronchosynth/depth_backend.hpp"
#include "bronchosynth/losses.hpp"
#include "bronchosynth/networks.hpp"
#include "bronchosynth/objective.hpp"
#include "bronchosynth/orifice_seg.hpp"

namespace bsynth {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 4;
  AdamConfig optim_g;
  AdamConfig optim_d;
  LossWeights weights;
  SegParams seg;
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  BackendConfig backend;
  DiceMode dice_mode = DiceMode::differentiable;
  std::uint64_t seed = 0;
  int checkpoint_every = 1;  // epochs
  int eval_every = 1;        // epochs
  int val_limit = 0;         // 0 = whole val split

  ObjectiveSettings objective() const { return {weights, seg, backend, dice_mode}; }
};

// Throws ConfigError.
void validate(const TrainConfig& config);

enum class EmbedderMode { identity_downsample, command };

struct MetricsSettings {
  EmbedderMode embedder = EmbedderMode::identity_downsample;
  std::string embed_command;
  int montage_count = 4;
};

struct GlobalConfig {
  TrainConfig train;
  Preprocessing preprocessing;
  SplitFractions split;
  SceneRanges scenes;
  MetricsSettings metrics;
};

nlohmann::json to_json(const BackendConfig& c);
nlohmann::json to_json(const SegParams& c);
nlohmann::json to_json(const GeneratorConfig& c);
nlohmann::json to_json(const DiscriminatorConfig& c);
nlohmann::json to_json(const LossWeights& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const GlobalConfig& c);

BackendConfig backend_config_from_json(const nlohmann::json& j);
SegParams seg_params_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
GlobalConfig global_config_from_json(const nlohmann::json& j);

nlohmann::json default_config_json();

// defaults <- file <- overrides. Overrides are dotted paths ("loss.lambda_dice")
// with JSON values; bare words are taken as strings. Unknown keys are errors.
nlohmann::json layer_config(const std::optional<std::filesystem::path>& file,
                            const std::vector<std::pair<std::string, std::string>>& overrides);
GlobalConfig load_config(const std::optional<std::filesystem::path>& file,
                         const std::vector<std::pair<std::string, std::string>>& overrides);

std::string config_hash(const nlohmann::json& resolved);

// Writes <dir>/config.resolved.json.
void save_resolved_config(const nlohmann::json& resolved, const std::filesystem::path& dir);

}  // namespace bsynth
