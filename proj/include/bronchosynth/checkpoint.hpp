#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>

#include "bronchosynth/config.hpp"
#include "bronchosynth/networks.hpp"

namespace bsynth {

// Everything needed to continue training or to run the generator.
struct TrainingState {
  TrainConfig config;
  Generator generator;
  DiscriminatorBank bank;
  Adam optim_g;
  Adam optim_d;
  int epoch = 0;  // completed epochs
  std::int64_t step = 0;

  explicit TrainingState(const TrainConfig& config);
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary archive: magic, version, JSON header (config, hash, counters,
// tensor sizes), raw float payload, FNV-1a checksum. Written atomically.
void save_checkpoint(const TrainingState& state, const std::filesystem::path& path);
// Throws InputError for unreadable, truncated, corrupted or foreign files.
std::unique_ptr<TrainingState> load_checkpoint(const std::filesystem::path& path);

}  // namespace bsynth
