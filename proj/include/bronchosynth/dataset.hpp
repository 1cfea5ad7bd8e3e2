#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "bronchosynth/depth_backend.hpp"
#include "bronchosynth/image.hpp"
#include "bronchosynth/synthetic_scene.hpp"

namespace bsynth {

enum class SourceTag { real, synthetic, virtual_bronchoscopy, phantom };
enum class Split { train, val, test };

std::string to_string(SourceTag tag);
SourceTag source_tag_from_string(const std::string& name);
std::string to_string(Split split);
Split split_from_string(const std::string& name);

// One aligned (input depth, target RGB) sample. Paths are relative to the
// manifest directory.
struct ImagePair {
  std::string id;
  std::string input_depth;
  std::string target_rgb;
  SourceTag source_tag = SourceTag::real;
  Split split = Split::train;
  std::optional<std::string> truth_mask;

  bool operator==(const ImagePair&) const = default;
};

struct Preprocessing {
  int resolution = 256;
  bool circular_crop = false;
  double crop_fraction = 1.0;
};

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

void validate(const SplitFractions& fractions);

struct SkippedItem {
  std::string file;
  std::string reason;
};

struct DatasetManifest {
  std::vector<ImagePair> records;
  Preprocessing preprocessing;
  SplitFractions fractions;
  std::uint64_t seed = 0;
  std::string backend_fingerprint;
  std::string created_at;
  std::string tool_version;
  std::vector<SkippedItem> skipped;
  nlohmann::json extra = nlohmann::json::object();  // builder-specific settings
  std::filesystem::path root;                       // directory holding the manifest (not serialized)

  std::filesystem::path resolve(const std::string& relative) const { return root / relative; }
  std::vector<const ImagePair*> split(Split which) const;
};

inline constexpr const char* kManifestHeader = "manifest.header.json";
inline constexpr const char* kManifestRecords = "records.jsonl";

nlohmann::json to_json(const ImagePair& pair);
ImagePair image_pair_from_json(const nlohmann::json& j);

std::string serialize_records(const std::vector<ImagePair>& records);
std::vector<ImagePair> parse_records(const std::string& text);
std::string serialize_header(const DatasetManifest& manifest);
void parse_header(const std::string& text, DatasetManifest& manifest);

// Writes records then header, each through a temporary file and rename.
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& dir);
// Throws InputError for missing or malformed manifests and duplicate ids.
DatasetManifest read_manifest(const std::filesystem::path& dir);

// Deterministic split from a hash of (id, seed); exact counts per fraction
// and independent of the order ids are given in.
std::vector<Split> assign_splits(const std::vector<std::string>& ids, const SplitFractions& fractions,
                                 std::uint64_t seed);

// Pairs every image in source_dir with its inferred depth. Failures on single
// images are skipped and recorded; zero successes throws InputError.
DatasetManifest build_paired_dataset(const std::filesystem::path& source_dir, const std::filesystem::path& out_dir,
                                     const BackendConfig& backend, const Preprocessing& preprocessing,
                                     const SplitFractions& fractions, std::uint64_t seed,
                                     SourceTag tag = SourceTag::real);

struct SceneRanges {
  int height = 64;
  int width = 64;
  int min_lumens = 1;
  int max_lumens = 3;
  double min_radius = 7.0;
  double max_radius = 11.0;
  double min_amplitude = 0.7;
  double max_amplitude = 1.0;
  double noise_amplitude = 0.003;
  double background_amplitude = 0.04;
  // Centers are at least this factor times the sum of radii apart.
  double separation_factor = 1.5;
};

void validate(const SceneRanges& ranges);
nlohmann::json to_json(const SceneRanges& ranges);
SceneRanges scene_ranges_from_json(const nlohmann::json& j);

SceneParams sample_scene_params(const SceneRanges& ranges, std::mt19937_64& rng);

// n rendered synthetic scenes: depth input, pseudo target, ground-truth mask.
DatasetManifest build_synthetic_dataset(int n, const SceneRanges& ranges, const SplitFractions& fractions,
                                        std::uint64_t seed, const std::filesystem::path& out_dir);

struct LoadedPair {
  DepthImage depth;
  RgbImage target;
};

// Throws InputError when files are unreadable or shapes disagree.
LoadedPair load_pair(const DatasetManifest& manifest, const ImagePair& record);

std::string utc_timestamp();
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace bsynth
