#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "bronchosynth/config.hpp"
#include "bronchosynth/dataset.hpp"
#include "bronchosynth/depth_backend.hpp"
#include "bronchosynth/image.hpp"
#include "bronchosynth/orifice_seg.hpp"

namespace bsynth {

// Single channel SSIM over valid 11x11 Gaussian windows (sigma 1.5).
double ssim(std::span<const double> a, std::span<const double> b, int height, int width, double dynamic_range);
// Mean over the three channels, dynamic range 255.
double ssim(const RgbImage& a, const RgbImage& b);

struct FidOptions {
  // Adds 1e-6 * trace / d to each covariance diagonal when n < 2 d.
  bool shrinkage = true;
};

// Frechet distance between Gaussian fits of two sets of equal-length vectors.
double fid(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
           FidOptions options = {});

// 2 |A and B| / (|A| + |B| + eps); 1 when both masks are empty.
double dice_coefficient(const OrificeMask& a, const OrificeMask& b, double epsilon = 1e-6);

// Dice between S(x) and the segmentation of the re-inferred depth of a
// generated image.
double anatomical_dice(const OrificeMask& input_mask, const RgbImage& generated, const BackendConfig& backend,
                       const SegParams& seg, double epsilon);

class FeatureEmbedder {
 public:
  static constexpr int kSide = 16;

  FeatureEmbedder() = default;
  // The command is run as `<command> <image.png> <out.json>` and must write a
  // JSON array of numbers.
  explicit FeatureEmbedder(std::string command) : mode_(EmbedderMode::command), command_(std::move(command)) {}

  std::vector<double> embed(const RgbImage& image) const;
  EmbedderMode mode() const { return mode_; }
  std::string fingerprint() const;

 private:
  EmbedderMode mode_ = EmbedderMode::identity_downsample;
  std::string command_;
};

FeatureEmbedder make_embedder(const MetricsSettings& settings);

struct ImageRow {
  std::string id;
  double ssim = 0.0;
  double dice = 0.0;
  int input_orifices = 0;
  int output_orifices = 0;
};

struct MetricsReport {
  double fid = 0.0;
  double ssim_mean = 0.0;
  double dice_mean = 0.0;
  int n_images = 0;
  int embedding_dimension = 0;
  std::string embedder_fingerprint;
  std::string split;
  std::string checkpoint;
  std::vector<ImageRow> rows;
  std::vector<SkippedItem> excluded;
};

// G as seen by the evaluator: produces the generated image for one record.
using ImageGenerator = std::function<RgbImage(const ImagePair& record, const DepthImage& depth)>;

struct EvaluationSettings {
  BackendConfig backend;
  SegParams seg;
  double epsilon = 1e-6;
  FeatureEmbedder embedder;
  // Montage rows written for the first records (sorted by id); needs out_dir.
  int montage_count = 0;
  std::optional<std::filesystem::path> montage_dir;
};

MetricsReport evaluate(const DatasetManifest& manifest, Split split, const ImageGenerator& generator,
                       const EvaluationSettings& settings);

// Loads the generator from a checkpoint and evaluates it on the split with
// the checkpoint's backend and segmentation settings.
MetricsReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const DatasetManifest& manifest,
                                  Split split, const MetricsSettings& metrics,
                                  const std::optional<std::filesystem::path>& montage_dir);

nlohmann::json to_json(const MetricsReport& report);
std::string per_image_csv(const MetricsReport& report);
// report.json and per_image.csv.
void write_report(const MetricsReport& report, const std::filesystem::path& dir);

// depth | generated | target | input mask | output mask, side by side.
RgbImage montage_row(const DepthImage& depth, const RgbImage& generated, const RgbImage& target,
                     const OrificeMask& input_mask, const OrificeMask& output_mask);

}  // namespace bsynth
