#pragma once

#include <span>
#include <vector>

#include "bronchosynth/image.hpp"

namespace bsynth {

struct Peak {
  int row = 0;
  int col = 0;
  double depth_value = 0.0;

  bool operator==(const Peak&) const = default;
};

struct SegParams {
  // Euclidean radius of the neighborhood a peak must dominate.
  int extrema_neighborhood_radius = 7;
  // Minimum pixel distance between retained peaks.
  double nms_min_distance = 16.0;
  // Required height above the image minimum, as a fraction of the [0,1] range.
  double peak_min_prominence = 0.15;
  int kmeans_max_iters = 50;
  double soft_temperature = 0.05;
};

void validate(const SegParams& params);

// Pixels that are >= every value within the neighborhood radius and rise at
// least peak_min_prominence above the image minimum. Sorted by depth value
// descending, ties by (row, col).
std::vector<Peak> find_local_extrema(const DepthImage& depth, const SegParams& params);

// Greedy suppression in descending depth order: a peak survives if it lies at
// least d_min from every peak kept before it.
std::vector<Peak> non_max_suppress(std::vector<Peak> peaks, double d_min);

// 1-D k-means over depth values with centroid 0 seeded at the image minimum
// (background) and centroid k seeded at peak k-1.
struct Clustering {
  std::vector<double> centroids;
  std::vector<int> assignment;
  std::vector<std::size_t> sizes;
  int iterations = 0;
  bool converged = false;
};

Clustering kmeans_cluster(const DepthImage& depth, const std::vector<Peak>& peaks, int max_iters);

// Pixels assigned to any peak-seeded centroid. Throws ParameterError on an
// empty peak list.
OrificeMask kmeans_segment(const DepthImage& depth, const std::vector<Peak>& peaks, const SegParams& params);

struct Segmentation {
  std::vector<Peak> peaks;  // after suppression
  OrificeMask mask;
};

// S(x): extrema, suppression, clustering. No surviving peak gives an empty mask.
Segmentation segment(const DepthImage& depth, const SegParams& params);
OrificeMask segment_orifices(const DepthImage& depth, const SegParams& params);

// Differentiable relaxation of segment_orifices. After running the hard
// pipeline, each pixel gets sigmoid((dist_bg - dist_fg) / temperature), where
// dist_fg is the distance to the nearest peak-seeded centroid. Centroids are
// treated as means of their converged clusters, so gradients include their
// dependence on every member pixel.
class SoftSegmenter {
 public:
  explicit SoftSegmenter(SegParams params) : params_(params) {}

  SoftMask forward(const DepthImage& depth);
  std::vector<double> backward(std::span<const double> grad_mask) const;

  const Clustering& clustering() const { return clustering_; }

 private:
  SegParams params_;
  Clustering clustering_;
  std::vector<double> depth_;
  std::vector<double> soft_;
  std::vector<int> nearest_fg_;
  bool empty_ = true;
};

SoftMask soft_segment(const DepthImage& depth, const SegParams& params);

}  // namespace bsynth
