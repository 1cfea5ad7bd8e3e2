#include "bronchosynth/orifice_seg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "bronchosynth/errors.hpp"

namespace bsynth {
namespace {

// Smoothing of |d - c| so the soft mask stays differentiable when a pixel
// sits exactly on a centroid.
constexpr double kDistanceSmoothing = 1e-3;

bool deeper_first(const Peak& a, const Peak& b) {
  if (a.depth_value != b.depth_value) return a.depth_value > b.depth_value;
  if (a.row != b.row) return a.row < b.row;
  return a.col < b.col;
}

double smooth_distance(double d, double c) {
  return std::sqrt((d - c) * (d - c) + kDistanceSmoothing * kDistanceSmoothing);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

void validate(const SegParams& params) {
  if (params.extrema_neighborhood_radius < 1) throw ConfigError("extrema_neighborhood_radius must be >= 1");
  if (!(params.nms_min_distance >= 1.0)) throw ConfigError("nms_min_distance must be >= 1");
  if (!(params.peak_min_prominence > 0.0)) throw ConfigError("peak_min_prominence must be positive");
  if (params.kmeans_max_iters < 1) throw ConfigError("kmeans_max_iters must be >= 1");
  if (!(params.soft_temperature > 0.0)) throw ConfigError("soft_temperature must be positive");
}

std::vector<Peak> find_local_extrema(const DepthImage& depth, const SegParams& params) {
  std::vector<Peak> peaks;
  if (depth.size() == 0) return peaks;
  const double floor = *std::min_element(depth.values.begin(), depth.values.end()) + params.peak_min_prominence;

  const int radius = params.extrema_neighborhood_radius;
  std::vector<std::pair<int, int>> offsets;
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      if ((dy || dx) && dy * dy + dx * dx <= radius * radius) offsets.emplace_back(dy, dx);
    }
  }

  for (int r = 0; r < depth.height; ++r) {
    for (int c = 0; c < depth.width; ++c) {
      const double v = depth.at(r, c);
      if (v < floor) continue;
      bool dominant = true;
      for (const auto& [dy, dx] : offsets) {
        const int y = r + dy, x = c + dx;
        if (y < 0 || x < 0 || y >= depth.height || x >= depth.width) continue;
        if (depth.at(y, x) > v) {
          dominant = false;
          break;
        }
      }
      if (dominant) peaks.push_back({r, c, v});
    }
  }
  std::sort(peaks.begin(), peaks.end(), deeper_first);
  return peaks;
}

std::vector<Peak> non_max_suppress(std::vector<Peak> peaks, double d_min) {
  std::sort(peaks.begin(), peaks.end(), deeper_first);
  std::vector<Peak> kept;
  const double d2 = d_min * d_min;
  for (const Peak& p : peaks) {
    const bool isolated = std::none_of(kept.begin(), kept.end(), [&](const Peak& q) {
      const double dy = p.row - q.row, dx = p.col - q.col;
      return dy * dy + dx * dx < d2;
    });
    if (isolated) kept.push_back(p);
  }
  return kept;
}

Clustering kmeans_cluster(const DepthImage& depth, const std::vector<Peak>& peaks, int max_iters) {
  Clustering result;
  const std::size_t k = peaks.size() + 1;
  result.centroids.reserve(k);
  result.centroids.push_back(*std::min_element(depth.values.begin(), depth.values.end()));
  for (const Peak& p : peaks) result.centroids.push_back(p.depth_value);

  const std::size_t n = depth.size();
  std::vector<int> assignment(n, -1);
  std::vector<double> sums(k);
  std::vector<std::size_t> sizes(k);
  for (int it = 0; it < max_iters; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = depth.values[i];
      int best = 0;
      double best_dist = std::abs(v - result.centroids[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double d = std::abs(v - result.centroids[c]);
        if (d < best_dist) {
          best_dist = d;
          best = static_cast<int>(c);
        }
      }
      if (assignment[i] != best) {
        assignment[i] = best;
        changed = true;
      }
    }
    result.iterations = it + 1;
    if (!changed && it > 0) {
      result.converged = true;
      break;
    }
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(sizes.begin(), sizes.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums[assignment[i]] += depth.values[i];
      ++sizes[assignment[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (sizes[c] > 0) result.centroids[c] = sums[c] / static_cast<double>(sizes[c]);
    }
  }
  std::fill(sizes.begin(), sizes.end(), 0);
  for (int a : assignment) ++sizes[a];
  result.assignment = std::move(assignment);
  result.sizes = std::move(sizes);
  return result;
}

OrificeMask kmeans_segment(const DepthImage& depth, const std::vector<Peak>& peaks, const SegParams& params) {
  if (peaks.empty()) throw ParameterError("kmeans_segment needs at least one peak");
  const Clustering clusters = kmeans_cluster(depth, peaks, params.kmeans_max_iters);
  OrificeMask mask(depth.height, depth.width);
  for (std::size_t i = 0; i < mask.size(); ++i) mask.labels[i] = clusters.assignment[i] != 0 ? 1 : 0;
  return mask;
}

Segmentation segment(const DepthImage& depth, const SegParams& params) {
  Segmentation result;
  result.peaks = non_max_suppress(find_local_extrema(depth, params), params.nms_min_distance);
  result.mask = result.peaks.empty() ? OrificeMask(depth.height, depth.width)
                                     : kmeans_segment(depth, result.peaks, params);
  return result;
}

OrificeMask segment_orifices(const DepthImage& depth, const SegParams& params) {
  return segment(depth, params).mask;
}

SoftMask SoftSegmenter::forward(const DepthImage& depth) {
  depth_ = depth.values;
  const std::size_t n = depth.size();
  soft_.assign(n, 0.0);
  nearest_fg_.assign(n, -1);
  clustering_ = {};

  const auto peaks = non_max_suppress(find_local_extrema(depth, params_), params_.nms_min_distance);
  empty_ = peaks.empty();
  if (!empty_) {
    clustering_ = kmeans_cluster(depth, peaks, params_.kmeans_max_iters);
    const auto& c = clustering_.centroids;
    const double tau = params_.soft_temperature;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = depth_[i];
      int best = 1;
      double best_dist = std::numeric_limits<double>::infinity();
      for (std::size_t k = 1; k < c.size(); ++k) {
        const double d = smooth_distance(v, c[k]);
        if (d < best_dist) {
          best_dist = d;
          best = static_cast<int>(k);
        }
      }
      nearest_fg_[i] = best;
      soft_[i] = sigmoid((smooth_distance(v, c[0]) - best_dist) / tau);
    }
  }
  return SoftMask{depth.height, depth.width, params_.soft_temperature, soft_};
}

std::vector<double> SoftSegmenter::backward(std::span<const double> grad_mask) const {
  const std::size_t n = depth_.size();
  std::vector<double> grad(n, 0.0);
  if (empty_) return grad;

  const auto& c = clustering_.centroids;
  const auto& members = clustering_.assignment;
  const auto& sizes = clustering_.sizes;
  const double tau = params_.soft_temperature;
  // Per-centroid accumulation of dL/dc_k, pushed back to members afterwards.
  std::vector<double> grad_centroid(c.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = grad_mask[i] * soft_[i] * (1.0 - soft_[i]) / tau;
    if (a == 0.0) continue;
    const int f = nearest_fg_[i];
    const double u_bg = (depth_[i] - c[0]) / smooth_distance(depth_[i], c[0]);
    const double u_fg = (depth_[i] - c[f]) / smooth_distance(depth_[i], c[f]);
    grad[i] += a * (u_bg - u_fg);
    grad_centroid[0] -= a * u_bg;
    grad_centroid[f] += a * u_fg;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const int k = members[i];
    grad[i] += grad_centroid[k] / static_cast<double>(sizes[k]);
  }
  return grad;
}

SoftMask soft_segment(const DepthImage& depth, const SegParams& params) {
  SoftSegmenter segmenter(params);
  return segmenter.forward(depth);
}

}  // namespace bsynth
