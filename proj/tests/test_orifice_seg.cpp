#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "bronchosynth/dataset.hpp"
#include "bronchosynth/errors.hpp"
#include "bronchosynth/metrics.hpp"
#include "bronchosynth/orifice_seg.hpp"
#include "bronchosynth/synthetic_scene.hpp"
#include "support.hpp"

using namespace bsynth;

namespace {

DepthImage two_valued_disc(int side, int cr, int cc, double radius) {
  DepthImage d(side, side, 0.1);
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      if (std::hypot(r - cr, c - cc) <= radius) d.at(r, c) = 0.9;
    }
  }
  return d;
}

SyntheticScene scene(std::vector<Lumen> lumens, int side = 64, double noise = 0.0, std::uint64_t seed = 1) {
  SceneParams p;
  p.height = p.width = side;
  p.lumens = std::move(lumens);
  p.noise_amplitude = noise;
  return generate_synthetic_scene(p, seed);
}

}  // namespace

TEST_CASE("constant image has no peaks, an empty mask and an empty soft mask") {
  const DepthImage d(40, 40, 0.0);
  CHECK(find_local_extrema(d, SegParams{}).empty());
  CHECK(segment_orifices(d, SegParams{}).count() == 0);
  for (double v : soft_segment(d, SegParams{}).values) CHECK(v == 0.0);
}

TEST_CASE("one lumen gives exactly one peak at its center") {
  const SyntheticScene s = scene({{27, 35, 10, 1.0}});
  const auto peaks = find_local_extrema(s.depth, SegParams{});
  REQUIRE(peaks.size() == 1);
  CHECK(peaks[0].row == 27);
  CHECK(peaks[0].col == 35);
  CHECK(peaks[0].depth_value == s.depth.at(27, 35));
  CHECK(peaks == testing::brute_force_extrema(s.depth, SegParams{}));
}

TEST_CASE("two lumens 80 pixels apart give two peaks at the centers") {
  const SyntheticScene s = scene({{40, 24, 15, 1.0}, {40, 104, 15, 0.9}}, 128);
  const auto peaks = find_local_extrema(s.depth, SegParams{});
  REQUIRE(peaks.size() == 2);
  CHECK(peaks[0] == Peak{40, 24, s.depth.at(40, 24)});
  CHECK(peaks[1] == Peak{40, 104, s.depth.at(40, 104)});
}

TEST_CASE("extrema match the brute-force scan on random and scene images") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 60; ++trial) {
    const int h = 32 + static_cast<int>(rng() % 33), w = 32 + static_cast<int>(rng() % 33);
    DepthImage d(h, w);
    // Quantized values create plateaus and ties.
    for (double& v : d.values) v = std::floor(testing::uniform(rng) * 12.0) / 11.0;
    SegParams p;
    p.extrema_neighborhood_radius = 1 + static_cast<int>(rng() % 6);
    p.peak_min_prominence = testing::uniform(rng, 0.05, 0.9);
    CHECK(find_local_extrema(d, p) == testing::brute_force_extrema(d, p));
  }
  SceneRanges ranges;
  ranges.noise_amplitude = 0.02;
  for (int trial = 0; trial < 20; ++trial) {
    auto params = sample_scene_params(ranges, rng);
    const SyntheticScene s = generate_synthetic_scene(params, rng());
    CHECK(find_local_extrema(s.depth, SegParams{}) == testing::brute_force_extrema(s.depth, SegParams{}));
  }
}

TEST_CASE("non_max_suppress hand cases") {
  const auto a = non_max_suppress({{10, 10, 0.9}, {10, 12, 0.8}}, 5);
  CHECK(a == std::vector<Peak>{{10, 10, 0.9}});
  const auto b = non_max_suppress({{10, 10, 0.9}, {100, 100, 0.8}}, 5);
  CHECK(b.size() == 2);
  // input order does not matter
  CHECK(non_max_suppress({{10, 12, 0.8}, {10, 10, 0.9}}, 5) == a);
  CHECK(non_max_suppress({}, 5).empty());
}

TEST_CASE("non_max_suppress equals the greedy oracle on random peak sets") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Peak> peaks;
    for (int i = 0; i < 50; ++i) {
      peaks.push_back({static_cast<int>(rng() % 64), static_cast<int>(rng() % 64), testing::uniform(rng)});
    }
    const auto kept = non_max_suppress(peaks, 9);
    CHECK(kept == testing::greedy_oracle(peaks, 9));
    const double top = std::max_element(peaks.begin(), peaks.end(), [](auto& x, auto& y) {
                         return x.depth_value < y.depth_value;
                       })->depth_value;
    CHECK(kept.front().depth_value == top);
  }
}

TEST_CASE("k-means on a two-valued disc recovers the disc") {
  const DepthImage d = two_valued_disc(48, 20, 26, 9.0);
  const OrificeMask m = kmeans_segment(d, {{20, 26, 0.9}}, SegParams{});
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(m.labels[i] == (d.values[i] > 0.5 ? 1 : 0));
  CHECK_THROWS_AS(kmeans_segment(d, {}, SegParams{}), ParameterError);
}

TEST_CASE("k-means with a peak at the background value terminates") {
  const DepthImage d(40, 40, 0.3);
  SegParams p;
  p.kmeans_max_iters = 5;
  const Clustering c = kmeans_cluster(d, {{3, 3, 0.3}}, p.kmeans_max_iters);
  CHECK(c.iterations <= 5);
  const OrificeMask m = kmeans_segment(d, {{3, 3, 0.3}}, p);
  for (auto v : m.labels) CHECK((v == 0 || v == 1));
}

TEST_CASE("two-lumen scenes segment with Dice at least 0.8") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const SyntheticScene s = scene({{18, 20, 9, 1.0}, {44, 42, 8, 0.8}}, 64, 0.003, seed);
    CHECK(dice_coefficient(segment_orifices(s.depth, SegParams{}), s.truth_mask) >= 0.8);
  }
}

TEST_CASE("one-lumen segmentation is one component containing the center, deterministically") {
  const SyntheticScene s = scene({{33, 29, 11, 1.0}}, 64, 0.003);
  const OrificeMask m = segment_orifices(s.depth, SegParams{});
  CHECK(testing::flood_fill_components(m) == 1);
  CHECK(m.at(33, 29) == 1);
  CHECK(segment_orifices(s.depth, SegParams{}) == m);
}

TEST_CASE("segmentation parameters are validated") {
  SegParams p;
  p.nms_min_distance = 0.5;
  CHECK_THROWS_AS(validate(p), ConfigError);
  p = SegParams{};
  p.soft_temperature = 0.0;
  CHECK_THROWS_AS(validate(p), ConfigError);
}

TEST_CASE("soft mask approaches the hard mask as the temperature vanishes") {
  const DepthImage d = two_valued_disc(40, 18, 20, 8.0);
  SegParams p;
  p.soft_temperature = 1e-4;
  const SoftMask soft = soft_segment(d, p);
  const OrificeMask hard = segment_orifices(d, p);
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(std::abs(soft.values[i] - hard.labels[i]) < 1e-9);
}

TEST_CASE("thresholded soft mask equals the hard mask on zero-noise scenes") {
  std::mt19937_64 rng(77);
  SceneRanges ranges;
  ranges.noise_amplitude = 0.0;
  for (int trial = 0; trial < 25; ++trial) {
    const SyntheticScene s = generate_synthetic_scene(sample_scene_params(ranges, rng), rng());
    CHECK(soft_segment(s.depth, SegParams{}).threshold() == segment_orifices(s.depth, SegParams{}));
  }
}

TEST_CASE("soft mask gradient matches finite differences") {
  std::mt19937_64 rng(12);
  SegParams p;
  p.extrema_neighborhood_radius = 2;
  p.nms_min_distance = 3;
  p.soft_temperature = 0.05;
  DepthImage d(8, 8);
  for (int r = 0; r < 8; ++r) {
    for (int c = 0; c < 8; ++c) {
      d.at(r, c) = std::exp(-((r - 3.0) * (r - 3.0) + (c - 4.0) * (c - 4.0)) / 6.0) + 0.05 * testing::uniform(rng);
    }
  }
  auto total = [&](const std::vector<double>& values) {
    DepthImage x(8, 8);
    x.values = values;
    double s = 0.0;
    for (double v : soft_segment(x, p).values) s += v;
    return s;
  };
  SoftSegmenter seg(p);
  seg.forward(d);
  const std::vector<double> analytic = seg.backward(std::vector<double>(64, 1.0));
  const std::vector<double> numeric = testing::numeric_gradient(total, d.values, 1e-6);
  CHECK(testing::relative_error(analytic, numeric) < 1e-4);
  // single pixel with the largest gradient
  std::size_t j = 0;
  for (std::size_t i = 0; i < 64; ++i) {
    if (std::abs(analytic[i]) > std::abs(analytic[j])) j = i;
  }
  REQUIRE(std::abs(analytic[j]) > 1e-3);
  CHECK(std::abs(analytic[j] - numeric[j]) / std::abs(numeric[j]) < 1e-4);
}
