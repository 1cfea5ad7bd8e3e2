#pragma once

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "bronchosynth/image.hpp"
#include "bronchosynth/orifice_seg.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("bsynth-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline double uniform(std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  return lo + (hi - lo) * static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Central differences of f at x.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

inline bsynth::OrificeMask random_mask(std::mt19937_64& rng, int h, int w, double density) {
  bsynth::OrificeMask m(h, w);
  for (auto& v : m.labels) v = uniform(rng) < density ? 1 : 0;
  return m;
}

// 4-connected components by breadth-first search.
inline int flood_fill_components(const bsynth::OrificeMask& mask) {
  std::vector<int> seen(mask.size(), 0);
  int count = 0;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask.labels[start] || seen[start]) continue;
    ++count;
    std::vector<std::size_t> queue{start};
    seen[start] = 1;
    for (std::size_t q = 0; q < queue.size(); ++q) {
      const int r = static_cast<int>(queue[q] / mask.width), c = static_cast<int>(queue[q] % mask.width);
      const int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const int rr = r + dr[k], cc = c + dc[k];
        if (rr < 0 || cc < 0 || rr >= mask.height || cc >= mask.width) continue;
        const std::size_t j = static_cast<std::size_t>(rr) * mask.width + cc;
        if (mask.labels[j] && !seen[j]) {
          seen[j] = 1;
          queue.push_back(j);
        }
      }
    }
  }
  return count;
}

// Every pixel compared with its whole Euclidean neighborhood.
inline std::vector<bsynth::Peak> brute_force_extrema(const bsynth::DepthImage& d, const bsynth::SegParams& p) {
  const double lo = *std::min_element(d.values.begin(), d.values.end());
  const int rad = p.extrema_neighborhood_radius;
  std::vector<bsynth::Peak> out;
  for (int r = 0; r < d.height; ++r) {
    for (int c = 0; c < d.width; ++c) {
      const double v = d.at(r, c);
      if (v < lo + p.peak_min_prominence) continue;
      bool ok = true;
      for (int rr = 0; rr < d.height && ok; ++rr) {
        for (int cc = 0; cc < d.width; ++cc) {
          if ((rr - r) * (rr - r) + (cc - c) * (cc - c) <= rad * rad && d.at(rr, cc) > v) {
            ok = false;
            break;
          }
        }
      }
      if (ok) out.push_back({r, c, v});
    }
  }
  std::sort(out.begin(), out.end(), [](const bsynth::Peak& a, const bsynth::Peak& b) {
    if (a.depth_value != b.depth_value) return a.depth_value > b.depth_value;
    return a.row != b.row ? a.row < b.row : a.col < b.col;
  });
  return out;
}

inline std::vector<bsynth::Peak> greedy_oracle(std::vector<bsynth::Peak> peaks, double d_min) {
  std::stable_sort(peaks.begin(), peaks.end(), [](const bsynth::Peak& a, const bsynth::Peak& b) {
    if (a.depth_value != b.depth_value) return a.depth_value > b.depth_value;
    return a.row != b.row ? a.row < b.row : a.col < b.col;
  });
  std::vector<bsynth::Peak> kept;
  for (const bsynth::Peak& p : peaks) {
    bool far = true;
    for (const bsynth::Peak& k : kept) far = far && std::hypot(p.row - k.row, p.col - k.col) >= d_min;
    if (far) kept.push_back(p);
  }
  return kept;
}

}  // namespace testing
