#include "bronchosynth/metrics.hpp"

#include <spdlog/spdlog.h>
#include <unistd.h>

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <cstdio>

#include "bronchosynth/checkpoint.hpp"
#include "bronchosynth/errors.hpp"
#include "bronchosynth/hash.hpp"
#include "bronchosynth/png_io.hpp"
#include "bronchosynth/subprocess.hpp"
#include "bronchosynth/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace bsynth {

namespace {

constexpr int kWindow = 11;
constexpr double kWindowSigma = 1.5;

std::vector<double> window_kernel() {
  std::vector<double> k(kWindow);
  double sum = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double x = i - kWindow / 2;
    k[i] = std::exp(-x * x / (2.0 * kWindowSigma * kWindowSigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Valid-mode separable filtering: output is (H-10) x (W-10).
std::vector<double> filter_valid(const std::vector<double>& in, int h, int w, const std::vector<double>& k) {
  const int ow = w - kWindow + 1;
  const int oh = h - kWindow + 1;
  std::vector<double> rows(static_cast<std::size_t>(h) * ow);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < ow; ++c) {
      double s = 0.0;
      for (int i = 0; i < kWindow; ++i) s += k[i] * in[static_cast<std::size_t>(r) * w + c + i];
      rows[static_cast<std::size_t>(r) * ow + c] = s;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int r = 0; r < oh; ++r) {
    for (int c = 0; c < ow; ++c) {
      double s = 0.0;
      for (int i = 0; i < kWindow; ++i) s += k[i] * rows[static_cast<std::size_t>(r + i) * ow + c];
      out[static_cast<std::size_t>(r) * ow + c] = s;
    }
  }
  return out;
}

std::vector<double> channel(const RgbImage& image, int ch) {
  std::vector<double> out(image.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = image.pixels[3 * i + ch];
  return out;
}

Eigen::MatrixXd to_matrix(const std::vector<std::vector<double>>& rows) {
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto d = static_cast<Eigen::Index>(rows.front().size());
  Eigen::MatrixXd m(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(rows[i].size()) != d) throw InputError("feature vectors differ in length");
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = rows[i][j];
  }
  return m;
}

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, const Eigen::VectorXd& mean) {
  const Eigen::MatrixXd centered = x.rowwise() - mean.transpose();
  return (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
}

Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const Eigen::VectorXd roots = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * roots.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double ssim(std::span<const double> a, std::span<const double> b, int height, int width, double dynamic_range) {
  const std::size_t n = static_cast<std::size_t>(height) * width;
  if (a.size() != n || b.size() != n) throw InputError("ssim inputs must match the given shape");
  if (height < kWindow || width < kWindow) throw InputError("ssim needs images of at least 11x11");
  const std::vector<double> k = window_kernel();
  std::vector<double> va(a.begin(), a.end()), vb(b.begin(), b.end()), aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = va[i] * va[i];
    bb[i] = vb[i] * vb[i];
    ab[i] = va[i] * vb[i];
  }
  const auto mu_a = filter_valid(va, height, width, k);
  const auto mu_b = filter_valid(vb, height, width, k);
  const auto e_aa = filter_valid(aa, height, width, k);
  const auto e_bb = filter_valid(bb, height, width, k);
  const auto e_ab = filter_valid(ab, height, width, k);
  const double c1 = std::pow(0.01 * dynamic_range, 2);
  const double c2 = std::pow(0.03 * dynamic_range, 2);
  double sum = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double var_a = e_aa[i] - ma * ma;
    const double var_b = e_bb[i] - mb * mb;
    const double cov = e_ab[i] - ma * mb;
    sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
  }
  return sum / static_cast<double>(mu_a.size());
}

double ssim(const RgbImage& a, const RgbImage& b) {
  if (a.height != b.height || a.width != b.width) throw InputError("ssim shape mismatch");
  double sum = 0.0;
  for (int ch = 0; ch < 3; ++ch) sum += ssim(channel(a, ch), channel(b, ch), a.height, a.width, 255.0);
  return sum / 3.0;
}

double fid(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
           FidOptions options) {
  if (a.size() < 2 || b.size() < 2) throw NumericalError("fid needs at least two samples per set");
  const Eigen::MatrixXd xa = to_matrix(a);
  const Eigen::MatrixXd xb = to_matrix(b);
  if (xa.cols() != xb.cols()) throw InputError("fid feature sets differ in dimension");
  const auto d = xa.cols();
  const Eigen::VectorXd mu_a = xa.colwise().mean();
  const Eigen::VectorXd mu_b = xb.colwise().mean();
  Eigen::MatrixXd cov_a = covariance(xa, mu_a);
  Eigen::MatrixXd cov_b = covariance(xb, mu_b);

  for (auto [cov, n] : {std::pair{&cov_a, xa.rows()}, std::pair{&cov_b, xb.rows()}}) {
    if (n < 2 * d) {
      if (!options.shrinkage) {
        throw NumericalError("covariance from " + std::to_string(n) + " samples in dimension " + std::to_string(d) +
                             " is degenerate; enable covariance shrinkage or supply at least " +
                             std::to_string(2 * d) + " samples");
      }
      cov->diagonal().array() += 1e-6 * cov->trace() / static_cast<double>(d);
    }
  }

  const Eigen::MatrixXd root_a = sqrt_psd(cov_a);
  Eigen::MatrixXd inner = root_a * cov_b * root_a;
  inner = 0.5 * (inner + inner.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
  const double trace_root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * trace_root;
  if (!std::isfinite(value)) throw NumericalError("fid is not finite");
  return std::max(0.0, value);
}

double dice_coefficient(const OrificeMask& a, const OrificeMask& b, double epsilon) {
  if (a.height != b.height || a.width != b.width) throw InputError("dice shape mismatch");
  std::size_t sum_a = 0, sum_b = 0, inter = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sum_a += a.labels[i];
    sum_b += b.labels[i];
    inter += a.labels[i] & b.labels[i];
  }
  if (sum_a + sum_b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / (static_cast<double>(sum_a + sum_b) + epsilon);
}

double anatomical_dice(const OrificeMask& input_mask, const RgbImage& generated, const BackendConfig& backend,
                       const SegParams& seg, double epsilon) {
  return dice_coefficient(input_mask, segment_orifices(estimate_depth(generated, backend), seg), epsilon);
}

std::vector<double> FeatureEmbedder::embed(const RgbImage& image) const {
  if (mode_ == EmbedderMode::identity_downsample) {
    const std::vector<double> gray = luminance(image);
    std::vector<double> out(kSide * kSide);
    for (int r = 0; r < kSide; ++r) {
      const int r0 = r * image.height / kSide, r1 = std::max(r0 + 1, (r + 1) * image.height / kSide);
      for (int c = 0; c < kSide; ++c) {
        const int c0 = c * image.width / kSide, c1 = std::max(c0 + 1, (c + 1) * image.width / kSide);
        double sum = 0.0;
        for (int y = r0; y < r1; ++y) {
          for (int x = c0; x < c1; ++x) sum += gray[static_cast<std::size_t>(y) * image.width + x];
        }
        out[r * kSide + c] = sum / ((r1 - r0) * (c1 - c0));
      }
    }
    return out;
  }

  static std::atomic<int> counter{0};
  const fs::path dir = fs::temp_directory_path() /
                       ("bsynth-embed-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::create_directories(dir);
  struct Cleanup {
    fs::path dir;
    ~Cleanup() {
      std::error_code ec;
      fs::remove_all(dir, ec);
    }
  } cleanup{dir};
  png::write_rgb(dir / "in.png", image);
  const CommandResult run = run_command(command_, {(dir / "in.png").string(), (dir / "out.json").string()});
  if (run.exit_code != 0) {
    throw BackendError("embedding command exited with " + std::to_string(run.exit_code), run.output);
  }
  try {
    return json::parse(read_text(dir / "out.json")).get<std::vector<double>>();
  } catch (const std::exception& e) {
    throw BackendError(std::string("embedding command output unreadable: ") + e.what(), run.output);
  }
}

std::string FeatureEmbedder::fingerprint() const {
  if (mode_ == EmbedderMode::identity_downsample) return "identity-downsample-16x16-luma";
  return "command-" + hex_digest(command_);
}

FeatureEmbedder make_embedder(const MetricsSettings& settings) {
  if (settings.embedder == EmbedderMode::command) return FeatureEmbedder(settings.embed_command);
  return FeatureEmbedder();
}

namespace {

RgbImage gray_panel(int h, int w, const std::function<double(std::size_t)>& value) {
  RgbImage out(h, w);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto v = static_cast<std::uint8_t>(std::lround(std::clamp(value(i), 0.0, 1.0) * 255.0));
    out.pixels[3 * i] = out.pixels[3 * i + 1] = out.pixels[3 * i + 2] = v;
  }
  return out;
}

RgbImage stack_vertical(const std::vector<RgbImage>& rows) {
  RgbImage out(0, rows.front().width);
  for (const auto& r : rows) {
    out.pixels.insert(out.pixels.end(), r.pixels.begin(), r.pixels.end());
    out.height += r.height;
  }
  return out;
}

}  // namespace

RgbImage montage_row(const DepthImage& depth, const RgbImage& generated, const RgbImage& target,
                     const OrificeMask& input_mask, const OrificeMask& output_mask) {
  const int h = depth.height, w = depth.width;
  const std::vector<RgbImage> panels = {
      gray_panel(h, w, [&](std::size_t i) { return depth.values[i]; }), generated, target,
      gray_panel(h, w, [&](std::size_t i) { return static_cast<double>(input_mask.labels[i]); }),
      gray_panel(h, w, [&](std::size_t i) { return static_cast<double>(output_mask.labels[i]); })};
  RgbImage out(h, w * static_cast<int>(panels.size()));
  for (std::size_t p = 0; p < panels.size(); ++p) {
    if (panels[p].height != h || panels[p].width != w) throw InputError("montage panels differ in shape");
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        for (int ch = 0; ch < 3; ++ch) out.at(r, static_cast<int>(p) * w + c, ch) = panels[p].at(r, c, ch);
      }
    }
  }
  return out;
}

MetricsReport evaluate(const DatasetManifest& manifest, Split split, const ImageGenerator& generator,
                       const EvaluationSettings& settings) {
  MetricsReport report;
  report.split = to_string(split);
  report.embedder_fingerprint = settings.embedder.fingerprint();
  std::vector<std::vector<double>> generated_features, target_features;
  std::vector<RgbImage> montage;

  for (const ImagePair* record : manifest.split(split)) {
    try {
      const LoadedPair pair = load_pair(manifest, *record);
      const RgbImage generated = generator(*record, pair.depth);
      if (generated.height != pair.target.height || generated.width != pair.target.width) {
        throw InputError("generated image shape differs from the target");
      }
      const Segmentation in_seg = segment(pair.depth, settings.seg);
      const Segmentation out_seg = segment(estimate_depth(generated, settings.backend), settings.seg);
      ImageRow row;
      row.id = record->id;
      row.ssim = ssim(generated, pair.target);
      row.dice = dice_coefficient(in_seg.mask, out_seg.mask, settings.epsilon);
      row.input_orifices = static_cast<int>(in_seg.peaks.size());
      row.output_orifices = static_cast<int>(out_seg.peaks.size());
      std::vector<double> fg = settings.embedder.embed(generated);
      std::vector<double> ft = settings.embedder.embed(pair.target);
      if (report.embedding_dimension == 0) report.embedding_dimension = static_cast<int>(fg.size());
      if (static_cast<int>(fg.size()) != report.embedding_dimension || ft.size() != fg.size()) {
        throw InputError("embedder returned a vector of inconsistent length");
      }
      generated_features.push_back(std::move(fg));
      target_features.push_back(std::move(ft));
      report.rows.push_back(row);
      if (settings.montage_dir && static_cast<int>(montage.size()) < settings.montage_count) {
        montage.push_back(montage_row(pair.depth, generated, pair.target, in_seg.mask, out_seg.mask));
      }
    } catch (const std::exception& e) {
      spdlog::warn("excluding {}: {}", record->id, e.what());
      report.excluded.push_back({record->id, e.what()});
    }
  }

  report.n_images = static_cast<int>(report.rows.size());
  if (report.n_images < 2) {
    throw InputError("evaluation needs at least two usable records in the " + report.split + " split");
  }
  double ssim_sum = 0.0, dice_sum = 0.0;
  for (const auto& row : report.rows) {
    ssim_sum += row.ssim;
    dice_sum += row.dice;
  }
  report.ssim_mean = ssim_sum / report.n_images;
  report.dice_mean = dice_sum / report.n_images;
  report.fid = fid(generated_features, target_features);

  if (settings.montage_dir && !montage.empty()) {
    png::write_rgb(*settings.montage_dir / "montage.png", stack_vertical(montage));
  }
  return report;
}

MetricsReport evaluate_checkpoint(const fs::path& checkpoint, const DatasetManifest& manifest, Split split,
                                  const MetricsSettings& metrics, const std::optional<fs::path>& montage_dir) {
  const auto state = load_checkpoint(checkpoint);
  EvaluationSettings settings;
  settings.backend = state->config.backend;
  settings.seg = state->config.seg;
  settings.epsilon = state->config.weights.epsilon;
  settings.embedder = make_embedder(metrics);
  settings.montage_count = metrics.montage_count;
  settings.montage_dir = montage_dir;
  const Generator& g = state->generator;
  MetricsReport report =
      evaluate(manifest, split, [&](const ImagePair&, const DepthImage& depth) { return generate(g, depth); }, settings);
  report.checkpoint = checkpoint.string();
  return report;
}

json to_json(const MetricsReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"id", row.id},
                    {"ssim", row.ssim},
                    {"dice", row.dice},
                    {"input_orifices", row.input_orifices},
                    {"output_orifices", row.output_orifices}});
  }
  json excluded = json::array();
  for (const auto& e : r.excluded) excluded.push_back({{"id", e.file}, {"reason", e.reason}});
  return {{"fid", r.fid},
          {"ssim_mean", r.ssim_mean},
          {"dice_mean", r.dice_mean},
          {"n_images", r.n_images},
          {"n_excluded", r.excluded.size()},
          {"split", r.split},
          {"checkpoint", r.checkpoint},
          {"embedder", {{"fingerprint", r.embedder_fingerprint}, {"dimension", r.embedding_dimension}}},
          {"rows", rows},
          {"excluded", excluded}};
}

std::string per_image_csv(const MetricsReport& r) {
  std::string out = "id,ssim,dice,input_orifices,output_orifices\n";
  char buf[128];
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%d,%d\n", row.ssim, row.dice, row.input_orifices,
                  row.output_orifices);
    out += row.id + buf;
  }
  return out;
}

void write_report(const MetricsReport& report, const fs::path& dir) {
  write_text_atomic(dir / "report.json", to_json(report).dump(2) + "\n");
  write_text_atomic(dir / "per_image.csv", per_image_csv(report));
}

}  // namespace bsynth
