#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "bronchosynth/checkpoint.hpp"
#include "bronchosynth/config.hpp"
#include "bronchosynth/dataset.hpp"
#include "bronchosynth/depth_backend.hpp"
#include "bronchosynth/errors.hpp"
#include "bronchosynth/metrics.hpp"
#include "bronchosynth/orifice_seg.hpp"
#include "bronchosynth/png_io.hpp"
#include "bronchosynth/subprocess.hpp"
#include "bronchosynth/trainer.hpp"
#include "bronchosynth/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bsynth;

namespace {

constexpr int kExitPartial = 1;
constexpr int kExitConfig = 2;

struct Common {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> overrides;

  void add_to(CLI::App* app, bool out_required) {
    app->add_option("--config", config_file, "JSON config file layered over the defaults")->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "Seed for every random choice");
    auto* o = app->add_option("--out", out, "Output directory");
    if (out_required) o->required();
    app->add_option("--set", sets, "Override one config key: section.key=value")->take_all();
  }

  void set(const std::string& key, const std::string& value) { overrides.emplace_back(key, value); }

  // Resolves the layered config; returns the typed view and its serialized form.
  std::pair<GlobalConfig, json> resolve() {
    std::vector<std::pair<std::string, std::string>> all;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
      all.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    all.insert(all.end(), overrides.begin(), overrides.end());
    if (seed) all.emplace_back("seed", std::to_string(*seed));
    std::optional<fs::path> file;
    if (!config_file.empty()) file = config_file;
    GlobalConfig config = load_config(file, all);
    return {config, to_json(config)};
  }
};

std::vector<fs::path> png_inputs(const fs::path& input) {
  if (fs::is_regular_file(input)) return {input};
  if (!fs::is_directory(input)) throw InputError("input not found: " + input.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(input)) {
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (entry.is_regular_file() && ext == ".png") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw InputError("no PNG files in " + input.string());
  return files;
}

void check_backend(const BackendConfig& backend) {
  if (backend.kind != BackendKind::external) return;
  if (backend.command.empty()) throw ConfigError("external depth backend selected but backend.command is empty");
  const std::string program = backend.command.substr(0, backend.command.find(' '));
  if (run_command("command -v", {program}).exit_code != 0) {
    throw ConfigError("depth backend command not found: " + program);
  }
}

int report_failures(const std::vector<std::pair<fs::path, std::string>>& failures, std::size_t total) {
  for (const auto& [file, reason] : failures) spdlog::error("{}: {}", file.string(), reason);
  if (failures.empty()) return 0;
  spdlog::warn("{} of {} inputs failed", failures.size(), total);
  return kExitPartial;
}

std::string describe(const std::exception& e) {
  if (const auto* b = dynamic_cast<const BackendError*>(&e); b && !b->diagnostics().empty()) {
    return std::string(e.what()) + ": " + b->diagnostics();
  }
  return e.what();
}

int cmd_depth(Common& common, const std::string& input, const std::string& backend_kind) {
  if (!backend_kind.empty()) common.set("backend.kind", backend_kind);
  auto [config, resolved] = common.resolve();
  const BackendConfig& backend = config.train.backend;
  check_backend(backend);
  const fs::path out = common.out;
  const auto files = png_inputs(input);
  fs::create_directories(out);
  save_resolved_config(resolved, out);
  std::vector<std::string> errors(files.size());
  parallel_for(files.size(), backend.max_concurrency, [&](std::size_t i) {
    try {
      png::write_depth(out / (files[i].stem().string() + ".png"), estimate_depth(png::read_rgb(files[i]), backend));
    } catch (const std::exception& e) {
      errors[i] = describe(e);
    }
  });
  std::vector<std::pair<fs::path, std::string>> failures;
  for (std::size_t i = 0; i < files.size(); ++i) {
    if (!errors[i].empty()) failures.emplace_back(files[i], errors[i]);
  }
  return report_failures(failures, files.size());
}

int cmd_segment(Common& common, const std::string& input, const std::string& params_file) {
  auto [config, resolved] = common.resolve();
  SegParams seg = config.train.seg;
  if (!params_file.empty()) {
    json given = json::parse(read_text(params_file), nullptr, false);
    if (given.is_discarded() || !given.is_object()) throw ConfigError("--params must be a JSON object");
    json merged = to_json(seg);
    for (const auto& [key, value] : given.items()) {
      if (!merged.contains(key)) throw ConfigError("unknown segmentation parameter '" + key + "'");
      merged[key] = value;
    }
    seg = seg_params_from_json(merged);
    resolved["seg"] = to_json(seg);
  }
  const fs::path out = common.out;
  const auto files = png_inputs(input);
  fs::create_directories(out);
  save_resolved_config(resolved, out);
  std::vector<std::pair<fs::path, std::string>> failures;
  for (const auto& file : files) {
    try {
      const Segmentation s = segment(png::read_depth(file), seg);
      png::write_mask(out / (file.stem().string() + ".png"), s.mask);
      json peaks = json::array();
      for (const Peak& p : s.peaks) peaks.push_back({{"row", p.row}, {"col", p.col}, {"depth_value", p.depth_value}});
      const json doc = {{"id", file.stem().string()}, {"peaks", peaks}, {"mask_pixels", s.mask.count()}};
      write_text_atomic(out / (file.stem().string() + ".peaks.json"), doc.dump(2) + "\n");
    } catch (const std::exception& e) {
      failures.emplace_back(file, describe(e));
    }
  }
  return report_failures(failures, files.size());
}

int cmd_build_data(Common& common, const std::string& source, const std::string& tag) {
  auto [config, resolved] = common.resolve();
  check_backend(config.train.backend);
  const fs::path out = common.out;
  const DatasetManifest m =
      build_paired_dataset(source, out, config.train.backend, config.preprocessing, config.split,
                           config.train.seed, source_tag_from_string(tag));
  save_resolved_config(resolved, out);
  spdlog::info("wrote {} records ({} skipped) to {}", m.records.size(), m.skipped.size(), out.string());
  return m.skipped.empty() ? 0 : kExitPartial;
}

int cmd_synth_data(Common& common, int n) {
  auto [config, resolved] = common.resolve();
  const fs::path out = common.out;
  const DatasetManifest m = build_synthetic_dataset(n, config.scenes, config.split, config.train.seed, out);
  save_resolved_config(resolved, out);
  spdlog::info("wrote {} synthetic records to {}", m.records.size(), out.string());
  return 0;
}

int cmd_train(Common& common, const std::string& manifest_dir, std::optional<double> lambda_dice,
              std::optional<int> epochs, const std::string& resume) {
  if (lambda_dice) common.set("loss.lambda_dice", std::to_string(*lambda_dice));
  if (epochs) common.set("train.epochs", std::to_string(*epochs));
  auto [config, resolved] = common.resolve();
  const DatasetManifest manifest = read_manifest(manifest_dir);
  TrainOptions options;
  options.out_dir = common.out;
  options.resolved_config = resolved;
  if (!resume.empty()) options.resume = resume;
  const TrainResult result = train(manifest, config.train, options);
  spdlog::info("trained {} epochs / {} steps; checkpoint {}", result.epochs_completed, result.steps,
               result.final_checkpoint.string());
  return 0;
}

int cmd_translate(Common& common, const std::string& checkpoint, const std::string& input, bool depth_input) {
  auto [config, resolved] = common.resolve();
  const auto state = load_checkpoint(checkpoint);
  const BackendConfig& backend = state->config.backend;
  if (!depth_input) check_backend(backend);
  const fs::path out = common.out;
  const auto files = png_inputs(input);
  fs::create_directories(out);
  resolved["checkpoint"] = to_json(state->config);
  save_resolved_config(resolved, out);
  std::vector<std::pair<fs::path, std::string>> failures;
  for (const auto& file : files) {
    try {
      DepthImage depth;
      if (depth_input) {
        depth = png::read_depth(file);
      } else {
        const int side = config.preprocessing.resolution;
        RgbImage rgb = resize_bilinear(png::read_rgb(file), side, side);
        if (config.preprocessing.circular_crop) rgb = circular_crop(rgb, config.preprocessing.crop_fraction);
        depth = estimate_depth(rgb, backend);
      }
      state->generator.check_input(depth.height, depth.width);
      png::write_rgb(out / (file.stem().string() + ".png"), generate(state->generator, depth));
    } catch (const std::exception& e) {
      failures.emplace_back(file, describe(e));
    }
  }
  return report_failures(failures, files.size());
}

int cmd_evaluate(Common& common, const std::string& checkpoint, const std::string& manifest_dir,
                 const std::string& split) {
  auto [config, resolved] = common.resolve();
  const DatasetManifest manifest = read_manifest(manifest_dir);
  const fs::path out = common.out;
  fs::create_directories(out);
  const MetricsReport report =
      evaluate_checkpoint(checkpoint, manifest, split_from_string(split), config.metrics, out);
  write_report(report, out);
  save_resolved_config(resolved, out);
  spdlog::info("{} images: FID {:.4f}, SSIM {:.4f}, Dice {:.4f}", report.n_images, report.fid, report.ssim_mean,
               report.dice_mean);
  return report.excluded.empty() ? 0 : kExitPartial;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Depth-conditioned bronchoscopy image translation with an orifice-overlap constraint"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);
  app.fallthrough();
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

  Common common;
  std::string input, backend_kind, params_file, source, tag = "real", manifest, resume, checkpoint, split = "test";
  int n = 100;
  std::optional<double> lambda_dice;
  std::optional<int> epochs;
  bool depth_input = false;

  auto* depth = app.add_subcommand("depth", "Infer depth images from RGB images");
  common.add_to(depth, true);
  depth->add_option("input", input, "Image file or directory")->required();
  depth->add_option("--backend", backend_kind, "synthetic or external");

  auto* seg = app.add_subcommand("segment", "Segment orifices in depth images");
  common.add_to(seg, true);
  seg->add_option("input", input, "Depth image file or directory")->required();
  seg->add_option("--params", params_file, "JSON object of segmentation parameters")->check(CLI::ExistingFile);

  auto* build = app.add_subcommand("build-data", "Pair a folder of RGB images with inferred depth");
  common.add_to(build, true);
  build->add_option("--source", source, "Folder of RGB images")->required();
  build->add_option("--tag", tag, "real, synthetic, virtual or phantom");

  auto* synth = app.add_subcommand("synth-data", "Render a synthetic paired dataset");
  common.add_to(synth, true);
  synth->add_option("-n,--count", n, "Number of scenes")->check(CLI::PositiveNumber);

  auto* tr = app.add_subcommand("train", "Train the translator on a manifest");
  common.add_to(tr, true);
  tr->add_option("--manifest", manifest, "Dataset directory holding the manifest")->required();
  tr->add_option("--lambda-dice", lambda_dice, "Weight of the orifice Dice term (0 disables it)");
  tr->add_option("--epochs", epochs, "Number of epochs");
  tr->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);

  auto* translate = app.add_subcommand("translate", "Translate images with a trained checkpoint");
  common.add_to(translate, true);
  translate->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  translate->add_option("input", input, "Image file or directory")->required();
  translate->add_flag("--depth", depth_input, "Inputs are depth images; skip depth inference");

  auto* eval = app.add_subcommand("evaluate", "Compute FID, SSIM and orifice Dice on a split");
  common.add_to(eval, true);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--manifest", manifest, "Dataset directory holding the manifest")->required();
  eval->add_option("--split", split, "train, val or test");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*depth) return cmd_depth(common, input, backend_kind);
    if (*seg) return cmd_segment(common, input, params_file);
    if (*build) return cmd_build_data(common, source, tag);
    if (*synth) return cmd_synth_data(common, n);
    if (*tr) return cmd_train(common, manifest, lambda_dice, epochs, resume);
    if (*translate) return cmd_translate(common, checkpoint, input, depth_input);
    if (*eval) return cmd_evaluate(common, checkpoint, manifest, split);
  } catch (const ConfigError& e) {
    spdlog::error("configuration error: {}", e.what());
    return kExitConfig;
  } catch (const InputError& e) {
    spdlog::error("input error: {}", e.what());
    return kExitConfig;
  } catch (const ParameterError& e) {
    spdlog::error("parameter error: {}", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    spdlog::error("{}", describe(e));
    return kExitPartial;
  }
  return 0;
}
