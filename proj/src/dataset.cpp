#include "bronchosynth/dataset.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include "bronchosynth/errors.hpp"
#include "bronchosynth/hash.hpp"
#include "bronchosynth/png_io.hpp"
#include "bronchosynth/subprocess.hpp"
#include "bronchosynth/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace bsynth {

std::string to_string(SourceTag tag) {
  switch (tag) {
    case SourceTag::real: return "real";
    case SourceTag::synthetic: return "synthetic";
    case SourceTag::virtual_bronchoscopy: return "virtual";
    case SourceTag::phantom: return "phantom";
  }
  return "real";
}

SourceTag source_tag_from_string(const std::string& name) {
  if (name == "real") return SourceTag::real;
  if (name == "synthetic") return SourceTag::synthetic;
  if (name == "virtual") return SourceTag::virtual_bronchoscopy;
  if (name == "phantom") return SourceTag::phantom;
  throw InputError("unknown source tag '" + name + "'");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw InputError("unknown split '" + name + "'");
}

void validate(const SplitFractions& f) {
  if (f.train < 0.0 || f.val < 0.0 || f.test < 0.0 || !(f.train > 0.0)) {
    throw ConfigError("split fractions must be non-negative with a positive train share");
  }
  if (std::abs(f.train + f.val + f.test - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
}

std::vector<const ImagePair*> DatasetManifest::split(Split which) const {
  std::vector<const ImagePair*> out;
  for (const auto& r : records) {
    if (r.split == which) out.push_back(&r);
  }
  return out;
}

json to_json(const ImagePair& pair) {
  json j = {{"id", pair.id},
            {"input_depth", pair.input_depth},
            {"target_rgb", pair.target_rgb},
            {"source_tag", to_string(pair.source_tag)},
            {"split", to_string(pair.split)}};
  if (pair.truth_mask) j["truth_mask"] = *pair.truth_mask;
  return j;
}

ImagePair image_pair_from_json(const json& j) {
  ImagePair p;
  p.id = j.at("id").get<std::string>();
  p.input_depth = j.at("input_depth").get<std::string>();
  p.target_rgb = j.at("target_rgb").get<std::string>();
  p.source_tag = source_tag_from_string(j.at("source_tag").get<std::string>());
  p.split = split_from_string(j.at("split").get<std::string>());
  if (j.contains("truth_mask")) p.truth_mask = j.at("truth_mask").get<std::string>();
  return p;
}

std::string serialize_records(const std::vector<ImagePair>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  return out;
}

std::vector<ImagePair> parse_records(const std::string& text) {
  std::vector<ImagePair> records;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      records.push_back(image_pair_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw InputError("records line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

std::string serialize_header(const DatasetManifest& m) {
  json skipped = json::array();
  for (const auto& s : m.skipped) skipped.push_back({{"file", s.file}, {"reason", s.reason}});
  json j = {{"backend_fingerprint", m.backend_fingerprint},
            {"created_at", m.created_at},
            {"tool_version", m.tool_version},
            {"record_count", m.records.size()},
            {"seed", m.seed},
            {"preprocessing",
             {{"resolution", m.preprocessing.resolution},
              {"circular_crop", m.preprocessing.circular_crop},
              {"crop_fraction", m.preprocessing.crop_fraction}}},
            {"split_fractions", {{"train", m.fractions.train}, {"val", m.fractions.val}, {"test", m.fractions.test}}},
            {"skipped", skipped},
            {"extra", m.extra}};
  return j.dump(2) + "\n";
}

void parse_header(const std::string& text, DatasetManifest& m) {
  try {
    const json j = json::parse(text);
    m.backend_fingerprint = j.at("backend_fingerprint").get<std::string>();
    if (m.backend_fingerprint.empty()) throw InputError("manifest header lacks a backend fingerprint");
    m.created_at = j.value("created_at", "");
    m.tool_version = j.value("tool_version", "");
    m.seed = j.value("seed", std::uint64_t{0});
    const json& p = j.at("preprocessing");
    m.preprocessing.resolution = p.at("resolution").get<int>();
    m.preprocessing.circular_crop = p.value("circular_crop", false);
    m.preprocessing.crop_fraction = p.value("crop_fraction", 1.0);
    const json& f = j.at("split_fractions");
    m.fractions = {f.at("train").get<double>(), f.at("val").get<double>(), f.at("test").get<double>()};
    m.skipped.clear();
    for (const auto& s : j.value("skipped", json::array())) {
      m.skipped.push_back({s.at("file").get<std::string>(), s.at("reason").get<std::string>()});
    }
    m.extra = j.value("extra", json::object());
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed manifest header: ") + e.what());
  }
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out << text;
    if (!out.flush()) throw InputError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_manifest(const DatasetManifest& manifest, const fs::path& dir) {
  write_text_atomic(dir / kManifestRecords, serialize_records(manifest.records));
  write_text_atomic(dir / kManifestHeader, serialize_header(manifest));
}

DatasetManifest read_manifest(const fs::path& dir) {
  if (!fs::exists(dir / kManifestHeader)) throw InputError("no manifest header in " + dir.string());
  DatasetManifest m;
  m.root = dir;
  parse_header(read_text(dir / kManifestHeader), m);
  m.records = parse_records(read_text(dir / kManifestRecords));
  std::set<std::string> ids;
  for (const auto& r : m.records) {
    if (!ids.insert(r.id).second) throw InputError("duplicate record id '" + r.id + "' in manifest");
  }
  return m;
}

std::vector<Split> assign_splits(const std::vector<std::string>& ids, const SplitFractions& fractions,
                                 std::uint64_t seed) {
  validate(fractions);
  const std::size_t n = ids.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  const std::string salt = std::to_string(seed) + "#";
  std::vector<std::uint64_t> keys(n);
  for (std::size_t i = 0; i < n; ++i) keys[i] = mix64(fnv1a(salt + ids[i]));
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return keys[a] != keys[b] ? keys[a] < keys[b] : ids[a] < ids[b];
  });
  const auto n_train = std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(fractions.train * n)));
  const auto n_val = std::min<std::size_t>(n - n_train, static_cast<std::size_t>(std::llround(fractions.val * n)));
  std::vector<Split> splits(n, Split::test);
  for (std::size_t rank = 0; rank < n; ++rank) {
    splits[order[rank]] = rank < n_train ? Split::train : (rank < n_train + n_val ? Split::val : Split::test);
  }
  return splits;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

DatasetManifest build_paired_dataset(const fs::path& source_dir, const fs::path& out_dir,
                                     const BackendConfig& backend, const Preprocessing& preprocessing,
                                     const SplitFractions& fractions, std::uint64_t seed, SourceTag tag) {
  validate(fractions);
  if (preprocessing.resolution < kMinImageSide) throw ConfigError("resolution must be at least 32");
  if (!fs::is_directory(source_dir)) throw InputError("source directory not found: " + source_dir.string());

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(source_dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  // Stem collisions (a.png, a.jpg) fall back to the full file name.
  std::map<std::string, int> stem_count;
  for (const auto& f : files) ++stem_count[f.stem().string()];

  struct Outcome {
    std::optional<ImagePair> pair;
    std::string reason;
  };
  std::vector<Outcome> outcomes(files.size());
  parallel_for(files.size(), backend.max_concurrency, [&](std::size_t i) {
    const fs::path& file = files[i];
    const std::string id = stem_count[file.stem().string()] > 1 ? file.filename().string() : file.stem().string();
    try {
      RgbImage rgb = png::read_rgb(file);
      rgb = resize_bilinear(rgb, preprocessing.resolution, preprocessing.resolution);
      if (preprocessing.circular_crop) rgb = circular_crop(rgb, preprocessing.crop_fraction);
      const DepthImage depth = estimate_depth(rgb, backend);
      ImagePair pair;
      pair.id = id;
      pair.input_depth = "depth/" + id + ".png";
      pair.target_rgb = "target/" + id + ".png";
      pair.source_tag = tag;
      png::write_depth(out_dir / pair.input_depth, depth);
      png::write_rgb(out_dir / pair.target_rgb, rgb);
      outcomes[i].pair = std::move(pair);
    } catch (const BackendError& e) {
      outcomes[i].reason = std::string(e.what()) + (e.diagnostics().empty() ? "" : ": " + e.diagnostics());
    } catch (const std::exception& e) {
      outcomes[i].reason = e.what();
    }
  });

  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.preprocessing = preprocessing;
  manifest.fractions = fractions;
  manifest.seed = seed;
  manifest.backend_fingerprint = fingerprint(backend);
  manifest.created_at = utc_timestamp();
  manifest.tool_version = kToolVersion;
  manifest.extra = {{"builder", "paired"}, {"source_dir", fs::absolute(source_dir).string()}};
  for (std::size_t i = 0; i < files.size(); ++i) {
    if (outcomes[i].pair) {
      manifest.records.push_back(*outcomes[i].pair);
    } else {
      spdlog::warn("skipping {}: {}", files[i].filename().string(), outcomes[i].reason);
      manifest.skipped.push_back({files[i].filename().string(), outcomes[i].reason});
    }
  }
  if (manifest.records.empty()) throw InputError("no image pairs could be built from " + source_dir.string());

  std::vector<std::string> ids;
  for (const auto& r : manifest.records) ids.push_back(r.id);
  const auto splits = assign_splits(ids, fractions, seed);
  for (std::size_t i = 0; i < splits.size(); ++i) manifest.records[i].split = splits[i];
  write_manifest(manifest, out_dir);
  return manifest;
}

void validate(const SceneRanges& r) {
  if (r.height < kMinImageSide || r.width < kMinImageSide) throw ParameterError("scene size must be at least 32");
  if (r.min_lumens < 1 || r.max_lumens > 3 || r.min_lumens > r.max_lumens) {
    throw ParameterError("lumen count range must lie within [1, 3]");
  }
  if (!(r.min_radius >= 1.0) || r.min_radius > r.max_radius) throw ParameterError("invalid radius range");
  if (2.0 * r.max_radius + 4.0 > std::min(r.height, r.width)) throw ParameterError("radius too large for the scene");
  if (!(r.min_amplitude > 0.0) || r.min_amplitude > r.max_amplitude) throw ParameterError("invalid amplitude range");
  if (r.noise_amplitude < 0.0 || r.background_amplitude < 0.0) throw ParameterError("amplitudes must be >= 0");
  if (!(r.separation_factor >= 1.0)) throw ParameterError("separation_factor must be >= 1");
}

json to_json(const SceneRanges& r) {
  return {{"height", r.height},
          {"width", r.width},
          {"min_lumens", r.min_lumens},
          {"max_lumens", r.max_lumens},
          {"min_radius", r.min_radius},
          {"max_radius", r.max_radius},
          {"min_amplitude", r.min_amplitude},
          {"max_amplitude", r.max_amplitude},
          {"noise_amplitude", r.noise_amplitude},
          {"background_amplitude", r.background_amplitude},
          {"separation_factor", r.separation_factor}};
}

SceneRanges scene_ranges_from_json(const json& j) {
  SceneRanges r;
  r.height = j.value("height", r.height);
  r.width = j.value("width", r.width);
  r.min_lumens = j.value("min_lumens", r.min_lumens);
  r.max_lumens = j.value("max_lumens", r.max_lumens);
  r.min_radius = j.value("min_radius", r.min_radius);
  r.max_radius = j.value("max_radius", r.max_radius);
  r.min_amplitude = j.value("min_amplitude", r.min_amplitude);
  r.max_amplitude = j.value("max_amplitude", r.max_amplitude);
  r.noise_amplitude = j.value("noise_amplitude", r.noise_amplitude);
  r.background_amplitude = j.value("background_amplitude", r.background_amplitude);
  r.separation_factor = j.value("separation_factor", r.separation_factor);
  return r;
}

namespace {

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

SceneParams sample_scene_params(const SceneRanges& ranges, std::mt19937_64& rng) {
  validate(ranges);
  SceneParams params;
  params.height = ranges.height;
  params.width = ranges.width;
  params.noise_amplitude = ranges.noise_amplitude;
  params.background_amplitude = ranges.background_amplitude;
  const int span = ranges.max_lumens - ranges.min_lumens + 1;
  const int count = ranges.min_lumens + static_cast<int>(rng() % static_cast<std::uint64_t>(span));

  for (int attempt = 0; attempt < 2000; ++attempt) {
    params.lumens.clear();
    bool ok = true;
    for (int i = 0; i < count && ok; ++i) {
      Lumen l;
      l.radius = ranges.min_radius + unit(rng) * (ranges.max_radius - ranges.min_radius);
      l.amplitude = ranges.min_amplitude + unit(rng) * (ranges.max_amplitude - ranges.min_amplitude);
      const int margin = static_cast<int>(std::ceil(l.radius)) + 1;
      l.row = margin + static_cast<int>(unit(rng) * (ranges.height - 2 * margin));
      l.col = margin + static_cast<int>(unit(rng) * (ranges.width - 2 * margin));
      for (const Lumen& other : params.lumens) {
        if (std::hypot(l.row - other.row, l.col - other.col) < ranges.separation_factor * (l.radius + other.radius)) {
          ok = false;
          break;
        }
      }
      params.lumens.push_back(l);
    }
    if (ok) return params;
  }
  throw ParameterError("cannot place " + std::to_string(count) + " separated lumens; widen the scene or shrink radii");
}

DatasetManifest build_synthetic_dataset(int n, const SceneRanges& ranges, const SplitFractions& fractions,
                                        std::uint64_t seed, const fs::path& out_dir) {
  if (n < 1) throw ParameterError("synthetic dataset needs n >= 1");
  validate(ranges);
  validate(fractions);

  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.preprocessing.resolution = ranges.height;
  manifest.fractions = fractions;
  manifest.seed = seed;
  BackendConfig synthetic;
  manifest.backend_fingerprint = fingerprint(synthetic);
  manifest.created_at = utc_timestamp();
  manifest.tool_version = kToolVersion;
  manifest.extra = {{"builder", "synthetic"}, {"scene_ranges", to_json(ranges)}};

  json scene_log = json::array();
  for (int i = 0; i < n; ++i) {
    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(i) + 1);
    const SceneParams params = sample_scene_params(ranges, rng);
    const std::uint64_t scene_seed = rng();
    const std::uint64_t style_seed = rng();
    const SyntheticScene scene = generate_synthetic_scene(params, scene_seed);
    const RgbImage target = render_pseudo_target(scene, style_seed);

    char id[32];
    std::snprintf(id, sizeof id, "scene_%05d", i);
    ImagePair pair;
    pair.id = id;
    pair.input_depth = std::string("depth/") + id + ".png";
    pair.target_rgb = std::string("target/") + id + ".png";
    pair.truth_mask = std::string("mask/") + id + ".png";
    pair.source_tag = SourceTag::synthetic;
    png::write_depth(out_dir / pair.input_depth, scene.depth);
    png::write_rgb(out_dir / pair.target_rgb, target);
    png::write_mask(out_dir / *pair.truth_mask, scene.truth_mask);
    manifest.records.push_back(pair);

    json lumens = json::array();
    for (const Lumen& l : params.lumens) {
      lumens.push_back({{"row", l.row}, {"col", l.col}, {"radius", l.radius}, {"amplitude", l.amplitude}});
    }
    scene_log.push_back({{"id", id}, {"scene_seed", scene_seed}, {"style_seed", style_seed}, {"lumens", lumens}});
  }
  manifest.extra["scenes"] = scene_log;

  std::vector<std::string> ids;
  for (const auto& r : manifest.records) ids.push_back(r.id);
  const auto splits = assign_splits(ids, fractions, seed);
  for (std::size_t i = 0; i < splits.size(); ++i) manifest.records[i].split = splits[i];
  write_manifest(manifest, out_dir);
  return manifest;
}

LoadedPair load_pair(const DatasetManifest& manifest, const ImagePair& record) {
  LoadedPair pair{png::read_depth(manifest.resolve(record.input_depth)), png::read_rgb(manifest.resolve(record.target_rgb))};
  if (pair.depth.height != pair.target.height || pair.depth.width != pair.target.width) {
    throw InputError("record '" + record.id + "': depth and target shapes differ");
  }
  return pair;
}

}  // namespace bsynth
