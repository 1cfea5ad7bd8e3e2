#include "bronchosynth/config.hpp"

#include <fstream>

#include "bronchosynth/errors.hpp"
#include "bronchosynth/hash.hpp"

using nlohmann::json;

namespace bsynth {

void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (c.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (c.checkpoint_every < 1 || c.eval_every < 1) throw ConfigError("checkpoint and eval cadence must be >= 1");
  if (c.val_limit < 0) throw ConfigError("train.val_limit must be >= 0");
  for (const AdamConfig* a : {&c.optim_g, &c.optim_d}) {
    if (!(a->learning_rate > 0.0)) throw ConfigError("learning rates must be positive");
    if (a->beta1 < 0.0 || a->beta1 >= 1.0 || a->beta2 < 0.0 || a->beta2 >= 1.0) {
      throw ConfigError("optimizer betas must lie in [0, 1)");
    }
    if (!(a->epsilon > 0.0)) throw ConfigError("optim.epsilon must be positive");
  }
  validate(c.generator);
  validate(c.discriminator);
  validate(c.objective());
  if (c.backend.max_concurrency < 1) throw ConfigError("backend.max_concurrency must be >= 1");
}

json to_json(const BackendConfig& c) {
  return {{"kind", to_string(c.kind)},
          {"blur_sigma", c.blur_sigma},
          {"command", c.command},
          {"inverse_output", c.inverse_output},
          {"max_concurrency", c.max_concurrency}};
}

json to_json(const SegParams& c) {
  return {{"extrema_neighborhood_radius", c.extrema_neighborhood_radius},
          {"nms_min_distance", c.nms_min_distance},
          {"peak_min_prominence", c.peak_min_prominence},
          {"kmeans_max_iters", c.kmeans_max_iters},
          {"soft_temperature", c.soft_temperature}};
}

json to_json(const GeneratorConfig& c) {
  return {{"base_width", c.base_width},
          {"num_downsamples", c.num_downsamples},
          {"num_residual_blocks", c.num_residual_blocks},
          {"use_local_enhancer", c.use_local_enhancer},
          {"local_residual_blocks", c.local_residual_blocks}};
}

json to_json(const DiscriminatorConfig& c) { return {{"base_width", c.base_width}, {"num_layers", c.num_layers}}; }

json to_json(const LossWeights& c) {
  return {{"lambda_fm", c.lambda_fm},
          {"lambda_dice", c.lambda_dice},
          {"epsilon", c.epsilon},
          {"gan_variant", to_string(c.gan_variant)}};
}

json to_json(const TrainConfig& c) {
  json loss = to_json(c.weights);
  loss["dice_mode"] = to_string(c.dice_mode);
  return {{"seed", c.seed},
          {"backend", to_json(c.backend)},
          {"seg", to_json(c.seg)},
          {"generator", to_json(c.generator)},
          {"discriminator", to_json(c.discriminator)},
          {"loss", loss},
          {"optim",
           {{"lr_g", c.optim_g.learning_rate},
            {"lr_d", c.optim_d.learning_rate},
            {"beta1", c.optim_g.beta1},
            {"beta2", c.optim_g.beta2},
            {"epsilon", c.optim_g.epsilon}}},
          {"train",
           {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"checkpoint_every", c.checkpoint_every},
            {"eval_every", c.eval_every},
            {"val_limit", c.val_limit}}}};
}

json to_json(const GlobalConfig& c) {
  json j = to_json(c.train);
  j["data"] = {{"resolution", c.preprocessing.resolution},
               {"circular_crop", c.preprocessing.circular_crop},
               {"crop_fraction", c.preprocessing.crop_fraction},
               {"split", {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}}}};
  j["scenes"] = to_json(c.scenes);
  j["metrics"] = {{"embedder", c.metrics.embedder == EmbedderMode::command ? "command" : "identity-downsample"},
                  {"embed_command", c.metrics.embed_command},
                  {"montage_count", c.metrics.montage_count}};
  return j;
}

json default_config_json() {
  json j = to_json(GlobalConfig{});
  // Resolved from the backend when the config is parsed.
  j["loss"]["dice_mode"] = "auto";
  return j;
}

namespace {

template <typename T>
T get(const json& j, const char* section, const char* key) {
  try {
    return j.at(section).at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config ") + section + "." + key + ": " + e.what());
  }
}

void check_known_keys(const json& reference, const json& given, const std::string& path) {
  for (const auto& [key, value] : given.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!reference.contains(key)) throw ConfigError("unknown config key '" + here + "'");
    if (reference[key].is_object()) {
      if (!value.is_object()) throw ConfigError("config key '" + here + "' must be an object");
      check_known_keys(reference[key], value, here);
    }
  }
}

}  // namespace

BackendConfig backend_config_from_json(const json& j) {
  const json root = {{"backend", j}};
  BackendConfig c;
  c.kind = backend_kind_from_string(get<std::string>(root, "backend", "kind"));
  c.blur_sigma = get<double>(root, "backend", "blur_sigma");
  c.command = get<std::string>(root, "backend", "command");
  c.inverse_output = get<bool>(root, "backend", "inverse_output");
  c.max_concurrency = get<int>(root, "backend", "max_concurrency");
  return c;
}

SegParams seg_params_from_json(const json& j) {
  const json root = {{"seg", j}};
  SegParams c;
  c.extrema_neighborhood_radius = get<int>(root, "seg", "extrema_neighborhood_radius");
  c.nms_min_distance = get<double>(root, "seg", "nms_min_distance");
  c.peak_min_prominence = get<double>(root, "seg", "peak_min_prominence");
  c.kmeans_max_iters = get<int>(root, "seg", "kmeans_max_iters");
  c.soft_temperature = get<double>(root, "seg", "soft_temperature");
  validate(c);
  return c;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config seed: ") + e.what());
  }
  c.backend = backend_config_from_json(j.at("backend"));
  c.seg = seg_params_from_json(j.at("seg"));
  c.generator.base_width = get<int>(j, "generator", "base_width");
  c.generator.num_downsamples = get<int>(j, "generator", "num_downsamples");
  c.generator.num_residual_blocks = get<int>(j, "generator", "num_residual_blocks");
  c.generator.use_local_enhancer = get<bool>(j, "generator", "use_local_enhancer");
  c.generator.local_residual_blocks = get<int>(j, "generator", "local_residual_blocks");
  c.discriminator.base_width = get<int>(j, "discriminator", "base_width");
  c.discriminator.num_layers = get<int>(j, "discriminator", "num_layers");
  c.weights.lambda_fm = get<double>(j, "loss", "lambda_fm");
  c.weights.lambda_dice = get<double>(j, "loss", "lambda_dice");
  c.weights.epsilon = get<double>(j, "loss", "epsilon");
  c.weights.gan_variant = gan_variant_from_string(get<std::string>(j, "loss", "gan_variant"));
  const auto mode = get<std::string>(j, "loss", "dice_mode");
  if (mode == "auto") {
    c.dice_mode = c.backend.kind == BackendKind::synthetic ? DiceMode::differentiable : DiceMode::score_only;
  } else {
    c.dice_mode = dice_mode_from_string(mode);
  }
  c.optim_g.learning_rate = get<double>(j, "optim", "lr_g");
  c.optim_d.learning_rate = get<double>(j, "optim", "lr_d");
  c.optim_g.beta1 = c.optim_d.beta1 = get<double>(j, "optim", "beta1");
  c.optim_g.beta2 = c.optim_d.beta2 = get<double>(j, "optim", "beta2");
  c.optim_g.epsilon = c.optim_d.epsilon = get<double>(j, "optim", "epsilon");
  c.epochs = get<int>(j, "train", "epochs");
  c.batch_size = get<int>(j, "train", "batch_size");
  c.checkpoint_every = get<int>(j, "train", "checkpoint_every");
  c.eval_every = get<int>(j, "train", "eval_every");
  c.val_limit = get<int>(j, "train", "val_limit");
  validate(c);
  return c;
}

GlobalConfig global_config_from_json(const json& j) {
  GlobalConfig c;
  c.train = train_config_from_json(j);
  c.preprocessing.resolution = get<int>(j, "data", "resolution");
  c.preprocessing.circular_crop = get<bool>(j, "data", "circular_crop");
  c.preprocessing.crop_fraction = get<double>(j, "data", "crop_fraction");
  const json split = j.at("data").at("split");
  c.split = {split.at("train").get<double>(), split.at("val").get<double>(), split.at("test").get<double>()};
  validate(c.split);
  try {
    c.scenes = scene_ranges_from_json(j.at("scenes"));
    validate(c.scenes);
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("scenes: ") + e.what());
  }
  const auto embedder = get<std::string>(j, "metrics", "embedder");
  if (embedder == "identity-downsample") {
    c.metrics.embedder = EmbedderMode::identity_downsample;
  } else if (embedder == "command") {
    c.metrics.embedder = EmbedderMode::command;
  } else {
    throw ConfigError("metrics.embedder must be identity-downsample or command");
  }
  c.metrics.embed_command = get<std::string>(j, "metrics", "embed_command");
  c.metrics.montage_count = get<int>(j, "metrics", "montage_count");
  if (c.metrics.embedder == EmbedderMode::command && c.metrics.embed_command.empty()) {
    throw ConfigError("metrics.embed_command is required with the command embedder");
  }
  return c;
}

json layer_config(const std::optional<std::filesystem::path>& file,
                  const std::vector<std::pair<std::string, std::string>>& overrides) {
  const json defaults = default_config_json();
  json resolved = defaults;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("cannot read config file " + file->string());
    json given;
    try {
      given = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config file " + file->string() + ": " + e.what());
    }
    if (!given.is_object()) throw ConfigError("config file must hold a JSON object");
    check_known_keys(defaults, given, "");
    resolved.merge_patch(given);
  }
  for (const auto& [key, text] : overrides) {
    std::string pointer = "/" + key;
    for (char& ch : pointer) {
      if (ch == '.') ch = '/';
    }
    const json::json_pointer ptr(pointer);
    if (!defaults.contains(ptr) || defaults[ptr].is_object()) throw ConfigError("unknown config key '" + key + "'");
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    resolved[ptr] = value;
  }
  return resolved;
}

GlobalConfig load_config(const std::optional<std::filesystem::path>& file,
                         const std::vector<std::pair<std::string, std::string>>& overrides) {
  return global_config_from_json(layer_config(file, overrides));
}

std::string config_hash(const json& resolved) { return hex_digest(resolved.dump()); }

void save_resolved_config(const json& resolved, const std::filesystem::path& dir) {
  write_text_atomic(dir / "config.resolved.json", resolved.dump(2) + "\n");
}

}  // namespace bsynth
