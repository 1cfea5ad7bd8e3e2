#include "bronchosynth/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <span>

#include "bronchosynth/dataset.hpp"
#include "bronchosynth/errors.hpp"
#include "bronchosynth/hash.hpp"
#include "bronchosynth/version.hpp"

using nlohmann::json;

namespace bsynth {

namespace {

constexpr char kMagic[8] = {'B', 'S', 'Y', 'N', 'C', 'K', 'P', 'T'};

std::uint64_t generator_seed(std::uint64_t seed) { return fnv1a("generator#" + std::to_string(seed)); }
std::uint64_t discriminator_seed(std::uint64_t seed) { return fnv1a("discriminator#" + std::to_string(seed)); }

void append(std::string& out, const void* data, std::size_t bytes) {
  out.append(static_cast<const char*>(data), bytes);
}

template <typename T>
void append_value(std::string& out, T value) {
  append(out, &value, sizeof value);
}

json sizes(const std::vector<ag::Var>& params) {
  json j = json::array();
  for (const auto& p : params) j.push_back(p->value.size());
  return j;
}

class Reader {
 public:
  Reader(const std::string& data, const std::filesystem::path& path) : data_(data), path_(path) {}

  void read(void* dst, std::size_t bytes) {
    if (pos_ + bytes > data_.size()) throw InputError("checkpoint " + path_.string() + " is truncated");
    std::memcpy(dst, data_.data() + pos_, bytes);
    pos_ += bytes;
  }
  template <typename T>
  T value() {
    T v;
    read(&v, sizeof v);
    return v;
  }
  std::size_t position() const { return pos_; }

 private:
  const std::string& data_;
  std::filesystem::path path_;
  std::size_t pos_ = 0;
};

void read_floats(Reader& in, std::span<float> dst, std::size_t expected) {
  if (dst.size() != expected) throw InputError("checkpoint tensor size mismatch");
  in.read(dst.data(), expected * sizeof(float));
}

}  // namespace

TrainingState::TrainingState(const TrainConfig& c)
    : config(c),
      generator(c.generator, generator_seed(c.seed)),
      bank(c.discriminator, c.weights.gan_variant, discriminator_seed(c.seed)),
      optim_g(generator.parameters(), c.optim_g),
      optim_d(bank.parameters(), c.optim_d) {}

void save_checkpoint(const TrainingState& state, const std::filesystem::path& path) {
  const json config = to_json(state.config);
  const Adam& optim_g = state.optim_g;
  const Adam& optim_d = state.optim_d;
  const json header = {{"tool_version", kToolVersion},
                       {"config", config},
                       {"config_hash", config_hash(config)},
                       {"epoch", state.epoch},
                       {"step", state.step},
                       {"optim_g_steps", optim_g.steps()},
                       {"optim_d_steps", optim_d.steps()},
                       {"generator_sizes", sizes(state.generator.parameters())},
                       {"discriminator_sizes", sizes(state.bank.parameters())}};
  const std::string header_text = header.dump();

  std::string out(kMagic, sizeof kMagic);
  append_value(out, kCheckpointVersion);
  append_value(out, static_cast<std::uint64_t>(header_text.size()));
  out += header_text;
  auto put = [&](std::span<const float> v) { append(out, v.data(), v.size() * sizeof(float)); };
  for (const auto& p : state.generator.parameters()) put(p->value.data);
  for (const auto& p : state.bank.parameters()) put(p->value.data);
  for (const Adam* opt : {&optim_g, &optim_d}) {
    for (const auto& m : opt->first_moments()) put(m);
    for (const auto& v : opt->second_moments()) put(v);
  }
  append_value(out, fnv1a(out));
  write_text_atomic(path, out);
}

std::unique_ptr<TrainingState> load_checkpoint(const std::filesystem::path& path) {
  const std::string data = read_text(path);
  if (data.size() < sizeof kMagic + 8 || std::memcmp(data.data(), kMagic, sizeof kMagic) != 0) {
    throw InputError(path.string() + " is not a checkpoint");
  }
  std::uint64_t stored_sum;
  std::memcpy(&stored_sum, data.data() + data.size() - 8, 8);
  if (fnv1a(std::string_view(data.data(), data.size() - 8)) != stored_sum) {
    throw InputError("checkpoint " + path.string() + " failed its checksum");
  }
  Reader in(data, path);
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  const auto version = in.value<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw InputError("checkpoint version " + std::to_string(version) + " is not supported");
  }
  const auto header_size = in.value<std::uint64_t>();
  std::string header_text(header_size, '\0');
  in.read(header_text.data(), header_size);
  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw InputError(std::string("checkpoint header: ") + e.what());
  }

  auto state = std::make_unique<TrainingState>(train_config_from_json(header.at("config")));
  state->epoch = header.at("epoch").get<int>();
  state->step = header.at("step").get<std::int64_t>();
  state->optim_g.set_steps(header.at("optim_g_steps").get<std::int64_t>());
  state->optim_d.set_steps(header.at("optim_d_steps").get<std::int64_t>());

  const auto g_sizes = header.at("generator_sizes").get<std::vector<std::size_t>>();
  const auto d_sizes = header.at("discriminator_sizes").get<std::vector<std::size_t>>();
  const auto& g_params = state->generator.parameters();
  const auto& d_params = state->bank.parameters();
  if (g_sizes.size() != g_params.size() || d_sizes.size() != d_params.size()) {
    throw InputError("checkpoint architecture does not match its config");
  }
  for (std::size_t i = 0; i < g_params.size(); ++i) read_floats(in, g_params[i]->value.data, g_sizes[i]);
  for (std::size_t i = 0; i < d_params.size(); ++i) read_floats(in, d_params[i]->value.data, d_sizes[i]);
  for (auto [opt, sz] : {std::pair{&state->optim_g, &g_sizes}, std::pair{&state->optim_d, &d_sizes}}) {
    for (std::size_t i = 0; i < sz->size(); ++i) read_floats(in, opt->first_moments()[i], (*sz)[i]);
    for (std::size_t i = 0; i < sz->size(); ++i) read_floats(in, opt->second_moments()[i], (*sz)[i]);
  }
  if (in.position() != data.size() - 8) throw InputError("checkpoint " + path.string() + " has trailing data");
  return state;
}

}  // namespace bsynth
