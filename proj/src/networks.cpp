#include "bronchosynth/networks.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "bronchosynth/errors.hpp"

namespace bsynth {

void validate(const GeneratorConfig& config) {
  if (config.base_width < 8) throw ConfigError("generator base_width must be >= 8");
  if (config.num_downsamples < 2) throw ConfigError("generator num_downsamples must be >= 2");
  if (config.num_residual_blocks < 0 || config.local_residual_blocks < 0) {
    throw ConfigError("residual block counts must be >= 0");
  }
}

void validate(const DiscriminatorConfig& config) {
  if (config.base_width < 4) throw ConfigError("discriminator base_width must be >= 4");
  if (config.num_layers < 1) throw ConfigError("discriminator num_layers must be >= 1");
}

double ParameterFactory::normal() {
  // splitmix64 feeding Box-Muller keeps initialization identical across
  // standard libraries.
  auto next = [this] {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return static_cast<double>((z ^ (z >> 31)) >> 11) * 0x1.0p-53;
  };
  const double u1 = std::max(next(), 1e-300);
  const double u2 = next();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Conv ParameterFactory::conv(int in, int out, int kernel, int stride, int pad) {
  ag::Tensor w(out, in, kernel, kernel);
  for (float& v : w.data) v = static_cast<float>(0.02 * normal());
  Conv c{ag::parameter(std::move(w)), ag::parameter(ag::Tensor(out, 1, 1, 1)), stride, pad};
  params_.push_back(c.weight);
  params_.push_back(c.bias);
  return c;
}

namespace {

ag::Var norm_relu(const ag::Var& x) { return ag::relu(ag::instance_norm(x)); }

}  // namespace

Generator::Trunk Generator::build_trunk(ParameterFactory& factory, int in_channels, int width, int downsamples,
                                        int blocks) {
  Trunk trunk;
  trunk.stem = factory.conv(in_channels, width, 7, 1, 3);
  int ch = width;
  for (int i = 0; i < downsamples; ++i, ch *= 2) trunk.down.push_back(factory.conv(ch, ch * 2, 3, 2, 1));
  for (int i = 0; i < blocks; ++i) {
    ResBlock block;
    block.first = factory.conv(ch, ch, 3, 1, 1);
    block.second = factory.conv(ch, ch, 3, 1, 1);
    trunk.blocks.push_back(block);
  }
  for (int i = 0; i < downsamples; ++i, ch /= 2) trunk.up.push_back(factory.conv(ch, ch / 2, 3, 1, 1));
  return trunk;
}

ag::Var Generator::run_block(const ResBlock& block, const ag::Var& x) {
  ag::Var y = norm_relu(block.first(x));
  y = ag::instance_norm(block.second(y));
  return ag::add(x, y);
}

ag::Var Generator::run_trunk(const Trunk& trunk, ag::Var x) const {
  x = norm_relu(trunk.stem(x));
  for (const Conv& c : trunk.down) x = norm_relu(c(x));
  for (const ResBlock& b : trunk.blocks) x = run_block(b, x);
  for (const Conv& c : trunk.up) x = norm_relu(c(ag::upsample2(x)));
  return x;
}

Generator::Generator(const GeneratorConfig& config, std::uint64_t seed) : config_(config) {
  validate(config);
  ParameterFactory factory(seed);
  if (!config.use_local_enhancer) {
    global_ = build_trunk(factory, 1, config.base_width, config.num_downsamples, config.num_residual_blocks);
    head_ = factory.conv(config.base_width, 3, 7, 1, 3);
  } else {
    const int wide = 2 * config.base_width;
    global_ = build_trunk(factory, 1, wide, config.num_downsamples, config.num_residual_blocks);
    local_stem_ = factory.conv(1, config.base_width, 7, 1, 3);
    local_down_ = factory.conv(config.base_width, wide, 3, 2, 1);
    for (int i = 0; i < config.local_residual_blocks; ++i) {
      ResBlock block;
      block.first = factory.conv(wide, wide, 3, 1, 1);
      block.second = factory.conv(wide, wide, 3, 1, 1);
      local_blocks_.push_back(block);
    }
    local_up_ = factory.conv(wide, config.base_width, 3, 1, 1);
    head_ = factory.conv(config.base_width, 3, 7, 1, 3);
  }
  params_ = factory.parameters();
}

void Generator::check_input(int height, int width) const {
  const int factor = (1 << config_.num_downsamples) * (config_.use_local_enhancer ? 2 : 1);
  if (height < factor || width < factor || height % factor != 0 || width % factor != 0) {
    throw ConfigError("generator input " + std::to_string(height) + "x" + std::to_string(width) +
                      " must be a positive multiple of " + std::to_string(factor));
  }
}

ag::Var Generator::forward(const ag::Var& depth) const {
  if (depth->value.c != 1) throw InputError("generator expects a single-channel depth input");
  check_input(depth->value.h, depth->value.w);
  const ag::Var x = ag::affine(depth, 2.0f, -1.0f);
  ag::Var features;
  if (!config_.use_local_enhancer) {
    features = run_trunk(global_, x);
  } else {
    const ag::Var coarse = run_trunk(global_, ag::avg_pool2(x));
    ag::Var local = norm_relu(local_stem_(x));
    local = norm_relu(local_down_(local));
    ag::Var y = ag::add(local, coarse);
    for (const ResBlock& b : local_blocks_) y = run_block(b, y);
    features = norm_relu(local_up_(ag::upsample2(y)));
  }
  return ag::tanh(head_(features));
}

ag::Tensor Generator::infer(const ag::Tensor& depth) const {
  ag::NoGradGuard guard;
  return forward(ag::constant(depth))->value;
}

Discriminator::Discriminator(const DiscriminatorConfig& config, int in_channels, ParameterFactory& factory) {
  int nf = config.base_width;
  layers_.push_back(factory.conv(in_channels, nf, 4, 2, 2));
  for (int i = 1; i < config.num_layers; ++i) {
    const int next = std::min(nf * 2, 512);
    layers_.push_back(factory.conv(nf, next, 4, 2, 2));
    nf = next;
  }
  const int next = std::min(nf * 2, 512);
  layers_.push_back(factory.conv(nf, next, 4, 1, 2));
  layers_.push_back(factory.conv(next, 1, 4, 1, 2));
}

DiscriminatorOutput Discriminator::forward(const ag::Var& input) const {
  DiscriminatorOutput out;
  out.input_height = input->value.h;
  out.input_width = input->value.w;
  ag::Var x = input;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    x = layers_[i](x);
    if (i > 0) x = ag::instance_norm(x);
    x = ag::leaky_relu(x, 0.2f);
    out.features.push_back(x);
  }
  out.score = layers_.back()(x);
  return out;
}

int Discriminator::score_side(int side, int num_layers) {
  // kernel 4, padding 2: stride-2 layers map s -> s/2 + 1, stride-1 layers s -> s + 1
  for (int i = 0; i < num_layers; ++i) side = side / 2 + 1;
  return side + 2;
}

DiscriminatorBank::DiscriminatorBank(const DiscriminatorConfig& config, GanVariant variant, std::uint64_t seed)
    : config_(config), variant_(variant) {
  validate(config);
  ParameterFactory factory(seed);
  for (int k = 0; k < kNumDiscriminators; ++k) members_.emplace_back(config, 4, factory);
  params_ = factory.parameters();
}

std::array<DiscriminatorOutput, kNumDiscriminators> DiscriminatorBank::forward(const ag::Var& depth,
                                                                              const ag::Var& image) const {
  const auto& d = depth->value;
  const auto& y = image->value;
  if (d.n != y.n || d.h != y.h || d.w != y.w || d.c != 1 || y.c != 3) {
    throw InputError("discriminator inputs are misaligned: depth " + std::to_string(d.h) + "x" + std::to_string(d.w) +
                     ", image " + std::to_string(y.h) + "x" + std::to_string(y.w));
  }
  std::array<DiscriminatorOutput, kNumDiscriminators> outputs;
  ag::Var pair = ag::concat_channels(ag::affine(depth, 2.0f, -1.0f), image);
  for (int k = 0; k < kNumDiscriminators; ++k) {
    if (k > 0) pair = ag::avg_pool2(pair);
    outputs[k] = members_[k].forward(pair);
    if (variant_ == GanVariant::log) outputs[k].score = ag::sigmoid(outputs[k].score);
  }
  return outputs;
}

Adam::Adam(std::vector<ag::Var> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p->value.size(), 0.0f);
    v_.emplace_back(p->value.size(), 0.0f);
  }
}

void Adam::zero_grad() {
  for (const auto& p : params_) {
    if (p->grad.size()) std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0f);
  }
}

void Adam::step() {
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double lr = config_.learning_rate;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p->grad.size() != p->value.size()) continue;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < m.size(); ++j) {
      const double g = p->grad.data[j];
      m[j] = static_cast<float>(b1 * m[j] + (1.0 - b1) * g);
      v[j] = static_cast<float>(b2 * v[j] + (1.0 - b2) * g * g);
      const double mh = m[j] / c1, vh = v[j] / c2;
      p->value.data[j] -= static_cast<float>(lr * mh / (std::sqrt(vh) + config_.epsilon));
    }
  }
}

void set_requires_grad(const std::vector<ag::Var>& params, bool enabled) {
  for (const auto& p : params) p->requires_grad = enabled;
}

}  // namespace bsynth
