#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "bronchosynth/autograd.hpp"
#include "bronchosynth/losses.hpp"

namespace bsynth {

struct GeneratorConfig {
  int base_width = 32;
  int num_downsamples = 3;
  int num_residual_blocks = 4;
  // Wraps the global generator in a full-resolution enhancer branch.
  bool use_local_enhancer = false;
  int local_residual_blocks = 3;
};

void validate(const GeneratorConfig& config);

struct DiscriminatorConfig {
  int base_width = 32;
  int num_layers = 3;
};

void validate(const DiscriminatorConfig& config);

struct Conv {
  ag::Var weight;
  ag::Var bias;
  int stride = 1;
  int pad = 0;

  ag::Var operator()(const ag::Var& x) const { return ag::conv2d(x, weight, bias, stride, pad); }
};

// Deterministic N(0, 0.02) weight initialization shared by both networks.
class ParameterFactory {
 public:
  explicit ParameterFactory(std::uint64_t seed) : state_(seed) {}
  Conv conv(int in, int out, int kernel, int stride, int pad);
  const std::vector<ag::Var>& parameters() const { return params_; }

 private:
  double normal();
  std::uint64_t state_;
  std::vector<ag::Var> params_;
};

// Encoder / residual / decoder translator from a 1-channel depth map in
// [0, 1] to a 3-channel image in [-1, 1] of the same size.
class Generator {
 public:
  Generator(const GeneratorConfig& config, std::uint64_t seed);

  // Throws ConfigError when H or W is not divisible by the total downsampling.
  void check_input(int height, int width) const;
  ag::Var forward(const ag::Var& depth) const;
  // Forward pass without recording a graph.
  ag::Tensor infer(const ag::Tensor& depth) const;

  const GeneratorConfig& config() const { return config_; }
  const std::vector<ag::Var>& parameters() const { return params_; }

 private:
  struct ResBlock {
    Conv first, second;
  };
  struct Trunk {
    Conv stem;
    std::vector<Conv> down;
    std::vector<ResBlock> blocks;
    std::vector<Conv> up;
  };

  Trunk build_trunk(ParameterFactory& factory, int in_channels, int width, int downsamples, int blocks);
  ag::Var run_trunk(const Trunk& trunk, ag::Var x) const;
  static ag::Var run_block(const ResBlock& block, const ag::Var& x);

  GeneratorConfig config_;
  Trunk global_;
  Conv head_;
  // Local enhancer branch (only when enabled).
  Conv local_stem_;
  Conv local_down_;
  std::vector<ResBlock> local_blocks_;
  Conv local_up_;
  std::vector<ag::Var> params_;
};

struct DiscriminatorOutput {
  std::vector<ag::Var> features;  // T intermediate activations
  ag::Var score;                  // probability (log variant) or raw (least squares)
  int input_height = 0;
  int input_width = 0;
};

// PatchGAN discriminator over a channel-concatenated (depth, image) pair.
class Discriminator {
 public:
  Discriminator(const DiscriminatorConfig& config, int in_channels, ParameterFactory& factory);

  // Returns the raw score map (no nonlinearity) and intermediate features.
  DiscriminatorOutput forward(const ag::Var& input) const;
  int feature_count() const { return static_cast<int>(layers_.size()) - 1; }
  // Side length of the score map for a square input of the given side.
  static int score_side(int input_side, int num_layers);

 private:
  std::vector<Conv> layers_;
};

// D_1, D_2, D_3 at scales 1, 1/2, 1/4.
class DiscriminatorBank {
 public:
  DiscriminatorBank(const DiscriminatorConfig& config, GanVariant variant, std::uint64_t seed);

  // depth: [N,1,H,W] in [0,1]; image: [N,3,H,W] in [-1,1].
  std::array<DiscriminatorOutput, kNumDiscriminators> forward(const ag::Var& depth, const ag::Var& image) const;

  const std::vector<ag::Var>& parameters() const { return params_; }
  const DiscriminatorConfig& config() const { return config_; }
  GanVariant variant() const { return variant_; }

 private:
  DiscriminatorConfig config_;
  GanVariant variant_;
  std::vector<Discriminator> members_;
  std::vector<ag::Var> params_;
};

struct AdamConfig {
  double learning_rate = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<ag::Var> params, AdamConfig config);

  void zero_grad();
  void step();

  std::int64_t steps() const { return steps_; }
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }
  void set_steps(std::int64_t steps) { steps_ = steps; }

 private:
  std::vector<ag::Var> params_;
  AdamConfig config_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  std::int64_t steps_ = 0;
};

void set_requires_grad(const std::vector<ag::Var>& params, bool enabled);

}  // namespace bsynth
