#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "msdm/checkpoint.hpp"
#include "msdm/layers.hpp"
#include "msdm/lora.hpp"
#include "msdm/text_embedding.hpp"

namespace msdm {

struct UnetConfig {
  std::size_t latent_channels = 4;
  std::size_t ch1 = 32;         // 8x8 level
  std::size_t ch2 = 64;         // 4x4 level
  std::size_t text_width = 32;
  std::size_t time_width = 64;
  std::size_t groups = 8;
  std::size_t attn1_width = 0;  // 0: attention runs at the feature width
  std::size_t attn2_width = 0;
  std::size_t ff_mult = 4;
  int timesteps = 100;
};

struct ResBlock {
  nn::GroupNorm norm1, norm2;
  nn::Conv2d conv1, conv2;
  nn::Linear time_proj;
  nn::Conv2d skip;  // 1x1, only when channel counts differ
  bool has_skip = false;

  static ResBlock make(const std::string& name, std::size_t in, std::size_t out, std::size_t time_width,
                       std::size_t groups, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& temb) const;
  void collect(NamedTensors& out) const;
};

/// Two-level text-conditioned noise predictor on VAE latents.
///
///   conv_in -> res1 -> attn1 (8x8) -> pool, down -> res2 -> attn2 (4x4)
///   -> upsample, up -> concat skip -> res3 -> norm, silu, conv_out
///
/// The timestep enters every residual block through a sinusoidal embedding
/// and a small MLP.
class Unet {
 public:
  Unet(UnetConfig config, std::uint64_t seed);

  // eps-hat for z_t at timestep t in 1..T.
  Tensor forward(const Tensor& z_t, int t, const TextEmbedding& text) const;

  const UnetConfig& config() const { return config_; }
  NamedTensors parameters() const;
  std::size_t parameter_count() const;

  // Names of the linear layers in the cross-attention blocks, e.g. "attn1.to_q".
  std::vector<std::string> attention_linear_names() const;
  // Weights of the given linears, named as in attention_linear_names().
  NamedTensors linear_weights(const std::vector<std::string>& names) const;
  void install_adapters(const std::vector<lora::AdapterPtr>& adapters);
  void remove_adapters();

  const nn::CrossAttentionBlock& attention(int level) const { return level == 1 ? attn1_ : attn2_; }
  nn::CrossAttentionBlock& attention(int level) { return level == 1 ? attn1_ : attn2_; }

 private:
  std::map<std::string, nn::Linear*> linear_index();

  UnetConfig config_;
  nn::Linear time1_, time2_;
  nn::Conv2d conv_in_;
  ResBlock res1_;
  nn::CrossAttentionBlock attn1_;
  nn::Conv2d down_;
  ResBlock res2_;
  nn::CrossAttentionBlock attn2_;
  nn::Conv2d up_;
  ResBlock res3_;
  nn::GroupNorm norm_out_;
  nn::Conv2d conv_out_;
};

}  // namespace msdm
