#pragma once

#include <cstdint>

#include "msdm/checkpoint.hpp"
#include "msdm/layers.hpp"
#include "msdm/rng.hpp"

namespace msdm {

struct VaeConfig {
  std::size_t image_channels = 3;
  std::size_t ch1 = 16;
  std::size_t ch2 = 32;
  std::size_t latent_channels = 4;
  static constexpr std::size_t kReduction = 4;  // two 2x poolings
};

/// Convolutional VAE compressing [3 x H x W] images in [-1, 1] to
/// [C_z x H/4 x W/4] latents. The decoder ends in tanh.
class Vae {
 public:
  struct Encoded {
    Tensor mean;
    Tensor logvar;
    Tensor z;
  };

  Vae(VaeConfig config, std::uint64_t seed);

  Encoded encode(const Tensor& image, Rng& rng) const;
  Tensor encode_mean(const Tensor& image) const;
  Tensor decode(const Tensor& latent) const;

  const VaeConfig& config() const { return config_; }
  Shape latent_shape(std::size_t h, std::size_t w) const;
  NamedTensors parameters() const;

 private:
  std::pair<Tensor, Tensor> encode_moments(const Tensor& image) const;

  VaeConfig config_;
  nn::Conv2d enc1_, enc2_, enc3_, enc_mean_, enc_logvar_;
  nn::Conv2d dec1_, dec2_, dec3_, dec_out_;
};

// z = mean + exp(logvar / 2) * xi, xi ~ N(0, I).
Tensor reparameterize(const Tensor& mean, const Tensor& logvar, Rng& rng);

// 1/2 * sum(exp(logvar) + mean^2 - 1 - logvar) / numel
Tensor kl_divergence(const Tensor& mean, const Tensor& logvar);

// MSE(x, x_hat) + kl_weight * KL
Tensor vae_loss(const Tensor& x, const Tensor& mean, const Tensor& logvar, const Tensor& x_hat, double kl_weight);

}  // namespace msdm
