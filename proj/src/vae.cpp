#include "msdm/vae.hpp"

#include "msdm/errors.hpp"
#include "msdm/ops.hpp"

namespace msdm {

Vae::Vae(VaeConfig config, std::uint64_t seed) : config_(config) {
  Rng rng(seed);
  const auto c = config_;
  enc1_ = nn::Conv2d::make("vae.enc1", c.image_channels, c.ch1, 3, rng);
  enc2_ = nn::Conv2d::make("vae.enc2", c.ch1, c.ch2, 3, rng);
  enc3_ = nn::Conv2d::make("vae.enc3", c.ch2, c.ch2, 3, rng);
  enc_mean_ = nn::Conv2d::make("vae.enc_mean", c.ch2, c.latent_channels, 3, rng);
  enc_logvar_ = nn::Conv2d::make("vae.enc_logvar", c.ch2, c.latent_channels, 3, rng);
  // Start with a small posterior variance so early reconstructions are not
  // drowned in sampling noise.
  for (auto& w : enc_logvar_.weight.mutable_data()) w *= 0.1;
  for (auto& b : enc_logvar_.bias.mutable_data()) b = -4.0;
  dec1_ = nn::Conv2d::make("vae.dec1", c.latent_channels, c.ch2, 3, rng);
  dec2_ = nn::Conv2d::make("vae.dec2", c.ch2, c.ch2, 3, rng);
  dec3_ = nn::Conv2d::make("vae.dec3", c.ch2, c.ch1, 3, rng);
  dec_out_ = nn::Conv2d::make("vae.dec_out", c.ch1, c.image_channels, 3, rng);
}

Shape Vae::latent_shape(std::size_t h, std::size_t w) const {
  if (h % VaeConfig::kReduction != 0 || w % VaeConfig::kReduction != 0) {
    throw DimensionError("vae: image extent " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by " + std::to_string(VaeConfig::kReduction));
  }
  return {config_.latent_channels, h / VaeConfig::kReduction, w / VaeConfig::kReduction};
}

std::pair<Tensor, Tensor> Vae::encode_moments(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != config_.image_channels) {
    throw DimensionError("vae: expected [" + std::to_string(config_.image_channels) + " x H x W] image, got " +
                         shape_str(image.shape()));
  }
  latent_shape(image.dim(1), image.dim(2));
  Tensor h = ops::silu(enc1_.forward(image));
  h = ops::avg_pool2x(h);
  h = ops::silu(enc2_.forward(h));
  h = ops::avg_pool2x(h);
  h = ops::silu(enc3_.forward(h));
  return {enc_mean_.forward(h), enc_logvar_.forward(h)};
}

Vae::Encoded Vae::encode(const Tensor& image, Rng& rng) const {
  auto [mean, logvar] = encode_moments(image);
  Tensor z = reparameterize(mean, logvar, rng);
  return Encoded{std::move(mean), std::move(logvar), std::move(z)};
}

Tensor Vae::encode_mean(const Tensor& image) const { return encode_moments(image).first; }

Tensor Vae::decode(const Tensor& latent) const {
  if (latent.rank() != 3 || latent.dim(0) != config_.latent_channels) {
    throw DimensionError("vae: latent " + shape_str(latent.shape()) + " does not match " +
                         std::to_string(config_.latent_channels) + " latent channels");
  }
  Tensor h = ops::silu(dec1_.forward(latent));
  h = ops::upsample_nearest2x(h);
  h = ops::silu(dec2_.forward(h));
  h = ops::upsample_nearest2x(h);
  h = ops::silu(dec3_.forward(h));
  return ops::tanh(dec_out_.forward(h));
}

NamedTensors Vae::parameters() const {
  NamedTensors out;
  for (const auto* c : {&enc1_, &enc2_, &enc3_, &enc_mean_, &enc_logvar_, &dec1_, &dec2_, &dec3_, &dec_out_}) {
    c->collect(out);
  }
  return out;
}

Tensor reparameterize(const Tensor& mean, const Tensor& logvar, Rng& rng) {
  if (mean.shape() != logvar.shape()) throw DimensionError("reparameterize: mean/logvar shape mismatch");
  std::vector<double> xi(mean.numel());
  for (auto& v : xi) v = rng.normal();
  const Tensor noise = Tensor::from(mean.shape(), std::move(xi));
  return ops::add(mean, ops::mul(ops::exp(ops::scale(logvar, 0.5)), noise));
}

Tensor kl_divergence(const Tensor& mean, const Tensor& logvar) {
  if (mean.shape() != logvar.shape()) throw DimensionError("kl_divergence: shape mismatch");
  const Tensor terms = ops::sub(ops::add_scalar(ops::add(ops::exp(logvar), ops::square(mean)), -1.0), logvar);
  return ops::scale(ops::mean(terms), 0.5);
}

Tensor vae_loss(const Tensor& x, const Tensor& mean, const Tensor& logvar, const Tensor& x_hat, double kl_weight) {
  if (x.shape() != x_hat.shape()) throw DimensionError("vae_loss: reconstruction shape mismatch");
  return ops::add(ops::mse_loss(x_hat, x), ops::scale(kl_divergence(mean, logvar), kl_weight));
}

}  // namespace msdm
