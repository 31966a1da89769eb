#include "msdm/embedders.hpp"

#include "msdm/errors.hpp"
#include "msdm/rng.hpp"
#include "msdm/tensor.hpp"
#include "msdm/vae.hpp"

namespace msdm::metrics {

namespace {

Eigen::VectorXd normalized(Eigen::VectorXd v, const char* who) {
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw NumericError(std::string(who) + ": cannot normalise embedding");
  return v / n;
}

}  // namespace

RandomProjectionEmbedder::RandomProjectionEmbedder(std::uint64_t seed) : projection_(kDim, kGrid * kGrid) {
  Rng rng(mix_seed(seed, hash_string("embedder/random-projection")));
  for (Eigen::Index i = 0; i < projection_.rows(); ++i) {
    for (Eigen::Index j = 0; j < projection_.cols(); ++j) projection_(i, j) = rng.normal();
  }
}

Eigen::VectorXd RandomProjectionEmbedder::embed(const Image& image) const {
  if (image.height % kGrid != 0 || image.width % kGrid != 0) {
    throw DimensionError("random-projection embedder: image extents must be multiples of 16");
  }
  const std::size_t fy = image.height / kGrid, fx = image.width / kGrid;
  Eigen::VectorXd gray = Eigen::VectorXd::Zero(kGrid * kGrid);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const auto* p = image.px(y, x);
      const double luma = (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) / 127.5 - 1.0;
      gray[static_cast<Eigen::Index>((y / fy) * kGrid + x / fx)] += luma;
    }
  }
  gray /= static_cast<double>(fy * fx);
  return normalized(projection_ * gray, "random-projection embedder");
}

VaeEncoderEmbedder::VaeEncoderEmbedder(const Vae& vae, std::size_t image_size) : vae_(&vae) {
  dim_ = shape_numel(vae.latent_shape(image_size, image_size));
}

Eigen::VectorXd VaeEncoderEmbedder::embed(const Image& image) const {
  NoGradScope no_grad;
  const Tensor mean = vae_->encode_mean(image_to_tensor(image));
  if (mean.numel() != dim_) throw DimensionError("vae-encoder embedder: unexpected latent size");
  Eigen::VectorXd v(static_cast<Eigen::Index>(dim_));
  for (std::size_t i = 0; i < dim_; ++i) v[static_cast<Eigen::Index>(i)] = mean[i];
  return normalized(std::move(v), "vae-encoder embedder");
}

std::unique_ptr<Embedder> make_embedder(std::string_view id, std::uint64_t root_seed, const Vae* vae,
                                        std::size_t image_size) {
  if (id == "random-projection") return std::make_unique<RandomProjectionEmbedder>(root_seed);
  if (id == "vae-encoder") {
    if (!vae) throw ConfigError("vae-encoder embedder needs a trained VAE");
    return std::make_unique<VaeEncoderEmbedder>(*vae, image_size);
  }
  throw ConfigError("unknown embedder '" + std::string(id) + "'");
}

EmbeddingSet embed_images(const std::vector<Image>& images, const Embedder& embedder, std::string source,
                          std::string prompt_id) {
  EmbeddingSet s;
  s.source = std::move(source);
  s.prompt_id = std::move(prompt_id);
  s.embeddings.resize(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(embedder.dim()));
  for (std::size_t i = 0; i < images.size(); ++i) {
    s.embeddings.row(static_cast<Eigen::Index>(i)) = embedder.embed(images[i]).transpose();
  }
  return s;
}

}  // namespace msdm::metrics
