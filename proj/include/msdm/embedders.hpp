#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "msdm/image.hpp"
#include "msdm/metrics.hpp"

namespace msdm {
class Vae;
}

namespace msdm::metrics {

/// Frozen image feature extractor. Outputs are unit-norm row vectors.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::string id() const = 0;
  virtual std::size_t dim() const = 0;
  virtual Eigen::VectorXd embed(const Image& image) const = 0;
};

// Grayscale in [-1, 1], box-downsampled to 16x16, projected by a seeded
// Gaussian 32 x 256 matrix, L2-normalised.
class RandomProjectionEmbedder final : public Embedder {
 public:
  static constexpr std::size_t kGrid = 16;
  static constexpr std::size_t kDim = 32;

  explicit RandomProjectionEmbedder(std::uint64_t seed);
  std::string id() const override { return "random-projection"; }
  std::size_t dim() const override { return kDim; }
  Eigen::VectorXd embed(const Image& image) const override;

 private:
  Eigen::MatrixXd projection_;
};

// Flattened VAE posterior mean, L2-normalised. The VAE must outlive this.
class VaeEncoderEmbedder final : public Embedder {
 public:
  VaeEncoderEmbedder(const Vae& vae, std::size_t image_size);
  std::string id() const override { return "vae-encoder"; }
  std::size_t dim() const override { return dim_; }
  Eigen::VectorXd embed(const Image& image) const override;

 private:
  const Vae* vae_;
  std::size_t dim_;
};

// "random-projection" or "vae-encoder" (which needs vae).
std::unique_ptr<Embedder> make_embedder(std::string_view id, std::uint64_t root_seed, const Vae* vae = nullptr,
                                        std::size_t image_size = 32);

EmbeddingSet embed_images(const std::vector<Image>& images, const Embedder& embedder, std::string source,
                          std::string prompt_id = {});

}  // namespace msdm::metrics
