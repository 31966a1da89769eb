#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "msdm/checkpoint.hpp"
#include "msdm/tensor.hpp"

namespace msdm::lora {

/// Low-rank update attached to a frozen base weight W [d_out x d_in].
/// The effective weight is W + (alpha / rank) * B * A.
struct LoraAdapter {
  std::string target;
  int rank = 0;
  double alpha = 0.0;
  Tensor A;  // [rank x d_in], N(0, 0.02^2) at attach
  Tensor B;  // [d_out x rank], zero at attach
  bool enabled = true;

  double scale() const { return alpha / static_cast<double>(rank); }
  std::size_t d_in() const { return A.dim(1); }
  std::size_t d_out() const { return B.dim(0); }
  // Dense (alpha / r) * B * A, no autodiff.
  Tensor delta() const;
};

using AdapterPtr = std::shared_ptr<LoraAdapter>;

inline constexpr double kInitStd = 0.02;

// Freezes each named target and returns one adapter per target, in order.
// alpha defaults to rank (scale 1). Unknown targets, non-2-D weights and
// rank > min(d_in, d_out) are configuration errors.
std::vector<AdapterPtr> attach(const NamedTensors& base, const std::vector<std::string>& targets, int rank,
                               std::optional<double> alpha, std::uint64_t seed);

// x [N x d_in] -> x W^T + scale * (x A^T) B^T (+ bias). Disabled adapters give
// the plain product.
Tensor adapted_forward(const Tensor& x, const Tensor& base_weight, const LoraAdapter& adapter,
                       const Tensor& bias = {});

Tensor merge(const Tensor& base_weight, const LoraAdapter& adapter);
Tensor unmerge(const Tensor& merged_weight, const LoraAdapter& adapter);

// sum over adapters of r * (d_in + d_out), plus any extra trainable scalars.
std::size_t trainable_param_count(const std::vector<AdapterPtr>& adapters, std::size_t extras = 0);
// Same count from shapes alone, for planning sweeps without allocating.
std::size_t trainable_param_count(const std::vector<std::pair<std::size_t, std::size_t>>& target_shapes,
                                  int rank, std::size_t extras = 0);

std::vector<Tensor> trainable_tensors(const std::vector<AdapterPtr>& adapters);

// "lora.<target>.A" / "lora.<target>.B" in the tensor checkpoint format, plus
// a "<path>.txt" sidecar with one "target rank alpha" line per adapter.
void save_adapters(const std::filesystem::path& path, const std::vector<AdapterPtr>& adapters);
std::vector<AdapterPtr> load_adapters(const std::filesystem::path& path);

}  // namespace msdm::lora
