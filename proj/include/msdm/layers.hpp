#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "msdm/checkpoint.hpp"
#include "msdm/lora.hpp"
#include "msdm/rng.hpp"
#include "msdm/tensor.hpp"
#include "msdm/text_embedding.hpp"

namespace msdm::nn {

struct Linear {
  std::string name;
  Tensor weight;  // [out x in]
  Tensor bias;    // [out] or undefined
  lora::AdapterPtr adapter;

  static Linear make(std::string name, std::size_t in, std::size_t out, bool with_bias, Rng& rng);
  Tensor forward(const Tensor& x) const;  // x [N x in]
  void collect(NamedTensors& out) const;
};

struct Conv2d {
  std::string name;
  Tensor weight;  // [out x in x k x k]
  Tensor bias;    // [out]
  std::size_t padding = 1;

  static Conv2d make(std::string name, std::size_t in, std::size_t out, std::size_t k, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(NamedTensors& out) const;
};

struct GroupNorm {
  std::string name;
  Tensor gain;
  Tensor bias;
  std::size_t groups = 1;

  static GroupNorm make(std::string name, std::size_t channels, std::size_t groups);
  Tensor forward(const Tensor& x) const;
  void collect(NamedTensors& out) const;
};

// Diagnostics captured from one attention evaluation.
struct AttentionProbe {
  Tensor weights;  // [N x L], rows sum to 1
};

/// Text-conditioned cross-attention followed by a feed-forward block.
///
/// Queries come from visual tokens, keys and values from text tokens:
///   h  = x + (softmax(Q K^T / sqrt(d)) V) W_out^T
///   y  = h + W2 gelu(W1 h + b1) + b2
/// When the attention width differs from the visual width, proj_in/proj_out
/// map into and out of the attention space around the block.
struct CrossAttentionBlock {
  std::string name;
  std::size_t visual_width = 0;
  std::size_t width = 0;
  bool projected = false;
  Linear proj_in, proj_out;
  Linear to_q, to_k, to_v, to_out, ff1, ff2;

  static CrossAttentionBlock make(std::string name, std::size_t visual_width, std::size_t text_width,
                                  std::size_t attn_width, std::size_t ff_mult, Rng& rng);
  // visual [N x visual_width] -> [N x visual_width]
  Tensor forward_tokens(const Tensor& visual, const TextEmbedding& text, AttentionProbe* probe = nullptr) const;
  // feature map [C x H x W] -> [C x H x W]
  Tensor forward(const Tensor& feature_map, const TextEmbedding& text) const;
  void collect(NamedTensors& out) const;
  std::vector<Linear*> linears();
};

// Sinusoidal timestep features of even width `dim`.
Tensor timestep_embedding(int t, std::size_t dim);

std::vector<Tensor> tensors_of(const NamedTensors& named);
void set_requires_grad(NamedTensors& named, bool on);

}  // namespace msdm::nn
