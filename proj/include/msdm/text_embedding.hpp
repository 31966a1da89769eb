#pragma once

#include "msdm/tensor.hpp"

namespace msdm {

// Conditioning vectors for one prompt: L token rows of width D plus a pooled
// D-vector. The unconditional (null) prompt is a single all-zero row.
struct TextEmbedding {
  Tensor tokens;  // [L x D]
  Tensor pooled;  // [D]
  bool is_null = false;

  std::size_t length() const { return tokens.dim(0); }
  std::size_t width() const { return tokens.dim(1); }

  static TextEmbedding null(std::size_t width) {
    return TextEmbedding{Tensor::zeros({1, width}), Tensor::zeros({width}), true};
  }
};

}  // namespace msdm
