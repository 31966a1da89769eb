#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "msdm/checkpoint.hpp"
#include "msdm/text_embedding.hpp"

namespace msdm {

/// Deterministic stand-in for a pretrained text encoder.
///
/// Lower-cased whitespace tokens are hashed (with the encoder seed) into
/// frozen Gaussian vectors of width 32. A learned L_max x L_max mixing matrix,
/// initialised to identity, mixes the first L rows; the pooled vector is the
/// row mean. Empty text is the null prompt.
class TextEncoder {
 public:
  static constexpr std::size_t kWidth = 32;
  static constexpr std::size_t kMaxLength = 16;

  explicit TextEncoder(std::uint64_t seed);

  TextEmbedding encode(std::string_view text) const;
  TextEmbedding null() const { return TextEmbedding::null(kWidth); }

  static std::vector<std::string> tokenize(std::string_view text);
  std::vector<double> token_vector(std::string_view token) const;

  std::uint64_t seed() const { return seed_; }
  NamedTensors parameters() const { return {{"text.mixing", mixing_}}; }

 private:
  std::uint64_t seed_;
  Tensor mixing_;
};

}  // namespace msdm
