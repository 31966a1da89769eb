#include "msdm/text_encoder.hpp"

#include <cctype>

#include "msdm/ops.hpp"
#include "msdm/rng.hpp"

namespace msdm {

TextEncoder::TextEncoder(std::uint64_t seed) : seed_(seed) {
  std::vector<double> eye(kMaxLength * kMaxLength, 0.0);
  for (std::size_t i = 0; i < kMaxLength; ++i) eye[i * kMaxLength + i] = 1.0;
  mixing_ = Tensor::from({kMaxLength, kMaxLength}, std::move(eye), true);
}

std::vector<std::string> TextEncoder::tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

std::vector<double> TextEncoder::token_vector(std::string_view token) const {
  Rng rng(mix_seed(seed_, hash_string(token)));
  std::vector<double> v(kWidth);
  for (auto& x : v) x = rng.normal();
  return v;
}

TextEmbedding TextEncoder::encode(std::string_view text) const {
  auto tokens = tokenize(text);
  if (tokens.empty()) return null();
  if (tokens.size() > kMaxLength) tokens.resize(kMaxLength);
  const std::size_t l = tokens.size();
  std::vector<double> rows;
  rows.reserve(l * kWidth);
  for (const auto& tok : tokens) {
    const auto v = token_vector(tok);
    rows.insert(rows.end(), v.begin(), v.end());
  }
  const Tensor raw = Tensor::from({l, kWidth}, std::move(rows));
  const Tensor mixed = ops::matmul(ops::slice2d(mixing_, l, l), raw);
  return TextEmbedding{mixed, ops::mean_rows(mixed), false};
}

}  // namespace msdm
