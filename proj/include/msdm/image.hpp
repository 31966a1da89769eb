#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "msdm/tensor.hpp"

namespace msdm {

/// 8-bit RGB raster, row-major, interleaved (H x W x 3).
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;

  static Image blank(std::size_t h, std::size_t w) { return {h, w, std::vector<std::uint8_t>(h * w * 3, 0)}; }
  std::uint8_t* px(std::size_t y, std::size_t x) { return &rgb[(y * width + x) * 3]; }
  const std::uint8_t* px(std::size_t y, std::size_t x) const { return &rgb[(y * width + x) * 3]; }
  bool operator==(const Image&) const = default;
};

// [3 x H x W] in [-1, 1].
Tensor image_to_tensor(const Image& image);
// Clamps to [-1, 1] and rounds to the nearest 8-bit level.
Image tensor_to_image(const Tensor& t);

std::vector<std::uint8_t> encode_png(const Image& image);
Image decode_png(const std::vector<std::uint8_t>& bytes);
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace msdm
