#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "msdm/errors.hpp"
#include "msdm/image.hpp"

namespace msdm {

Tensor image_to_tensor(const Image& image) {
  const std::size_t h = image.height, w = image.width;
  std::vector<double> v(3 * h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto* p = image.px(y, x);
      for (std::size_t c = 0; c < 3; ++c) v[(c * h + y) * w + x] = p[c] / 127.5 - 1.0;
    }
  }
  return Tensor::from({3, h, w}, std::move(v));
}

Image tensor_to_image(const Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw DimensionError("tensor_to_image: expected [3 x H x W], got " + shape_str(t.shape()));
  const std::size_t h = t.dim(1), w = t.dim(2);
  Image img = Image::blank(h, w);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double v = std::clamp(t[(c * h + y) * w + x], -1.0, 1.0);
        img.px(y, x)[c] = static_cast<std::uint8_t>(std::lround((v + 1.0) * 127.5));
      }
    }
  }
  return img;
}

namespace {

struct ReadCursor {
  const std::vector<std::uint8_t>* bytes;
  std::size_t pos;
};

void on_png_error(png_structp png, png_const_charp msg) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  *text = msg;
  png_longjmp(png, 1);
}

void on_png_warning(png_structp, png_const_charp) {}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& image) {
  if (image.rgb.size() != image.height * image.width * 3 || image.height == 0 || image.width == 0) {
    throw DimensionError("encode_png: bad image extents");
  }
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, on_png_error, on_png_warning);
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png encode: " + err);
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t n) {
        auto* buf = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
        buf->insert(buf->end(), data, data + n);
      },
      [](png_structp) {});
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < image.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(image.px(y, 0)));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

Image decode_png(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw IoError("png decode: not a PNG stream");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, on_png_error, on_png_warning);
  png_infop info = png_create_info_struct(png);
  ReadCursor cursor{&bytes, 0};
  Image img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png decode: " + err);
  }
  png_set_read_fn(png, &cursor, [](png_structp p, png_bytep data, png_size_t n) {
    auto* c = static_cast<ReadCursor*>(png_get_io_ptr(p));
    if (c->pos + n > c->bytes->size()) png_error(p, "truncated stream");
    std::memcpy(data, c->bytes->data() + c->pos, n);
    c->pos += n;
  });
  png_read_info(png, info);
  const auto bit_depth = png_get_bit_depth(png, info);
  const auto color = png_get_color_type(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.rgb.assign(img.width * img.height * 3, 0);
  for (std::size_t y = 0; y < img.height; ++y) png_read_row(png, img.px(y, 0), nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

void write_png(const std::filesystem::path& path, const Image& image) { write_file_bytes(path, encode_png(image)); }

Image read_png(const std::filesystem::path& path) { return decode_png(read_file_bytes(path)); }

}  // namespace msdm
