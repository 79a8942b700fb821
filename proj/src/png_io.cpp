#include <cstdio>
#include <memory>
#include <stdexcept>

#include <png.h>

#include "mvae/evaluation.hpp"

namespace mvae {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp, png_const_charp message) {
  throw std::runtime_error(std::string("PNG error: ") + message);
}

}  // namespace

// No time or text chunks are written, so equal inputs give equal bytes.
void write_png(const std::filesystem::path& path, const RasterImage& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw std::invalid_argument("PNG output supports 1 or 3 channels");
  }
  if (image.pixels.size() != std::size_t(image.height) * image.width * image.channels) {
    throw std::invalid_argument("raster size does not match its dimensions");
  }
  File file(std::fopen(path.c_str(), "wb"));
  if (!file) throw std::runtime_error("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("cannot allocate PNG writer");
  }
  try {
    png_init_io(png, file.get());
    png_set_IHDR(png, info, png_uint_32(image.width), png_uint_32(image.height), 8,
                 image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t stride = std::size_t(image.width) * image.channels;
    for (int r = 0; r < image.height; ++r) {
      png_write_row(png, image.pixels.data() + std::size_t(r) * stride);
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
}

RasterImage read_png(const std::filesystem::path& path) {
  File file(std::fopen(path.c_str(), "rb"));
  if (!file) throw std::runtime_error("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("cannot allocate PNG reader");
  }
  RasterImage image;
  try {
    png_init_io(png, file.get());
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) != 8 ||
        (color != PNG_COLOR_TYPE_GRAY && color != PNG_COLOR_TYPE_RGB)) {
      throw std::runtime_error("only 8-bit greyscale or RGB PNG files are supported");
    }
    image.width = int(png_get_image_width(png, info));
    image.height = int(png_get_image_height(png, info));
    image.channels = color == PNG_COLOR_TYPE_GRAY ? 1 : 3;
    const std::size_t stride = std::size_t(image.width) * image.channels;
    image.pixels.resize(stride * image.height);
    for (int r = 0; r < image.height; ++r) {
      png_read_row(png, image.pixels.data() + std::size_t(r) * stride, nullptr);
    }
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

}  // namespace mvae
