#include "bronchosynth/png_io.hpp"

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>

#include "bronchosynth/errors.hpp"

namespace bsynth::png {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// Decoded image with either 8-bit or 16-bit samples, 1 or 3 channels.
struct Raw {
  int height = 0;
  int width = 0;
  int channels = 0;
  bool sixteen = false;
  std::vector<std::uint8_t> bytes;
};

void silent_warning(png_structp, png_const_charp) {}

// Returns false on libpng failure; the caller turns that into an exception
// once no longjmp can cross C++ frames.
bool decode(std::FILE* file, bool want_gray, Raw& raw) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, silent_warning);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_init_io(png, file);
  png_read_info(png, info);

  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  if (depth == 16) png_set_swap(png);  // native little-endian uint16 layout

  const bool is_gray = !(color & PNG_COLOR_MASK_COLOR) && color != PNG_COLOR_TYPE_PALETTE;
  if (want_gray && !is_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  if (!want_gray && is_gray) png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  raw.height = static_cast<int>(png_get_image_height(png, info));
  raw.width = static_cast<int>(png_get_image_width(png, info));
  raw.channels = png_get_channels(png, info);
  raw.sixteen = png_get_bit_depth(png, info) == 16;
  const std::size_t stride = png_get_rowbytes(png, info);
  raw.bytes.resize(stride * raw.height);
  rows.resize(raw.height);
  for (int r = 0; r < raw.height; ++r) rows[r] = raw.bytes.data() + stride * r;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

Raw load(const std::filesystem::path& path, bool want_gray) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw InputError("cannot open image " + path.string());
  png_byte signature[8];
  if (std::fread(signature, 1, 8, file.get()) != 8 || png_sig_cmp(signature, 0, 8) != 0) {
    throw InputError("not a PNG file: " + path.string());
  }
  std::rewind(file.get());
  Raw raw;
  if (!decode(file.get(), want_gray, raw)) throw InputError("corrupt PNG file: " + path.string());
  return raw;
}

bool encode(std::FILE* file, int height, int width, int color_type, int bit_depth, const std::uint8_t* data,
            std::size_t stride) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, silent_warning);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  std::vector<png_bytep> rows(height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, file);
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);
  for (int r = 0; r < height; ++r) rows[r] = const_cast<png_bytep>(data + stride * r);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

void save(const std::filesystem::path& path, int height, int width, int color_type, int bit_depth,
          const std::uint8_t* data, std::size_t stride) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw InputError("cannot write image " + path.string());
  if (!encode(file.get(), height, width, color_type, bit_depth, data, stride)) {
    throw InputError("failed to encode PNG " + path.string());
  }
}

}  // namespace

RgbImage read_rgb(const std::filesystem::path& path) {
  Raw raw = load(path, false);
  RgbImage image(raw.height, raw.width);
  if (!raw.sixteen) {
    image.pixels = std::move(raw.bytes);
  } else {
    const auto* src = reinterpret_cast<const std::uint16_t*>(raw.bytes.data());
    for (std::size_t i = 0; i < image.pixels.size(); ++i) {
      image.pixels[i] = static_cast<std::uint8_t>(std::lround(src[i] / 257.0));
    }
  }
  return image;
}

Gray16 read_gray16(const std::filesystem::path& path) {
  Raw raw = load(path, true);
  Gray16 image{raw.height, raw.width, std::vector<std::uint16_t>(static_cast<std::size_t>(raw.height) * raw.width)};
  if (raw.sixteen) {
    const auto* src = reinterpret_cast<const std::uint16_t*>(raw.bytes.data());
    std::copy(src, src + image.values.size(), image.values.begin());
  } else {
    for (std::size_t i = 0; i < image.values.size(); ++i) image.values[i] = static_cast<std::uint16_t>(raw.bytes[i] * 257);
  }
  return image;
}

void write_rgb(const std::filesystem::path& path, const RgbImage& image) {
  save(path, image.height, image.width, PNG_COLOR_TYPE_RGB, 8, image.pixels.data(),
       static_cast<std::size_t>(image.width) * 3);
}

void write_gray16(const std::filesystem::path& path, const Gray16& image) {
  save(path, image.height, image.width, PNG_COLOR_TYPE_GRAY, 16,
       reinterpret_cast<const std::uint8_t*>(image.values.data()), static_cast<std::size_t>(image.width) * 2);
}

void write_gray8(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& values) {
  save(path, height, width, PNG_COLOR_TYPE_GRAY, 8, values.data(), static_cast<std::size_t>(width));
}

DepthImage read_depth(const std::filesystem::path& path) {
  const Gray16 gray = read_gray16(path);
  DepthImage depth(gray.height, gray.width);
  for (std::size_t i = 0; i < depth.size(); ++i) depth.values[i] = gray.values[i] / 65535.0;
  return depth;
}

void write_depth(const std::filesystem::path& path, const DepthImage& depth) {
  Gray16 gray{depth.height, depth.width, std::vector<std::uint16_t>(depth.size())};
  for (std::size_t i = 0; i < depth.size(); ++i) {
    gray.values[i] = static_cast<std::uint16_t>(std::lround(std::clamp(depth.values[i], 0.0, 1.0) * 65535.0));
  }
  write_gray16(path, gray);
}

OrificeMask read_mask(const std::filesystem::path& path) {
  const Gray16 gray = read_gray16(path);
  OrificeMask mask(gray.height, gray.width);
  for (std::size_t i = 0; i < mask.size(); ++i) mask.labels[i] = gray.values[i] >= 128 * 257 ? 1 : 0;
  return mask;
}

void write_mask(const std::filesystem::path& path, const OrificeMask& mask) {
  std::vector<std::uint8_t> values(mask.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = mask.labels[i] ? 255 : 0;
  write_gray8(path, mask.height, mask.width, values);
}

}  // namespace bsynth::png
