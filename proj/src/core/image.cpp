#include "radmae/image.hpp"

#include <png.h>
// jpeglib.h needs FILE and size_t declared first.
#include <cstdio>
#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <iterator>

#include "radmae/error.hpp"

namespace radmae {

Image::Image(int height, int width, int channels, double fill)
    : height_(height), width_(width), channels_(channels) {
  if (height < 0 || width < 0 || channels < 0) fail("negative image dimensions");
  data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

std::size_t PixelMask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

namespace {

struct MemoryReader {
  std::span<const std::uint8_t> bytes;
  std::size_t offset = 0;
};

void png_read_from_memory(png_structp png, png_bytep out, png_size_t length) {
  auto* reader = static_cast<MemoryReader*>(png_get_io_ptr(png));
  if (reader->offset + length > reader->bytes.size()) png_error(png, "truncated PNG stream");
  std::memcpy(out, reader->bytes.data() + reader->offset, length);
  reader->offset += length;
}

void png_error_to_longjmp(png_structp png, png_const_charp) { longjmp(png_jmpbuf(png), 1); }
void png_silent_warning(png_structp, png_const_charp) {}

Image decode_png(std::span<const std::uint8_t> bytes, RasterInfo* info) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_to_longjmp, png_silent_warning);
  if (!png) fail_io("png_create_read_struct failed");
  png_infop png_info = png_create_info_struct(png);
  if (!png_info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail_io("png_create_info_struct failed");
  }
  MemoryReader reader{bytes, 0};
  std::vector<std::uint8_t> buffer;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &png_info, nullptr);
    fail_parse("corrupt PNG data");
  }
  png_set_read_fn(png, &reader, png_read_from_memory);
  png_read_info(png, png_info);

  const png_uint_32 width = png_get_image_width(png, png_info);
  const png_uint_32 height = png_get_image_height(png, png_info);
  const int color_type = png_get_color_type(png, png_info);
  int bit_depth = png_get_bit_depth(png, png_info);

  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, png_info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (bit_depth == 16) png_set_swap(png);  // little-endian host order
  png_read_update_info(png, png_info);

  const int channels = png_get_channels(png, png_info);
  bit_depth = png_get_bit_depth(png, png_info);
  const std::size_t rowbytes = png_get_rowbytes(png, png_info);
  buffer.resize(rowbytes * height);
  rows.resize(height);
  for (png_uint_32 r = 0; r < height; ++r) rows[r] = buffer.data() + r * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &png_info, nullptr);

  if (width == 0 || height == 0) fail("zero-area image");
  const int color_channels = (channels == 2 || channels == 4) ? channels - 1 : channels;
  Image out(static_cast<int>(height), static_cast<int>(width), color_channels);
  const double scale = bit_depth == 16 ? 65535.0 : 255.0;
  for (png_uint_32 r = 0; r < height; ++r) {
    for (png_uint_32 c = 0; c < width; ++c) {
      for (int k = 0; k < color_channels; ++k) {
        const std::size_t idx = static_cast<std::size_t>(c) * channels + k;
        double v;
        if (bit_depth == 16) {
          std::uint16_t word;
          std::memcpy(&word, rows[r] + idx * 2, 2);
          v = word;
        } else {
          v = rows[r][idx];
        }
        out.at(static_cast<int>(r), static_cast<int>(c), k) = v / scale;
      }
    }
  }
  if (info) *info = RasterInfo{static_cast<int>(height), static_cast<int>(width), color_channels, bit_depth};
  return out;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

Image decode_jpeg(std::span<const std::uint8_t> bytes, RasterInfo* info) {
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  std::vector<std::uint8_t> pixels;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    fail_parse("corrupt JPEG data");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  if (cinfo.num_components != 1) cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const int w = static_cast<int>(cinfo.output_width);
  const int h = static_cast<int>(cinfo.output_height);
  const int ch = cinfo.output_components;
  pixels.resize(static_cast<std::size_t>(w) * h * ch);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * ch;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  if (w == 0 || h == 0) fail("zero-area image");
  Image out(h, w, ch);
  auto data = out.data();
  for (std::size_t i = 0; i < pixels.size(); ++i) data[i] = pixels[i] / 255.0;
  if (info) *info = RasterInfo{h, w, ch, 8};
  return out;
}

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void png_flush_noop(png_structp) {}

}  // namespace

Image decode_image(std::span<const std::uint8_t> bytes, RasterInfo* info) {
  static constexpr std::uint8_t kPngMagic[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (bytes.size() >= 8 && std::equal(kPngMagic, kPngMagic + 8, bytes.begin())) return decode_png(bytes, info);
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) return decode_jpeg(bytes, info);
  fail_parse("unsupported image format (expected PNG or JPEG)");
}

Image read_image(const std::filesystem::path& path, RasterInfo* info) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_io("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) fail_io("empty image file " + path.string());
  return decode_image(bytes, info);
}

std::vector<std::uint8_t> encode_png(const Image& image) {
  if (image.empty()) fail("cannot encode an empty image");
  const int ch = image.channels();
  if (ch != 1 && ch != 3) fail("PNG output supports 1 or 3 channels");
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_to_longjmp, png_silent_warning);
  if (!png) fail_io("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> buffer(static_cast<std::size_t>(image.width()) * image.height() * ch);
  auto data = image.data();
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    buffer[i] = static_cast<std::uint8_t>(std::lround(std::clamp(data[i], 0.0, 1.0) * 255.0));
  }
  std::vector<png_bytep> rows(image.height());
  for (int r = 0; r < image.height(); ++r) rows[r] = buffer.data() + static_cast<std::size_t>(r) * image.width() * ch;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail_io("PNG encoding failed");
  }
  png_set_write_fn(png, &out, png_write_to_vector, png_flush_noop);
  png_set_IHDR(png, info, image.width(), image.height(), 8, ch == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  const auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_io("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail_io("short write to " + path.string());
}

double sample_bilinear(const Image& src, double y, double x, int c, double fill) {
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const double fy = y - y0;
  const double fx = x - x0;
  auto px = [&](int i, int j) {
    if (i < 0 || j < 0 || i >= src.height() || j >= src.width()) return fill;
    return src.at(i, j, c);
  };
  return (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) + fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
}

Image resize_bilinear(const Image& src, int height, int width) {
  if (src.empty()) fail("zero-area image");
  if (height <= 0 || width <= 0) fail("resize target must be positive");
  if (height == src.height() && width == src.width()) return src;
  Image out(height, width, src.channels());
  const double sy = static_cast<double>(src.height()) / height;
  const double sx = static_cast<double>(src.width()) / width;
  for (int i = 0; i < height; ++i) {
    // Edge-clamped source coordinate keeps constant images constant.
    const double y = std::clamp((i + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height() - 1));
    const int y0 = static_cast<int>(y);
    const int y1 = std::min(y0 + 1, src.height() - 1);
    const double fy = y - y0;
    for (int j = 0; j < width; ++j) {
      const double x = std::clamp((j + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width() - 1));
      const int x0 = static_cast<int>(x);
      const int x1 = std::min(x0 + 1, src.width() - 1);
      const double fx = x - x0;
      for (int c = 0; c < src.channels(); ++c) {
        const double top = (1 - fx) * src.at(y0, x0, c) + fx * src.at(y0, x1, c);
        const double bottom = (1 - fx) * src.at(y1, x0, c) + fx * src.at(y1, x1, c);
        out.at(i, j, c) = (1 - fy) * top + fy * bottom;
      }
    }
  }
  return out;
}

Image convert_channels(const Image& src, int channels) {
  if (channels <= 0) fail("channel count must be positive");
  if (src.channels() == channels) return src;
  Image out(src.height(), src.width(), channels);
  for (int i = 0; i < src.height(); ++i) {
    for (int j = 0; j < src.width(); ++j) {
      if (src.channels() == 1) {
        for (int c = 0; c < channels; ++c) out.at(i, j, c) = src.at(i, j, 0);
      } else if (channels == 1) {
        double sum = 0;
        for (int c = 0; c < src.channels(); ++c) sum += src.at(i, j, c);
        out.at(i, j, 0) = sum / src.channels();
      } else {
        fail("cannot map " + std::to_string(src.channels()) + " channels to " + std::to_string(channels));
      }
    }
  }
  return out;
}

Image crop(const Image& src, int top, int left, int height, int width) {
  const int t = std::clamp(top, 0, src.height());
  const int l = std::clamp(left, 0, src.width());
  const int b = std::clamp(top + height, 0, src.height());
  const int r = std::clamp(left + width, 0, src.width());
  if (b <= t || r <= l) fail("crop window does not intersect the image");
  Image out(b - t, r - l, src.channels());
  for (int i = t; i < b; ++i)
    for (int j = l; j < r; ++j)
      for (int c = 0; c < src.channels(); ++c) out.at(i - t, j - l, c) = src.at(i, j, c);
  return out;
}

Image horizontal_flip(const Image& src) {
  Image out(src.height(), src.width(), src.channels());
  for (int i = 0; i < src.height(); ++i)
    for (int j = 0; j < src.width(); ++j)
      for (int c = 0; c < src.channels(); ++c) out.at(i, src.width() - 1 - j, c) = src.at(i, j, c);
  return out;
}

}  // namespace radmae
