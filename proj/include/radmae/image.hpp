#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace radmae {

/// Dense H x W x C grid of doubles, row-major with interleaved channels.
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels, double fill = 0.0);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(int i, int j, int c = 0) { return data_[index(i, j, c)]; }
  double at(int i, int j, int c = 0) const { return data_[index(i, j, c)]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool same_shape(const Image& other) const {
    return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
  }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t index(int i, int j, int c) const {
    return (static_cast<std::size_t>(i) * width_ + j) * channels_ + c;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

/// Binary H x W mask.
struct PixelMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  PixelMask() = default;
  PixelMask(int h, int w, std::uint8_t fill = 0) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int i, int j) { return bits[static_cast<std::size_t>(i) * width + j]; }
  std::uint8_t at(int i, int j) const { return bits[static_cast<std::size_t>(i) * width + j]; }
  std::size_t count() const;

  friend bool operator==(const PixelMask&, const PixelMask&) = default;
};

// Raw decoded raster before normalisation.
struct RasterInfo {
  int height = 0;
  int width = 0;
  int channels = 0;
  int bit_depth = 8;
};

/// Decodes PNG (8/16 bit, gray/RGB/alpha) or JPEG from memory into [0,1] values.
/// Alpha channels are dropped. Throws on undecodable input.
Image decode_image(std::span<const std::uint8_t> bytes, RasterInfo* info = nullptr);
Image read_image(const std::filesystem::path& path, RasterInfo* info = nullptr);

/// Writes an 8-bit PNG; values are clamped to [0,1] and rounded.
void write_png(const std::filesystem::path& path, const Image& image);
std::vector<std::uint8_t> encode_png(const Image& image);

/// Bilinear resize with half-pixel centers (align_corners = false).
Image resize_bilinear(const Image& src, int height, int width);

/// Bilinear sample at fractional pixel coordinates; outside samples read `fill`.
double sample_bilinear(const Image& src, double y, double x, int c, double fill = 0.0);

/// Repeats or averages channels to reach `channels`.
Image convert_channels(const Image& src, int channels);

/// Axis-aligned crop; box is clipped to the image.
Image crop(const Image& src, int top, int left, int height, int width);

Image horizontal_flip(const Image& src);

}  // namespace radmae
