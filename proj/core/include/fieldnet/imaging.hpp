#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace fieldnet {

// H x W x C image with samples in [0,1], stored channel-major
// (all of channel 0 row by row, then channel 1, ...).
class ImagePlane {
 public:
  ImagePlane() = default;
  ImagePlane(int height, int width, int channels, float fill = 0.0f);
  // Throws ConfigError if the size is wrong or any sample is outside [0,1].
  ImagePlane(int height, int width, int channels, std::vector<float> data);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(height_) * width_; }
  bool empty() const { return data_.empty(); }

  float at(int c, int y, int x) const { return data_[index(c, y, x)]; }
  // Writes are clamped to [0,1].
  void set(int c, int y, int x, float v);

  std::span<const float> samples() const { return data_; }
  std::span<const float> channel(int c) const;

  bool same_dims(const ImagePlane& other) const {
    return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
  }
  bool operator==(const ImagePlane&) const = default;

 private:
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<float> data_;
};

// Binary H x W mask, values in {0,1}.
class RegionMask {
 public:
  RegionMask() = default;
  RegionMask(int height, int width, std::uint8_t fill = 0);
  // Any nonzero input value is stored as 1.
  RegionMask(int height, int width, std::vector<std::uint8_t> values);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return values_.size(); }

  std::uint8_t at(int y, int x) const { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  void set(int y, int x, bool on) { values_[static_cast<std::size_t>(y) * width_ + x] = on ? 1 : 0; }
  std::span<const std::uint8_t> values() const { return values_; }
  std::size_t count() const;

  RegionMask inverted() const;
  static RegionMask full(int height, int width) { return RegionMask(height, width, 1); }

  bool operator==(const RegionMask&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> values_;
};

struct LabImage {
  int height = 0;
  int width = 0;
  std::vector<double> l;  // [0,100]
  std::vector<double> a;
  std::vector<double> b;
};

enum class BitDepth { k8 = 8, k16 = 16 };

// PNG (8/16-bit gray or RGB) and binary PGM/PPM. Throws DataError on
// unreadable files and unsupported variants (palette, alpha, <8 bit).
ImagePlane load_image(const std::filesystem::path& path);
// Format follows the extension: .png, .pgm, .ppm (.pnm picks by channels).
void save_image(const ImagePlane& img, const std::filesystem::path& path,
                BitDepth depth = BitDepth::k8);

// Loads a single-channel (or RGB, via channel 0) image and thresholds at 0.5.
RegionMask load_mask(const std::filesystem::path& path);
void save_mask(const RegionMask& mask, const std::filesystem::path& path);

ImagePlane mask_to_image(const RegionMask& mask);

// sRGB (D65) -> CIELAB.
LabImage srgb_to_lab(const ImagePlane& img);

// Luma with Rec.601 weights; a 1-channel input is returned unchanged.
ImagePlane to_grayscale(const ImagePlane& img);

// Maps per-pixel mean absolute channel error (0..255) through the error
// colormap. Symmetric in its arguments.
ImagePlane render_error_map(const ImagePlane& pred, const ImagePlane& ref);

// Error magnitude before colormapping, per pixel, in [0,255].
std::vector<float> error_magnitude(const ImagePlane& pred, const ImagePlane& ref);

// 256-entry RGB table used by render_error_map: linear interpolation through
// nine anchor colours sampled from matplotlib's viridis.
const std::array<std::array<std::uint8_t, 3>, 256>& error_colormap();

struct CropWindow {
  int x0 = 0;
  int y0 = 0;
  int width = 0;
  int height = 0;
};

ImagePlane crop(const ImagePlane& img, const CropWindow& win);
RegionMask crop(const RegionMask& mask, const CropWindow& win);

// Square window of side `size` with offsets drawn uniformly from the valid
// range using `seed`. Throws ConfigError if the image is smaller than size.
CropWindow random_crop_window(int height, int width, int size, std::uint64_t seed);
ImagePlane random_crop(const ImagePlane& img, int size, std::uint64_t seed);

ImagePlane flip_horizontal(const ImagePlane& img);
RegionMask flip_horizontal(const RegionMask& mask);

// Bilinear resampling with half-pixel centres and edge clamping.
ImagePlane resize_bilinear(const ImagePlane& img, int height, int width);
// Nearest-neighbour resampling (used for masks).
RegionMask resize_nearest(const RegionMask& mask, int height, int width);

// Edge-replicating pad on the bottom/right so dims become multiples.
ImagePlane pad_to_multiple(const ImagePlane& img, int multiple);

}  // namespace fieldnet
