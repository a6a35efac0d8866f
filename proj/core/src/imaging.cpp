#include "fieldnet/imaging.hpp"

#include "codec.hpp"
#include "fieldnet/error.hpp"
#include "fieldnet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

namespace fieldnet {

ImagePlane::ImagePlane(int height, int width, int channels, float fill)
    : height_(height), width_(width), channels_(channels) {
  if (height < 0 || width < 0 || channels < 1) {
    throw ConfigError(fmt::format("invalid image dims {}x{}x{}", height, width, channels));
  }
  data_.assign(static_cast<std::size_t>(height) * width * channels, std::clamp(fill, 0.0f, 1.0f));
}

ImagePlane::ImagePlane(int height, int width, int channels, std::vector<float> data)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
  if (height < 0 || width < 0 || channels < 1) {
    throw ConfigError(fmt::format("invalid image dims {}x{}x{}", height, width, channels));
  }
  if (data_.size() != static_cast<std::size_t>(height) * width * channels) {
    throw ConfigError(fmt::format("image data has {} samples, expected {}x{}x{}", data_.size(),
                                  height, width, channels));
  }
  for (float v : data_) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw ConfigError(fmt::format("image sample {} outside [0,1]", v));
    }
  }
}

void ImagePlane::set(int c, int y, int x, float v) {
  data_[index(c, y, x)] = std::isnan(v) ? 0.0f : std::clamp(v, 0.0f, 1.0f);
}

std::span<const float> ImagePlane::channel(int c) const {
  return std::span<const float>(data_).subspan(static_cast<std::size_t>(c) * pixel_count(),
                                               pixel_count());
}

RegionMask::RegionMask(int height, int width, std::uint8_t fill)
    : height_(height), width_(width),
      values_(static_cast<std::size_t>(height) * width, fill ? 1 : 0) {}

RegionMask::RegionMask(int height, int width, std::vector<std::uint8_t> values)
    : height_(height), width_(width), values_(std::move(values)) {
  if (values_.size() != static_cast<std::size_t>(height) * width) {
    throw ConfigError(fmt::format("mask data has {} values, expected {}x{}", values_.size(),
                                  height, width));
  }
  for (auto& v : values_) v = v ? 1 : 0;
}

std::size_t RegionMask::count() const {
  return static_cast<std::size_t>(std::count(values_.begin(), values_.end(), 1));
}

RegionMask RegionMask::inverted() const {
  RegionMask out = *this;
  for (auto& v : out.values_) v = v ? 0 : 1;
  return out;
}

namespace {

std::string lower_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return ext;
}

bool has_png_signature(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  unsigned char sig[4] = {0, 0, 0, 0};
  in.read(reinterpret_cast<char*>(sig), 4);
  return in.gcount() == 4 && sig[0] == 0x89 && sig[1] == 'P' && sig[2] == 'N' && sig[3] == 'G';
}

ImagePlane from_raw(const detail::RawImage& raw) {
  const std::size_t pixels = static_cast<std::size_t>(raw.width) * raw.height;
  std::vector<float> data(pixels * raw.channels);
  const double scale = 1.0 / static_cast<double>(raw.maxval);
  for (std::size_t p = 0; p < pixels; ++p) {
    for (int c = 0; c < raw.channels; ++c) {
      data[c * pixels + p] = static_cast<float>(raw.samples[p * raw.channels + c] * scale);
    }
  }
  return ImagePlane(raw.height, raw.width, raw.channels, std::move(data));
}

detail::RawImage to_raw(const ImagePlane& img, BitDepth depth) {
  detail::RawImage raw;
  raw.width = img.width();
  raw.height = img.height();
  raw.channels = img.channels();
  raw.maxval = depth == BitDepth::k16 ? 65535u : 255u;
  const std::size_t pixels = img.pixel_count();
  raw.samples.resize(pixels * raw.channels);
  const auto samples = img.samples();
  for (std::size_t p = 0; p < pixels; ++p) {
    for (int c = 0; c < raw.channels; ++c) {
      const double v = std::clamp(static_cast<double>(samples[c * pixels + p]), 0.0, 1.0);
      raw.samples[p * raw.channels + c] = static_cast<std::uint16_t>(std::lround(v * raw.maxval));
    }
  }
  return raw;
}

}  // namespace

ImagePlane load_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw DataError(fmt::format("image '{}' does not exist", path.string()));
  }
  if (has_png_signature(path)) return from_raw(detail::read_png(path));
  return from_raw(detail::read_pnm(path));
}

void save_image(const ImagePlane& img, const std::filesystem::path& path, BitDepth depth) {
  const std::string ext = lower_extension(path);
  const auto raw = to_raw(img, depth);
  if (ext == ".png") {
    detail::write_png(raw, path);
  } else if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") {
    if ((ext == ".pgm" && img.channels() != 1) || (ext == ".ppm" && img.channels() != 3)) {
      throw ConfigError(fmt::format("'{}' extension does not match {} channel(s)", path.string(),
                                    img.channels()));
    }
    detail::write_pnm(raw, path);
  } else {
    throw ConfigError(fmt::format("unsupported image extension for '{}'", path.string()));
  }
}

RegionMask load_mask(const std::filesystem::path& path) {
  const ImagePlane img = load_image(path);
  const auto plane = img.channel(0);
  std::vector<std::uint8_t> values(plane.size());
  std::transform(plane.begin(), plane.end(), values.begin(),
                 [](float v) { return static_cast<std::uint8_t>(v >= 0.5f ? 1 : 0); });
  return RegionMask(img.height(), img.width(), std::move(values));
}

void save_mask(const RegionMask& mask, const std::filesystem::path& path) {
  save_image(mask_to_image(mask), path, BitDepth::k8);
}

ImagePlane mask_to_image(const RegionMask& mask) {
  std::vector<float> data(mask.size());
  std::transform(mask.values().begin(), mask.values().end(), data.begin(),
                 [](std::uint8_t v) { return v ? 1.0f : 0.0f; });
  return ImagePlane(mask.height(), mask.width(), 1, std::move(data));
}

namespace {

// sRGB primaries with D65 white, IEC 61966-2-1 (linear RGB -> XYZ).
constexpr double kRgbToXyz[3][3] = {
    {0.412456, 0.357576, 0.180438},
    {0.212673, 0.715152, 0.072175},
    {0.019334, 0.119192, 0.950304},
};
// Reference white = kRgbToXyz * (1,1,1), so neutral greys map to a = b = 0.
constexpr double kWhiteX = 0.950470;
constexpr double kWhiteY = 1.000000;
constexpr double kWhiteZ = 1.088830;

double srgb_to_linear(double c) {
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

double lab_f(double t) {
  constexpr double delta = 6.0 / 29.0;
  return t > delta * delta * delta ? std::cbrt(t) : t / (3.0 * delta * delta) + 4.0 / 29.0;
}

}  // namespace

LabImage srgb_to_lab(const ImagePlane& img) {
  if (img.channels() != 3) {
    throw ConfigError(fmt::format("srgb_to_lab needs 3 channels, got {}", img.channels()));
  }
  LabImage lab;
  lab.height = img.height();
  lab.width = img.width();
  const std::size_t n = img.pixel_count();
  lab.l.resize(n);
  lab.a.resize(n);
  lab.b.resize(n);
  const auto r = img.channel(0);
  const auto g = img.channel(1);
  const auto b = img.channel(2);
  for (std::size_t i = 0; i < n; ++i) {
    const double lr = srgb_to_linear(r[i]);
    const double lg = srgb_to_linear(g[i]);
    const double lb = srgb_to_linear(b[i]);
    const double x = kRgbToXyz[0][0] * lr + kRgbToXyz[0][1] * lg + kRgbToXyz[0][2] * lb;
    const double y = kRgbToXyz[1][0] * lr + kRgbToXyz[1][1] * lg + kRgbToXyz[1][2] * lb;
    const double z = kRgbToXyz[2][0] * lr + kRgbToXyz[2][1] * lg + kRgbToXyz[2][2] * lb;
    const double fx = lab_f(x / kWhiteX);
    const double fy = lab_f(y / kWhiteY);
    const double fz = lab_f(z / kWhiteZ);
    lab.l[i] = 116.0 * fy - 16.0;
    lab.a[i] = 500.0 * (fx - fy);
    lab.b[i] = 200.0 * (fy - fz);
  }
  return lab;
}

ImagePlane to_grayscale(const ImagePlane& img) {
  if (img.channels() == 1) return img;
  if (img.channels() != 3) {
    throw ConfigError(fmt::format("to_grayscale needs 1 or 3 channels, got {}", img.channels()));
  }
  const std::size_t n = img.pixel_count();
  std::vector<float> data(n);
  const auto r = img.channel(0);
  const auto g = img.channel(1);
  const auto b = img.channel(2);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
    data[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return ImagePlane(img.height(), img.width(), 1, std::move(data));
}

const std::array<std::array<std::uint8_t, 3>, 256>& error_colormap() {
  static const auto table = [] {
    // viridis at t = 0, 1/8, ..., 1
    constexpr double anchors[9][3] = {
        {68, 1, 84},    {72, 40, 120},  {62, 73, 137},  {49, 104, 142}, {38, 130, 142},
        {31, 158, 137}, {53, 183, 121}, {110, 206, 88}, {253, 231, 37},
    };
    std::array<std::array<std::uint8_t, 3>, 256> t{};
    for (int i = 0; i < 256; ++i) {
      const double pos = i / 255.0 * 8.0;
      const int k = std::min(7, static_cast<int>(pos));
      const double frac = pos - k;
      for (int c = 0; c < 3; ++c) {
        const double v = anchors[k][c] + (anchors[k + 1][c] - anchors[k][c]) * frac;
        t[i][c] = static_cast<std::uint8_t>(std::lround(v));
      }
    }
    return t;
  }();
  return table;
}

std::vector<float> error_magnitude(const ImagePlane& pred, const ImagePlane& ref) {
  if (!pred.same_dims(ref)) {
    throw ConfigError(fmt::format("error map dims differ: {}x{}x{} vs {}x{}x{}", pred.height(),
                                  pred.width(), pred.channels(), ref.height(), ref.width(),
                                  ref.channels()));
  }
  const std::size_t n = pred.pixel_count();
  std::vector<float> out(n, 0.0f);
  for (int c = 0; c < pred.channels(); ++c) {
    const auto p = pred.channel(c);
    const auto r = ref.channel(c);
    for (std::size_t i = 0; i < n; ++i) out[i] += std::fabs(p[i] - r[i]);
  }
  for (auto& v : out) v = std::clamp(v / pred.channels() * 255.0f, 0.0f, 255.0f);
  return out;
}

ImagePlane render_error_map(const ImagePlane& pred, const ImagePlane& ref) {
  const auto magnitude = error_magnitude(pred, ref);
  const auto& cmap = error_colormap();
  const std::size_t n = magnitude.size();
  std::vector<float> data(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& rgb = cmap[static_cast<std::size_t>(std::lround(magnitude[i]))];
    for (int c = 0; c < 3; ++c) data[c * n + i] = rgb[c] / 255.0f;
  }
  return ImagePlane(pred.height(), pred.width(), 3, std::move(data));
}

namespace {

void check_window(int height, int width, const CropWindow& win) {
  if (win.width <= 0 || win.height <= 0 || win.x0 < 0 || win.y0 < 0 ||
      win.x0 + win.width > width || win.y0 + win.height > height) {
    throw ConfigError(fmt::format("crop window ({},{}) {}x{} outside {}x{} image", win.x0, win.y0,
                                  win.width, win.height, width, height));
  }
}

}  // namespace

ImagePlane crop(const ImagePlane& img, const CropWindow& win) {
  check_window(img.height(), img.width(), win);
  std::vector<float> data(static_cast<std::size_t>(win.width) * win.height * img.channels());
  std::size_t k = 0;
  for (int c = 0; c < img.channels(); ++c) {
    const auto plane = img.channel(c);
    for (int y = 0; y < win.height; ++y) {
      const auto row = plane.subspan(static_cast<std::size_t>(win.y0 + y) * img.width() + win.x0,
                                     win.width);
      std::copy(row.begin(), row.end(), data.begin() + k);
      k += win.width;
    }
  }
  return ImagePlane(win.height, win.width, img.channels(), std::move(data));
}

RegionMask crop(const RegionMask& mask, const CropWindow& win) {
  check_window(mask.height(), mask.width(), win);
  std::vector<std::uint8_t> values;
  values.reserve(static_cast<std::size_t>(win.width) * win.height);
  for (int y = 0; y < win.height; ++y) {
    for (int x = 0; x < win.width; ++x) values.push_back(mask.at(win.y0 + y, win.x0 + x));
  }
  return RegionMask(win.height, win.width, std::move(values));
}

CropWindow random_crop_window(int height, int width, int size, std::uint64_t seed) {
  if (size <= 0 || size > height || size > width) {
    throw ConfigError(fmt::format("cannot take a {}x{} crop from a {}x{} image", size, size,
                                  height, width));
  }
  Rng rng(seed);
  CropWindow win;
  win.width = size;
  win.height = size;
  win.x0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(width - size + 1)));
  win.y0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(height - size + 1)));
  return win;
}

ImagePlane random_crop(const ImagePlane& img, int size, std::uint64_t seed) {
  return crop(img, random_crop_window(img.height(), img.width(), size, seed));
}

ImagePlane flip_horizontal(const ImagePlane& img) {
  std::vector<float> data(img.samples().begin(), img.samples().end());
  const int w = img.width();
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < img.height(); ++y) {
      auto row = data.begin() + (static_cast<std::ptrdiff_t>(c) * img.height() + y) * w;
      std::reverse(row, row + w);
    }
  }
  return ImagePlane(img.height(), img.width(), img.channels(), std::move(data));
}

RegionMask flip_horizontal(const RegionMask& mask) {
  std::vector<std::uint8_t> values(mask.values().begin(), mask.values().end());
  const int w = mask.width();
  for (int y = 0; y < mask.height(); ++y) {
    auto row = values.begin() + static_cast<std::ptrdiff_t>(y) * w;
    std::reverse(row, row + w);
  }
  return RegionMask(mask.height(), mask.width(), std::move(values));
}

ImagePlane resize_bilinear(const ImagePlane& img, int height, int width) {
  if (height <= 0 || width <= 0) {
    throw ConfigError(fmt::format("invalid resize target {}x{}", height, width));
  }
  if (height == img.height() && width == img.width()) return img;
  std::vector<float> data(static_cast<std::size_t>(height) * width * img.channels());
  const double sy = static_cast<double>(img.height()) / height;
  const double sx = static_cast<double>(img.width()) / width;
  std::size_t k = 0;
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < height; ++y) {
      const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height() - 1.0);
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, img.height() - 1);
      const double wy = fy - y0;
      for (int x = 0; x < width; ++x) {
        const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width() - 1.0);
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(x0 + 1, img.width() - 1);
        const double wx = fx - x0;
        const double top = img.at(c, y0, x0) * (1 - wx) + img.at(c, y0, x1) * wx;
        const double bottom = img.at(c, y1, x0) * (1 - wx) + img.at(c, y1, x1) * wx;
        data[k++] = static_cast<float>(std::clamp(top * (1 - wy) + bottom * wy, 0.0, 1.0));
      }
    }
  }
  return ImagePlane(height, width, img.channels(), std::move(data));
}

RegionMask resize_nearest(const RegionMask& mask, int height, int width) {
  if (height <= 0 || width <= 0) {
    throw ConfigError(fmt::format("invalid resize target {}x{}", height, width));
  }
  std::vector<std::uint8_t> values(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(mask.height() - 1, static_cast<int>((y + 0.5) * mask.height() / height));
    for (int x = 0; x < width; ++x) {
      const int sx = std::min(mask.width() - 1, static_cast<int>((x + 0.5) * mask.width() / width));
      values[static_cast<std::size_t>(y) * width + x] = mask.at(sy, sx);
    }
  }
  return RegionMask(height, width, std::move(values));
}

ImagePlane pad_to_multiple(const ImagePlane& img, int multiple) {
  if (multiple <= 1) return img;
  const int h = (img.height() + multiple - 1) / multiple * multiple;
  const int w = (img.width() + multiple - 1) / multiple * multiple;
  if (h == img.height() && w == img.width()) return img;
  std::vector<float> data(static_cast<std::size_t>(h) * w * img.channels());
  std::size_t k = 0;
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      const int sy = std::min(y, img.height() - 1);
      for (int x = 0; x < w; ++x) data[k++] = img.at(c, sy, std::min(x, img.width() - 1));
    }
  }
  return ImagePlane(h, w, img.channels(), std::move(data));
}

}  // namespace fieldnet
