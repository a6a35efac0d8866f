#include "fieldnet/error.hpp"
#include "fieldnet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

namespace fieldnet {

namespace {

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;
constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

void require_same_dims(const ImagePlane& a, const ImagePlane& b, const char* what) {
  if (!a.same_dims(b)) {
    throw ConfigError(fmt::format("{}: images differ in size ({}x{}x{} vs {}x{}x{})", what,
                                  a.width(), a.height(), a.channels(), b.width(), b.height(),
                                  b.channels()));
  }
}

void require_mask_dims(const ImagePlane& img, const RegionMask& mask, const char* what) {
  if (mask.height() != img.height() || mask.width() != img.width()) {
    throw ConfigError(fmt::format("{}: mask {}x{} does not match image {}x{}", what,
                                  mask.width(), mask.height(), img.width(), img.height()));
  }
}

std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(size);
  const int r = size / 2;
  double total = 0.0;
  for (int i = 0; i < size; ++i) {
    const double x = i - r;
    k[i] = std::exp(-x * x / (2.0 * sigma * sigma));
    total += k[i];
  }
  for (auto& v : k) v /= total;
  return k;
}

// Separable filtering keeping only fully covered positions.
std::vector<double> filter_valid(const std::vector<double>& src, int h, int w,
                                 const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int wo = w - n + 1;
  const int ho = h - n + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * wo);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += k[i] * src[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * wo + x] = acc;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(ho) * wo);
  for (int y = 0; y < ho; ++y) {
    for (int x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += k[i] * tmp[static_cast<std::size_t>(y + i) * wo + x];
      out[static_cast<std::size_t>(y) * wo + x] = acc;
    }
  }
  return out;
}

// Same-size separable filtering with edge replication.
std::vector<double> filter_same(const std::vector<double>& src, int h, int w,
                                const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int r = n / 2;
  std::vector<double> tmp(src.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        const int xx = std::clamp(x + i - r, 0, w - 1);
        acc += k[i] * src[static_cast<std::size_t>(y) * w + xx];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  }
  std::vector<double> out(src.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        const int yy = std::clamp(y + i - r, 0, h - 1);
        acc += k[i] * tmp[static_cast<std::size_t>(yy) * w + x];
      }
      out[static_cast<std::size_t>(y) * w + x] = acc;
    }
  }
  return out;
}

std::vector<double> luma(const ImagePlane& img) {
  const ImagePlane g = to_grayscale(img);
  return {g.samples().begin(), g.samples().end()};
}

double ssim_impl(const ImagePlane& pred, const ImagePlane& ref, const RegionMask* mask) {
  require_same_dims(pred, ref, "ssim");
  if (mask) require_mask_dims(pred, *mask, "ssim");
  const int h = pred.height();
  const int w = pred.width();
  if (h < kSsimWindow || w < kSsimWindow) {
    throw ConfigError(fmt::format("ssim: image {}x{} is smaller than the {}x{} window", w, h,
                                  kSsimWindow, kSsimWindow));
  }
  const auto x = luma(pred);
  const auto y = luma(ref);
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto k = gaussian_kernel(kSsimWindow, kSsimSigma);
  const auto mx = filter_valid(x, h, w, k);
  const auto my = filter_valid(y, h, w, k);
  const auto exx = filter_valid(xx, h, w, k);
  const auto eyy = filter_valid(yy, h, w, k);
  const auto exy = filter_valid(xy, h, w, k);
  const int r = kSsimWindow / 2;
  const int ho = h - kSsimWindow + 1;
  const int wo = w - kSsimWindow + 1;
  double total = 0.0;
  std::size_t count = 0;
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      if (mask && !mask->at(oy + r, ox + r)) continue;
      const std::size_t i = static_cast<std::size_t>(oy) * wo + ox;
      const double sx = exx[i] - mx[i] * mx[i];
      const double sy = eyy[i] - my[i] * my[i];
      const double sxy = exy[i] - mx[i] * my[i];
      total += ((2.0 * mx[i] * my[i] + kC1) * (2.0 * sxy + kC2)) /
               ((mx[i] * mx[i] + my[i] * my[i] + kC1) * (sx + sy + kC2));
      ++count;
    }
  }
  if (count == 0) throw DataError("ssim: empty region");
  return total / static_cast<double>(count);
}

double psnr_impl(const ImagePlane& pred, const ImagePlane& ref, const RegionMask* mask) {
  require_same_dims(pred, ref, "psnr");
  if (mask) require_mask_dims(pred, *mask, "psnr");
  const std::size_t plane = pred.pixel_count();
  const auto p = pred.samples();
  const auto q = ref.samples();
  double sum = 0.0;
  std::size_t count = 0;
  for (int c = 0; c < pred.channels(); ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      if (mask && !mask->values()[i]) continue;
      const double d = static_cast<double>(p[c * plane + i]) - q[c * plane + i];
      sum += d * d;
      ++count;
    }
  }
  if (count == 0) throw DataError("psnr: empty region");
  const double mse = sum / static_cast<double>(count);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

double rmse_lab_impl(const ImagePlane& pred, const ImagePlane& ref, const RegionMask* mask,
                     LabErrorMode mode) {
  require_same_dims(pred, ref, "rmse_lab");
  if (pred.channels() != 3) throw ConfigError("rmse_lab: images must have 3 channels");
  if (mask) require_mask_dims(pred, *mask, "rmse_lab");
  const LabImage a = srgb_to_lab(pred);
  const LabImage b = srgb_to_lab(ref);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < a.l.size(); ++i) {
    if (mask && !mask->values()[i]) continue;
    const double dl = a.l[i] - b.l[i];
    const double da = a.a[i] - b.a[i];
    const double db = a.b[i] - b.b[i];
    if (mode == LabErrorMode::kMeanAbsolute) {
      sum += (std::fabs(dl) + std::fabs(da) + std::fabs(db)) / 3.0;
    } else {
      sum += (dl * dl + da * da + db * db) / 3.0;
    }
    ++count;
  }
  if (count == 0) throw DataError("rmse_lab: empty region");
  const double mean = sum / static_cast<double>(count);
  return mode == LabErrorMode::kMeanAbsolute ? mean : std::sqrt(mean);
}

std::vector<double> sobel_magnitude(const std::vector<double>& g, int h, int w) {
  std::vector<double> out(g.size());
  auto at = [&](int y, int x) {
    return g[static_cast<std::size_t>(std::clamp(y, 0, h - 1)) * w + std::clamp(x, 0, w - 1)];
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
      const double gy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
      out[static_cast<std::size_t>(y) * w + x] = std::sqrt(gx * gx + gy * gy);
    }
  }
  return out;
}

}  // namespace

double psnr(const ImagePlane& pred, const ImagePlane& ref) { return psnr_impl(pred, ref, nullptr); }
double psnr(const ImagePlane& pred, const ImagePlane& ref, const RegionMask& mask) {
  return psnr_impl(pred, ref, &mask);
}

double ssim(const ImagePlane& pred, const ImagePlane& ref) { return ssim_impl(pred, ref, nullptr); }
double ssim(const ImagePlane& pred, const ImagePlane& ref, const RegionMask& mask) {
  return ssim_impl(pred, ref, &mask);
}

double rmse_lab(const ImagePlane& pred, const ImagePlane& ref, LabErrorMode mode) {
  return rmse_lab_impl(pred, ref, nullptr, mode);
}
double rmse_lab(const ImagePlane& pred, const ImagePlane& ref, const RegionMask& mask,
                LabErrorMode mode) {
  return rmse_lab_impl(pred, ref, &mask, mode);
}

double nrss(const ImagePlane& img, const NrssOptions& options) {
  const int h = img.height();
  const int w = img.width();
  if (h < 64 || w < 64) throw ConfigError(fmt::format("nrss: image {}x{} is below 64x64", w, h));
  const int bs = options.block;
  if (bs < 2 || options.blocks < 1 || options.blur_size < 1 || options.blur_size % 2 == 0) {
    throw ConfigError("nrss: invalid options");
  }
  const auto g = luma(img);
  const auto blurred = filter_same(g, h, w, gaussian_kernel(options.blur_size, options.blur_sigma));
  const auto grad = sobel_magnitude(g, h, w);
  const auto grad_blur = sobel_magnitude(blurred, h, w);

  struct Block {
    int y;
    int x;
    double variance;
  };
  std::vector<Block> blocks;
  const double n = static_cast<double>(bs) * bs;
  for (int by = 0; by + bs <= h; by += bs) {
    for (int bx = 0; bx + bs <= w; bx += bs) {
      double s = 0.0, ss = 0.0;
      for (int y = by; y < by + bs; ++y) {
        for (int x = bx; x < bx + bs; ++x) {
          const double v = grad[static_cast<std::size_t>(y) * w + x];
          s += v;
          ss += v * v;
        }
      }
      const double mean = s / n;
      blocks.push_back({by, bx, ss / n - mean * mean});
    }
  }
  const std::size_t keep = std::min<std::size_t>(options.blocks, blocks.size());
  std::stable_sort(blocks.begin(), blocks.end(),
                   [](const Block& a, const Block& b) { return a.variance > b.variance; });

  double total = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    double sa = 0.0, sb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
    for (int y = blocks[i].y; y < blocks[i].y + bs; ++y) {
      for (int x = blocks[i].x; x < blocks[i].x + bs; ++x) {
        const std::size_t j = static_cast<std::size_t>(y) * w + x;
        const double a = grad[j];
        const double b = grad_blur[j];
        sa += a;
        sb += b;
        saa += a * a;
        sbb += b * b;
        sab += a * b;
      }
    }
    const double ma = sa / n, mb = sb / n;
    const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cab = sab / n - ma * mb;
    total += ((2 * ma * mb + kC1) * (2 * cab + kC2)) /
             ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
  }
  return 1.0 - total / static_cast<double>(keep);
}

}  // namespace fieldnet
