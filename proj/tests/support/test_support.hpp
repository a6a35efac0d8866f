#pragma once

// Independent reference implementations and fixtures shared by the unit and
// acceptance tests. Nothing here calls into the code under test beyond the
// plain data types.

#include "fieldnet/autodiff.hpp"
#include "fieldnet/imaging.hpp"
#include "fieldnet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <vector>

#include <unistd.h>

namespace fieldnet::testing {

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("fieldnet_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
}

inline RegionMask random_mask(Rng& rng, int h, int w, double density) {
  std::vector<std::uint8_t> v(static_cast<std::size_t>(h) * w);
  for (auto& x : v) x = rng.uniform() < density ? 1 : 0;
  return RegionMask(h, w, std::move(v));
}

inline ImagePlane random_image(Rng& rng, int h, int w, int c = 3) {
  std::vector<float> v(static_cast<std::size_t>(h) * w * c);
  for (auto& x : v) x = static_cast<float>(rng.uniform());
  return ImagePlane(h, w, c, std::move(v));
}

// Smooth colourful pattern with some noise; distinct per seed.
inline ImagePlane textured_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  const double fx = 0.15 + 0.2 * rng.uniform();
  const double fy = 0.1 + 0.2 * rng.uniform();
  const double phase = 6.28 * rng.uniform();
  std::vector<float> v(static_cast<std::size_t>(3) * h * w);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double base = 0.5 + 0.3 * std::sin(fx * x + phase + c) * std::cos(fy * y - c);
        const double noise = 0.1 * (rng.uniform() - 0.5);
        v[(static_cast<std::size_t>(c) * h + y) * w + x] =
            static_cast<float>(std::clamp(base + noise, 0.05, 0.95));
      }
    }
  }
  return ImagePlane(h, w, 3, std::move(v));
}

// O(n^2) Euclidean distance from each foreground pixel to the nearest
// background pixel.
inline std::vector<double> brute_force_edt(const RegionMask& mask) {
  const int h = mask.height();
  const int w = mask.width();
  std::vector<double> d(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.at(y, x)) continue;
      double best = std::numeric_limits<double>::infinity();
      for (int v = 0; v < h; ++v) {
        for (int u = 0; u < w; ++u) {
          if (mask.at(v, u)) continue;
          best = std::min(best, std::sqrt(double((y - v) * (y - v) + (x - u) * (x - u))));
        }
      }
      d[static_cast<std::size_t>(y) * w + x] = best;
    }
  }
  return d;
}

// Direct-loop cross-correlation with asymmetric zero padding.
struct NaiveConv {
  ad::Shape shape;
  std::vector<double> values;
};

inline NaiveConv naive_conv2d(const ad::Shape& xs, const std::vector<double>& x, int cout, int k,
                              const std::vector<double>& weight, const std::vector<double>& bias,
                              int stride, int pad, int pad_end) {
  const int ho = (xs.h + pad + pad_end - k) / stride + 1;
  const int wo = (xs.w + pad + pad_end - k) / stride + 1;
  NaiveConv out{{xs.n, cout, ho, wo}, {}};
  out.values.assign(out.shape.numel(), 0.0);
  for (int n = 0; n < xs.n; ++n)
    for (int o = 0; o < cout; ++o)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (int c = 0; c < xs.c; ++c)
            for (int a = 0; a < k; ++a)
              for (int b = 0; b < k; ++b) {
                const int y = i * stride - pad + a;
                const int xx = j * stride - pad + b;
                if (y < 0 || y >= xs.h || xx < 0 || xx >= xs.w) continue;
                acc += weight[((static_cast<std::size_t>(o) * xs.c + c) * k + a) * k + b] *
                       x[((static_cast<std::size_t>(n) * xs.c + c) * xs.h + y) * xs.w + xx];
              }
          out.values[((static_cast<std::size_t>(n) * cout + o) * ho + i) * wo + j] = acc;
        }
  return out;
}

template <typename T>
ad::Tensor<T> random_tensor(ad::Shape shape, Rng& rng, double scale = 1.0,
                            bool requires_grad = false) {
  std::vector<T> v(shape.numel());
  for (auto& x : v) x = static_cast<T>(rng.normal() * scale);
  return ad::Tensor<T>::from(shape, std::move(v), requires_grad);
}

// Diagonal Gaussian log-density, written out per dimension.
inline double gaussian_log_pdf(double x, double mu, double logvar) {
  const double var = std::exp(logvar);
  return -0.5 * (std::log(2.0 * 3.14159265358979323846) + logvar + (x - mu) * (x - mu) / var);
}

}  // namespace fieldnet::testing
