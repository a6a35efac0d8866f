#pragma once

#include "fieldnet/imaging.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fieldnet {

// Per-pixel shadow opacity in [0,1]: 1 = umbra, (0,1) = penumbra, 0 = lit.
class ShadowMatte {
 public:
  ShadowMatte() = default;
  ShadowMatte(int height, int width, float fill = 0.0f);
  // Throws ConfigError on size mismatch or values outside [0,1].
  ShadowMatte(int height, int width, std::vector<float> values);

  int height() const { return height_; }
  int width() const { return width_; }
  float at(int y, int x) const { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  std::span<const float> values() const { return values_; }

  static ShadowMatte from_image(const ImagePlane& img);
  ImagePlane to_image() const;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<float> values_;
};

// Affine shade model: x_sf = alpha_k + gamma * x_shade.
struct AffineShadeParams {
  double gamma = 2.0;
  std::array<double, 3> alpha{0.0, 0.0, 0.0};
};

// Ranges used when a manifest entry leaves gamma/alpha unspecified.
struct ShadeSampling {
  double gamma_min = 1.5;
  double gamma_max = 3.0;
  double alpha_min = 0.0;
  double alpha_max = 0.1;
};

AffineShadeParams sample_shade_params(std::uint64_t seed, const ShadeSampling& ranges = {});

// x_shade = x_sf / gamma - alpha_k / gamma, clamped to [0,1].
ImagePlane shade(const ImagePlane& shadow_free, const AffineShadeParams& params);

// Inverse of shade() without clamping: x_sf = alpha_k + gamma * x_shade.
// Values are returned unclamped as raw samples (channel-major).
std::vector<double> unshade(const ImagePlane& shaded, const AffineShadeParams& params);

// x_s = (1 - m) x_sf + m x_shade.
ImagePlane composite(const ImagePlane& shadow_free, const ImagePlane& shaded,
                     const ShadowMatte& matte);

// Random star-convex polygon rasterized to {0,1} and blurred with a Gaussian
// of blur_sigma pixels. Deterministic per seed.
ShadowMatte procedural_matte(int height, int width, std::uint64_t seed, double blur_sigma);

// mask = 1 where m >= threshold.
RegionMask binarize_matte(const ShadowMatte& matte, double threshold = 0.5);

// Separable Gaussian blur with edge replication, radius ceil(3 sigma).
std::vector<float> gaussian_blur(std::span<const float> plane, int height, int width,
                                 double sigma);

struct ProceduralMatteSpec {
  std::uint64_t seed = 0;
  double blur_sigma = 3.0;
};

struct SynthesisManifestEntry {
  std::filesystem::path shadow_free;
  std::optional<std::filesystem::path> matte_path;
  std::optional<ProceduralMatteSpec> procedural;
  std::optional<AffineShadeParams> params;
  std::string id;  // output stem; defaults to the zero-padded entry index
};

struct SynthesisOptions {
  ShadeSampling sampling;
  std::uint64_t seed = 0;  // for entries without explicit params
  double binarize_threshold = 0.5;
  bool dry_run = false;
};

struct SynthesisFailure {
  std::size_t line = 0;  // 1-based manifest line
  std::string message;
};

struct SynthesisSummary {
  std::size_t entries = 0;
  std::size_t written = 0;
  std::vector<SynthesisFailure> failures;
  std::filesystem::path index_path;
};

// Parses the JSON-lines manifest. Malformed lines become failures rather
// than aborting the parse; `failures` receives them.
std::vector<SynthesisManifestEntry> parse_manifest(const std::filesystem::path& path,
                                                   std::vector<SynthesisFailure>& failures,
                                                   std::vector<std::size_t>* line_numbers = nullptr);

// Writes <id>_shadow.png, <id>_shadow_free.png, <id>_mask.png, <id>_matte.png
// (16-bit) per entry and an index.jsonl with paths relative to out_dir.
// Entries are independent: a failing entry is recorded and skipped.
SynthesisSummary generate_dataset(const std::vector<SynthesisManifestEntry>& manifest,
                                  const std::filesystem::path& out_dir,
                                  const SynthesisOptions& options = {},
                                  std::span<const std::size_t> line_numbers = {});

}  // namespace fieldnet
