#include "fieldnet/synthesis.hpp"

#include "fieldnet/error.hpp"
#include "fieldnet/parallel.hpp"
#include "fieldnet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace fieldnet {

using json = nlohmann::json;

ShadowMatte::ShadowMatte(int height, int width, float fill)
    : height_(height), width_(width),
      values_(static_cast<std::size_t>(height) * width, std::clamp(fill, 0.0f, 1.0f)) {}

ShadowMatte::ShadowMatte(int height, int width, std::vector<float> values)
    : height_(height), width_(width), values_(std::move(values)) {
  if (values_.size() != static_cast<std::size_t>(height) * width) {
    throw ConfigError(fmt::format("matte has {} values, expected {}x{}", values_.size(), height,
                                  width));
  }
  for (float v : values_) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ConfigError(fmt::format("matte value {} outside [0,1]", v));
  }
}

ShadowMatte ShadowMatte::from_image(const ImagePlane& img) {
  const auto plane = img.channel(0);
  return ShadowMatte(img.height(), img.width(), std::vector<float>(plane.begin(), plane.end()));
}

ImagePlane ShadowMatte::to_image() const { return ImagePlane(height_, width_, 1, values_); }

AffineShadeParams sample_shade_params(std::uint64_t seed, const ShadeSampling& ranges) {
  Rng rng(seed);
  AffineShadeParams p;
  p.gamma = rng.uniform(ranges.gamma_min, ranges.gamma_max);
  for (auto& a : p.alpha) a = rng.uniform(ranges.alpha_min, ranges.alpha_max);
  return p;
}

namespace {

void check_params(const AffineShadeParams& p) {
  if (!(p.gamma > 0.0) || !std::isfinite(p.gamma)) {
    throw ConfigError(fmt::format("shade gamma must be > 0, got {}", p.gamma));
  }
}

void check_rgb(const ImagePlane& img, const char* what) {
  if (img.channels() != 3) {
    throw ConfigError(fmt::format("{} must have 3 channels, got {}", what, img.channels()));
  }
}

}  // namespace

ImagePlane shade(const ImagePlane& shadow_free, const AffineShadeParams& params) {
  check_params(params);
  check_rgb(shadow_free, "shadow-free image");
  const std::size_t n = shadow_free.pixel_count();
  std::vector<float> out(3 * n);
  for (int k = 0; k < 3; ++k) {
    const auto src = shadow_free.channel(k);
    for (std::size_t i = 0; i < n; ++i) {
      const double v = src[i] / params.gamma - params.alpha[k] / params.gamma;
      out[k * n + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return ImagePlane(shadow_free.height(), shadow_free.width(), 3, std::move(out));
}

std::vector<double> unshade(const ImagePlane& shaded, const AffineShadeParams& params) {
  check_params(params);
  check_rgb(shaded, "shaded image");
  const std::size_t n = shaded.pixel_count();
  std::vector<double> out(3 * n);
  for (int k = 0; k < 3; ++k) {
    const auto src = shaded.channel(k);
    for (std::size_t i = 0; i < n; ++i) out[k * n + i] = params.alpha[k] + params.gamma * src[i];
  }
  return out;
}

ImagePlane composite(const ImagePlane& shadow_free, const ImagePlane& shaded,
                     const ShadowMatte& matte) {
  if (!shadow_free.same_dims(shaded) || matte.height() != shadow_free.height() ||
      matte.width() != shadow_free.width()) {
    throw ConfigError(fmt::format(
        "composite dims differ: shadow-free {}x{}x{}, shaded {}x{}x{}, matte {}x{}",
        shadow_free.height(), shadow_free.width(), shadow_free.channels(), shaded.height(),
        shaded.width(), shaded.channels(), matte.height(), matte.width()));
  }
  const std::size_t n = shadow_free.pixel_count();
  const auto m = matte.values();
  std::vector<float> out(n * shadow_free.channels());
  for (int c = 0; c < shadow_free.channels(); ++c) {
    const auto sf = shadow_free.channel(c);
    const auto sh = shaded.channel(c);
    for (std::size_t i = 0; i < n; ++i) {
      // Exact endpoints: m = 0 and m = 1 reproduce the inputs bit-for-bit.
      if (m[i] == 0.0f) {
        out[c * n + i] = sf[i];
      } else if (m[i] == 1.0f) {
        out[c * n + i] = sh[i];
      } else {
        const float v = (1.0f - m[i]) * sf[i] + m[i] * sh[i];
        out[c * n + i] = std::clamp(v, std::min(sf[i], sh[i]), std::max(sf[i], sh[i]));
      }
    }
  }
  return ImagePlane(shadow_free.height(), shadow_free.width(), shadow_free.channels(),
                    std::move(out));
}

std::vector<float> gaussian_blur(std::span<const float> plane, int height, int width,
                                 double sigma) {
  std::vector<float> src(plane.begin(), plane.end());
  if (sigma <= 0.0) return src;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += kernel[i + radius];
  }
  for (auto& k : kernel) k /= total;

  std::vector<float> tmp(src.size());
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int sx = std::clamp(x + i, 0, width - 1);
        acc += kernel[i + radius] * src[static_cast<std::size_t>(y) * width + sx];
      }
      tmp[static_cast<std::size_t>(y) * width + x] = static_cast<float>(acc);
    }
  }
  std::vector<float> out(src.size());
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int sy = std::clamp(y + i, 0, height - 1);
        acc += kernel[i + radius] * tmp[static_cast<std::size_t>(sy) * width + x];
      }
      out[static_cast<std::size_t>(y) * width + x] = static_cast<float>(acc);
    }
  }
  return out;
}

ShadowMatte procedural_matte(int height, int width, std::uint64_t seed, double blur_sigma) {
  if (height < 8 || width < 8) {
    throw ConfigError(fmt::format("procedural matte needs at least 8x8, got {}x{}", height, width));
  }
  if (blur_sigma < 0.0) throw ConfigError("blur_sigma must be >= 0");

  Rng rng(seed);
  const double extent = std::min(height, width);
  const double cx = rng.uniform(0.3, 0.7) * width;
  const double cy = rng.uniform(0.3, 0.7) * height;
  const double base_radius = rng.uniform(0.2, 0.35) * extent;
  const int vertices = 5 + static_cast<int>(rng.uniform_int(6));

  std::vector<double> px(vertices), py(vertices);
  const double step = 2.0 * std::numbers::pi / vertices;
  const double phase = rng.uniform(0.0, step);
  for (int i = 0; i < vertices; ++i) {
    const double angle = phase + i * step + rng.uniform(-0.3, 0.3) * step;
    const double radius = base_radius * rng.uniform(0.7, 1.3);
    px[i] = cx + radius * std::cos(angle);
    py[i] = cy + radius * std::sin(angle);
  }

  std::vector<float> values(static_cast<std::size_t>(height) * width, 0.0f);
  for (int y = 0; y < height; ++y) {
    const double sy = y + 0.5;
    for (int x = 0; x < width; ++x) {
      const double sx = x + 0.5;
      bool inside = false;
      for (int i = 0, j = vertices - 1; i < vertices; j = i++) {
        if ((py[i] > sy) != (py[j] > sy) &&
            sx < (px[j] - px[i]) * (sy - py[i]) / (py[j] - py[i]) + px[i]) {
          inside = !inside;
        }
      }
      values[static_cast<std::size_t>(y) * width + x] = inside ? 1.0f : 0.0f;
    }
  }
  auto blurred = gaussian_blur(values, height, width, blur_sigma);
  for (auto& v : blurred) v = std::clamp(v, 0.0f, 1.0f);
  return ShadowMatte(height, width, std::move(blurred));
}

RegionMask binarize_matte(const ShadowMatte& matte, double threshold) {
  std::vector<std::uint8_t> values(matte.values().size());
  std::transform(matte.values().begin(), matte.values().end(), values.begin(),
                 [threshold](float m) { return static_cast<std::uint8_t>(m >= threshold ? 1 : 0); });
  return RegionMask(matte.height(), matte.width(), std::move(values));
}

namespace {

SynthesisManifestEntry parse_entry(const json& j) {
  if (!j.is_object()) throw ConfigError("manifest line is not a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "shadow_free" && key != "matte" && key != "procedural" && key != "gamma" &&
        key != "alpha" && key != "id") {
      throw ConfigError(fmt::format("unknown manifest key '{}'", key));
    }
  }
  SynthesisManifestEntry e;
  if (!j.contains("shadow_free")) throw ConfigError("manifest entry lacks 'shadow_free'");
  e.shadow_free = j.at("shadow_free").get<std::string>();
  if (j.contains("matte") && j.contains("procedural")) {
    throw ConfigError("manifest entry has both 'matte' and 'procedural'");
  }
  if (j.contains("matte")) e.matte_path = j.at("matte").get<std::string>();
  if (j.contains("procedural")) {
    const auto& p = j.at("procedural");
    ProceduralMatteSpec spec;
    spec.seed = p.value("seed", std::uint64_t{0});
    spec.blur_sigma = p.value("blur_sigma", 3.0);
    e.procedural = spec;
  }
  if (j.contains("gamma") != j.contains("alpha")) {
    throw ConfigError("manifest entry must give both 'gamma' and 'alpha' or neither");
  }
  if (j.contains("gamma")) {
    AffineShadeParams p;
    p.gamma = j.at("gamma").get<double>();
    const auto alpha = j.at("alpha").get<std::vector<double>>();
    if (alpha.size() != 3) throw ConfigError("'alpha' must have 3 values");
    std::copy(alpha.begin(), alpha.end(), p.alpha.begin());
    e.params = p;
  }
  if (j.contains("id")) e.id = j.at("id").get<std::string>();
  return e;
}

}  // namespace

std::vector<SynthesisManifestEntry> parse_manifest(const std::filesystem::path& path,
                                                   std::vector<SynthesisFailure>& failures,
                                                   std::vector<std::size_t>* line_numbers) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open manifest '{}'", path.string()));
  const auto base = path.parent_path();
  std::vector<SynthesisManifestEntry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto entry = parse_entry(json::parse(line));
      if (entry.shadow_free.is_relative()) entry.shadow_free = base / entry.shadow_free;
      if (entry.matte_path && entry.matte_path->is_relative()) {
        entry.matte_path = base / *entry.matte_path;
      }
      entries.push_back(std::move(entry));
      if (line_numbers) line_numbers->push_back(line_no);
    } catch (const std::exception& ex) {
      failures.push_back({line_no, ex.what()});
    }
  }
  return entries;
}

SynthesisSummary generate_dataset(const std::vector<SynthesisManifestEntry>& manifest,
                                  const std::filesystem::path& out_dir,
                                  const SynthesisOptions& options,
                                  std::span<const std::size_t> line_numbers) {
  SynthesisSummary summary;
  summary.entries = manifest.size();
  summary.index_path = out_dir / "index.jsonl";

  std::vector<std::string> ids(manifest.size());
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    ids[i] = manifest[i].id.empty() ? fmt::format("{:05d}", i) : manifest[i].id;
  }

  if (!options.dry_run) std::filesystem::create_directories(out_dir);

  std::vector<std::optional<json>> records(manifest.size());
  std::vector<std::string> errors(manifest.size());

  parallel_for(manifest.size(), [&](std::size_t i) {
    const auto& entry = manifest[i];
    try {
      const ImagePlane shadow_free = load_image(entry.shadow_free);
      if (shadow_free.channels() != 3) {
        throw DataError(fmt::format("'{}' is not an RGB image", entry.shadow_free.string()));
      }
      ShadowMatte matte;
      if (entry.matte_path) {
        matte = ShadowMatte::from_image(load_image(*entry.matte_path));
        if (matte.height() != shadow_free.height() || matte.width() != shadow_free.width()) {
          throw DataError(fmt::format("matte '{}' is {}x{} but image is {}x{}",
                                      entry.matte_path->string(), matte.height(), matte.width(),
                                      shadow_free.height(), shadow_free.width()));
        }
      } else {
        const ProceduralMatteSpec spec = entry.procedural.value_or(
            ProceduralMatteSpec{mix_seed(options.seed, i), 3.0});
        matte = procedural_matte(shadow_free.height(), shadow_free.width(), spec.seed,
                                 spec.blur_sigma);
      }
      const AffineShadeParams params =
          entry.params.value_or(sample_shade_params(mix_seed(options.seed ^ 0x5eedULL, i),
                                                    options.sampling));
      const ImagePlane shaded = shade(shadow_free, params);
      const ImagePlane shadow = composite(shadow_free, shaded, matte);
      const RegionMask mask = binarize_matte(matte, options.binarize_threshold);

      const std::string& id = ids[i];
      json rec;
      rec["id"] = id;
      rec["shadow"] = id + "_shadow.png";
      rec["shadow_free"] = id + "_shadow_free.png";
      rec["mask"] = id + "_mask.png";
      rec["matte"] = id + "_matte.png";
      if (!options.dry_run) {
        save_image(shadow, out_dir / rec["shadow"].get<std::string>());
        save_image(shadow_free, out_dir / rec["shadow_free"].get<std::string>());
        save_mask(mask, out_dir / rec["mask"].get<std::string>());
        save_image(matte.to_image(), out_dir / rec["matte"].get<std::string>(), BitDepth::k16);
      }
      records[i] = std::move(rec);
    } catch (const std::exception& ex) {
      errors[i] = ex.what();
    }
  });

  std::string index_text;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    if (records[i]) {
      index_text += records[i]->dump() + "\n";
      ++summary.written;
    } else {
      const std::size_t line = i < line_numbers.size() ? line_numbers[i] : i + 1;
      summary.failures.push_back({line, errors[i]});
    }
  }
  if (!options.dry_run) {
    std::ofstream out(summary.index_path, std::ios::binary);
    if (!out) throw DataError(fmt::format("cannot write '{}'", summary.index_path.string()));
    out << index_text;
  }
  return summary;
}

}  // namespace fieldnet
