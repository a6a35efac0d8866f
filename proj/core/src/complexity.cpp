#include "fieldnet/error.hpp"
#include "fieldnet/evaluation.hpp"
#include "fieldnet/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <fmt/format.h>

namespace fieldnet {

std::uint64_t conv_flops(int kernel, int in_channels, int out_channels, int out_h, int out_w,
                         bool bias) {
  const std::uint64_t positions = static_cast<std::uint64_t>(out_h) * out_w;
  std::uint64_t flops = 2ULL * kernel * kernel * in_channels * out_channels * positions;
  if (bias) flops += positions * out_channels;
  return flops;
}

namespace {

std::uint64_t conv_params(int kernel, int in, int out) {
  return static_cast<std::uint64_t>(kernel) * kernel * in * out + out;
}

struct Walker {
  ComplexityAccount account;

  void conv(const std::string& name, int k, int in, int out, int ho, int wo) {
    account.layers.push_back({name, conv_params(k, in, out), conv_flops(k, in, out, ho, wo, true)});
  }
  void elementwise(const std::string& name, std::uint64_t elements, int ops = 1) {
    account.layers.push_back({name, 0, elements * static_cast<std::uint64_t>(ops)});
  }
};

// Parameters of one encoder branch (levels + bottleneck conv).
std::uint64_t encoder_params(const ModelConfig& cfg, int in_channels) {
  std::uint64_t total = 0;
  int in = in_channels;
  for (int c : cfg.ladder) {
    total += conv_params(cfg.kernel, in, c) + conv_params(cfg.kernel, c, c);
    in = c;
  }
  return total + conv_params(cfg.kernel, in, cfg.latent_channels);
}

std::uint64_t heads_params(const ModelConfig& cfg) {
  return 2 * conv_params(1, cfg.latent_channels, 2 * cfg.latent_channels);
}

}  // namespace

ComplexityAccount count_flops(const ModelConfig& config, int height, int width) {
  config.validate();
  if (height < 1 || width < 1) throw ConfigError("count_flops: size must be positive");
  const int m = config.stride_multiple();
  int h = (height + m - 1) / m * m;
  int w = (width + m - 1) / m * m;
  const int k = config.kernel;
  const int d = config.latent_channels;
  const int levels = config.levels();

  Walker walk;
  std::vector<int> skip_channels{3};
  int in = 3;
  for (int i = 0; i < levels; ++i) {
    h /= 2;
    w /= 2;
    const int c = config.ladder[i];
    const std::uint64_t elems = static_cast<std::uint64_t>(c) * h * w;
    walk.conv(fmt::format("enc.{}.down", i), k, in, c, h, w);
    walk.elementwise(fmt::format("enc.{}.down.act", i), elems);
    walk.conv(fmt::format("enc.{}.refine", i), k, c, c, h, w);
    walk.elementwise(fmt::format("enc.{}.refine.act", i), elems);
    skip_channels.push_back(c);
    in = c;
  }
  walk.conv("enc.bottleneck", k, in, d, h, w);
  const std::uint64_t latent_elems = static_cast<std::uint64_t>(d) * h * w;
  walk.elementwise("prior.pool", latent_elems);
  walk.conv("prior.shift", 1, d, 2 * d, 1, 1);
  walk.conv("prior.scale", 1, d, 2 * d, 1, 1);
  const std::size_t per_sample_begin = walk.account.layers.size();
  // Instance statistics (3 per element), normalize (2) and modulate (2).
  walk.elementwise("pem", latent_elems, 7);

  int prev = d;
  for (int j = levels - 1; j >= 0; --j) {
    h *= 2;
    w *= 2;
    const int stage = levels - 1 - j;
    const int out = config.ladder[std::max(j - 1, 0)];
    walk.elementwise(fmt::format("dec.{}.upsample", stage), static_cast<std::uint64_t>(prev) * h * w);
    walk.conv(fmt::format("dec.{}.fuse", stage), k, prev + skip_channels[j], out, h, w);
    const std::uint64_t elems = static_cast<std::uint64_t>(out) * h * w;
    walk.elementwise(fmt::format("dec.{}.fuse.act", stage), elems);
    walk.conv(fmt::format("dec.{}.refine", stage), k, out, out, h, w);
    walk.elementwise(fmt::format("dec.{}.refine.act", stage), elems);
    prev = out;
  }
  walk.conv("out", 1, prev, 3, h, w);
  walk.elementwise("out.sigmoid", 3ULL * h * w);

  ComplexityAccount& a = walk.account;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    a.flops += a.layers[i].flops;
    a.inference_params += a.layers[i].params;
    if (i >= per_sample_begin) a.flops_per_extra_sample += a.layers[i].flops;
  }
  a.params = count_params(config);
  return a;
}

std::uint64_t count_params(const ModelConfig& config) {
  config.validate();
  std::uint64_t total = encoder_params(config, 3) + encoder_params(config, 6);
  total += 2 * heads_params(config);
  int prev = config.latent_channels;
  for (int j = config.levels() - 1; j >= 0; --j) {
    const int skip = j == 0 ? 3 : config.ladder[j - 1];
    const int out = config.ladder[std::max(j - 1, 0)];
    total += conv_params(config.kernel, prev + skip, out) + conv_params(config.kernel, out, out);
    prev = out;
  }
  return total + conv_params(1, prev, 3);
}

std::uint64_t count_params(const FieldNet<float>& model) { return model.parameter_count(); }

ComplexityReport benchmark(const FieldNet<float>& model, int height, int width, int runs,
                           int samples) {
  if (runs < 10) throw ConfigError(fmt::format("benchmark: runs must be >= 10, got {}", runs));
  if (samples < 1) throw ConfigError("benchmark: samples must be >= 1");
  Rng rng(mix_seed(model.config().seed, 0xBE4C));
  std::vector<float> values(static_cast<std::size_t>(3) * height * width);
  for (auto& v : values) v = static_cast<float>(rng.uniform());
  const ImagePlane image(height, width, 3, std::move(values));

  for (int i = 0; i < 5; ++i) model.infer_map(image, samples, static_cast<std::uint64_t>(i));
  std::vector<double> times;
  for (int i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    model.infer_map(image, samples, static_cast<std::uint64_t>(i));
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  double mean = 0.0;
  for (double t : times) mean += t;
  mean /= runs;
  double var = 0.0;
  for (double t : times) var += (t - mean) * (t - mean);
  var /= (runs - 1);

  ComplexityReport report;
  report.params = model.parameter_count();
  const ComplexityAccount account = count_flops(model.config(), height, width);
  report.flops = account.flops + (samples - 1) * account.flops_per_extra_sample;
  report.height = height;
  report.width = width;
  report.samples = samples;
  report.runs = runs;
  report.mean_ms = mean;
  report.std_ms = std::sqrt(var);
  report.fps = 1000.0 / mean;
  return report;
}

}  // namespace fieldnet
