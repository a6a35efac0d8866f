#include "fieldnet/model.hpp"

#include "fieldnet/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace fieldnet {

using ad::Shape;
using ad::Tensor;

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper_scale() {
  ModelConfig cfg;
  cfg.ladder = {32, 64, 128};
  cfg.latent_channels = 352;
  return cfg;
}

void ModelConfig::validate() const {
  if (ladder.empty()) throw ConfigError("model ladder must not be empty");
  for (std::size_t i = 0; i < ladder.size(); ++i) {
    if (ladder[i] <= 0 || (i > 0 && ladder[i] <= ladder[i - 1])) {
      throw ConfigError("model ladder must be positive and strictly increasing");
    }
  }
  if (ladder.size() > 8) throw ConfigError("model ladder is too deep");
  if (latent_channels <= 0) throw ConfigError("latent_channels must be > 0");
  if (kernel < 3 || kernel % 2 == 0) throw ConfigError("kernel must be odd and >= 3");
  if (samples < 1) throw ConfigError("samples must be >= 1");
  if (!(leaky_slope >= 0.0)) throw ConfigError("leaky_slope must be >= 0");
}

std::string ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["ladder"] = ladder;
  j["latent_channels"] = latent_channels;
  j["kernel"] = kernel;
  j["leaky_slope"] = leaky_slope;
  j["samples"] = samples;
  j["seed"] = seed;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("model config is not valid JSON: {}", e.what()));
  }
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig cfg;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "ladder") {
        cfg.ladder = value.get<std::vector<int>>();
      } else if (key == "latent_channels") {
        cfg.latent_channels = value.get<int>();
      } else if (key == "kernel") {
        cfg.kernel = value.get<int>();
      } else if (key == "leaky_slope") {
        cfg.leaky_slope = value.get<double>();
      } else if (key == "samples") {
        cfg.samples = value.get<int>();
      } else if (key == "seed") {
        cfg.seed = value.get<std::uint64_t>();
      } else {
        throw ConfigError(fmt::format("unknown model config key '{}'", key));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("bad model config value: {}", e.what()));
  }
  cfg.validate();
  return cfg;
}

template <std::floating_point T>
std::vector<double> log_density(const LatentDists<T>& prior, const Tensor<T>& a,
                                const Tensor<T>& b_raw) {
  const Shape& s = a.shape();
  const int d = s.c;
  std::vector<double> out(static_cast<std::size_t>(s.n), 0.0);
  const double log2pi = std::log(2.0 * std::numbers::pi);
  auto accumulate = [&](const DiagGaussian<T>& g, const Tensor<T>& z) {
    const auto mu = g.mu.data();
    const auto lv = g.logvar.data();
    const auto zv = z.data();
    for (int n = 0; n < s.n; ++n) {
      double acc = 0.0;
      for (int c = 0; c < d; ++c) {
        const std::size_t i = static_cast<std::size_t>(n) * d + c;
        const double diff = static_cast<double>(zv[i]) - mu[i];
        const double logvar = lv[i];
        acc += -0.5 * (log2pi + logvar + diff * diff * std::exp(-logvar));
      }
      out[n] += acc;
    }
  };
  accumulate(prior.shift, a);
  accumulate(prior.scale, b_raw);
  return out;
}

template <std::floating_point T>
Tensor<T> pem(const Tensor<T>& features, const LatentSample<T>& sample) {
  if (features.shape().c != sample.a.shape().c || features.shape().n != sample.a.shape().n) {
    throw ConfigError(fmt::format("pem: features {} do not match latent {}",
                                  features.shape().str(), sample.a.shape().str()));
  }
  const auto [mu, sigma] = ad::instance_stats(features);
  const Tensor<T> normalized = ad::div(ad::sub(features, mu), sigma);
  return ad::add(ad::mul(normalized, sample.b), sample.a);
}

template <std::floating_point T>
FieldNet<T>::FieldNet(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const int levels = config_.levels();
  const int k = config_.kernel;
  const int d = config_.latent_channels;
  const auto& ladder = config_.ladder;

  auto build_encoder = [&](const std::string& prefix, int in_channels,
                           std::vector<EncoderLevel>& levels_out, Conv& bottleneck) {
    int in = in_channels;
    for (int i = 0; i < levels; ++i) {
      EncoderLevel level;
      level.down = make_conv(fmt::format("{}.{}.down", prefix, i), in, ladder[i], k, 2, false);
      level.refine =
          make_conv(fmt::format("{}.{}.refine", prefix, i), ladder[i], ladder[i], k, 1, false);
      levels_out.push_back(std::move(level));
      in = ladder[i];
    }
    bottleneck = make_conv(prefix + ".bottleneck", in, d, k, 1, false);
  };
  build_encoder("enc", 3, encoder_, bottleneck_);
  build_encoder("post_enc", 6, post_encoder_, post_bottleneck_);

  prior_heads_.shift = make_conv("prior.shift", d, 2 * d, 1, 1, true);
  prior_heads_.scale = make_conv("prior.scale", d, 2 * d, 1, 1, true);
  post_heads_.shift = make_conv("post.shift", d, 2 * d, 1, 1, true);
  post_heads_.scale = make_conv("post.scale", d, 2 * d, 1, 1, true);

  int prev = d;
  for (int j = levels - 1; j >= 0; --j) {
    const int skip = j == 0 ? 3 : ladder[j - 1];
    const int out = ladder[std::max(j - 1, 0)];
    const int stage = levels - 1 - j;
    DecoderStage s;
    s.fuse = make_conv(fmt::format("dec.{}.fuse", stage), prev + skip, out, k, 1, false);
    s.refine = make_conv(fmt::format("dec.{}.refine", stage), out, out, k, 1, false);
    decoder_.push_back(std::move(s));
    prev = out;
  }
  output_ = make_conv("out", prev, 3, 1, 1, false);
}

template <std::floating_point T>
typename FieldNet<T>::Conv FieldNet<T>::make_conv(const std::string& name, int in, int out,
                                                   int k, int stride, bool zero_init) {
  Conv conv;
  conv.stride = stride;
  conv.pad = k / 2;
  conv.pad_end = stride == 2 ? k / 2 - 1 : k / 2;
  const std::size_t count = static_cast<std::size_t>(out) * in * k * k;
  std::vector<T> w(count, T(0));
  if (!zero_init) {
    Rng rng(mix_seed(config_.seed, init_counter_));
    const double fan_in = static_cast<double>(in) * k * k;
    const double slope = config_.leaky_slope;
    // He initialization for leaky units; the linear output layer gets 1/fan_in.
    const double gain = name == "out" ? 1.0 : 2.0 / (1.0 + slope * slope);
    const double std_dev = std::sqrt(gain / fan_in);
    for (auto& v : w) v = static_cast<T>(rng.normal() * std_dev);
  }
  ++init_counter_;
  conv.weight = Tensor<T>::from({out, in, k, k}, std::move(w), true);
  conv.bias = Tensor<T>::zeros({1, out, 1, 1}, true);
  params_.emplace_back(name + ".weight", conv.weight);
  params_.emplace_back(name + ".bias", conv.bias);
  return conv;
}

template <std::floating_point T>
Tensor<T> FieldNet<T>::apply(const Conv& conv, const Tensor<T>& x) const {
  return ad::conv2d(x, conv.weight, conv.bias, {conv.stride, conv.pad, conv.pad_end});
}

template <std::floating_point T>
Tensor<T> FieldNet<T>::act(const Tensor<T>& x) const {
  return ad::leaky_relu(x, static_cast<T>(config_.leaky_slope));
}

template <std::floating_point T>
void FieldNet<T>::check_input(const Tensor<T>& x, int channels, const char* what) const {
  if (!x.defined()) throw ConfigError(fmt::format("{}: undefined input", what));
  const Shape& s = x.shape();
  if (s.c != channels) {
    throw DataError(fmt::format("{}: expected {} channels, got {}", what, channels, s.c));
  }
  const int m = config_.stride_multiple();
  if (s.h % m != 0 || s.w % m != 0) {
    throw DataError(
        fmt::format("{}: input {}x{} is not divisible by {}", what, s.h, s.w, m));
  }
}

template <std::floating_point T>
Encoded<T> FieldNet<T>::encode(const Tensor<T>& x) const {
  check_input(x, 3, "encode");
  Encoded<T> out;
  out.skips.push_back(x);
  Tensor<T> h = x;
  for (const auto& level : encoder_) {
    h = act(apply(level.down, h));
    h = act(apply(level.refine, h));
    out.skips.push_back(h);
  }
  out.skips.pop_back();  // the deepest level feeds the bottleneck only
  out.bottleneck = apply(bottleneck_, h);
  return out;
}

template <std::floating_point T>
LatentDists<T> FieldNet<T>::run_heads(const Heads& heads, const Tensor<T>& bottleneck) const {
  const int d = config_.latent_channels;
  if (bottleneck.shape().c != d) {
    throw ConfigError(fmt::format("heads: bottleneck has {} channels, expected {}",
                                  bottleneck.shape().c, d));
  }
  const Tensor<T> pooled = ad::avg_pool_global(bottleneck);
  const Tensor<T> shift = apply(heads.shift, pooled);
  const Tensor<T> scale = apply(heads.scale, pooled);
  LatentDists<T> dists;
  dists.shift = {ad::slice_channels(shift, 0, d), ad::slice_channels(shift, d, d)};
  dists.scale = {ad::slice_channels(scale, 0, d), ad::slice_channels(scale, d, d)};
  return dists;
}

template <std::floating_point T>
LatentDists<T> FieldNet<T>::prior_heads(const Tensor<T>& bottleneck) const {
  return run_heads(prior_heads_, bottleneck);
}

template <std::floating_point T>
LatentDists<T> FieldNet<T>::posterior_heads(const Tensor<T>& x, const Tensor<T>& y) const {
  check_input(x, 3, "posterior_heads");
  check_input(y, 3, "posterior_heads");
  if (!(x.shape() == y.shape())) {
    throw DataError(fmt::format("posterior_heads: input {} and reference {} differ",
                                x.shape().str(), y.shape().str()));
  }
  Tensor<T> h = ad::concat_channels<T>({x, y});
  for (const auto& level : post_encoder_) {
    h = act(apply(level.down, h));
    h = act(apply(level.refine, h));
  }
  return run_heads(post_heads_, apply(post_bottleneck_, h));
}

template <std::floating_point T>
LatentSample<T> FieldNet<T>::sample_latent(const LatentDists<T>& from,
                                           const LatentDists<T>& prior, Rng& rng) const {
  const Shape s = from.shift.mu.shape();
  auto draw = [&](const DiagGaussian<T>& g) {
    std::vector<T> eps(s.numel());
    for (auto& e : eps) e = static_cast<T>(rng.normal());
    const Tensor<T> noise = Tensor<T>::from(s, std::move(eps));
    const Tensor<T> sigma = ad::exp(ad::scale(g.logvar, T(0.5)));
    return ad::add(g.mu, ad::mul(sigma, noise));
  };
  LatentSample<T> out;
  out.a = draw(from.shift);
  out.b_raw = draw(from.scale);
  out.b = ad::add_scalar(ad::softplus(out.b_raw), T(1e-5));
  out.log_prior_density = log_density(prior, out.a, out.b_raw);
  return out;
}

template <std::floating_point T>
Tensor<T> FieldNet<T>::decode(const std::vector<Tensor<T>>& skips,
                              const Tensor<T>& modulated) const {
  const int levels = config_.levels();
  if (static_cast<int>(skips.size()) != levels) {
    throw ConfigError(fmt::format("decode: expected {} skips, got {}", levels, skips.size()));
  }
  Tensor<T> h = modulated;
  for (int stage = 0; stage < levels; ++stage) {
    const Tensor<T>& skip = skips[levels - 1 - stage];
    h = ad::upsample_nearest(h, 2);
    if (h.shape().n != skip.shape().n || h.shape().h != skip.shape().h ||
        h.shape().w != skip.shape().w) {
      throw ConfigError(fmt::format("decode: upsampled {} does not match skip {}",
                                    h.shape().str(), skip.shape().str()));
    }
    h = ad::concat_channels<T>({h, skip});
    h = act(apply(decoder_[stage].fuse, h));
    h = act(apply(decoder_[stage].refine, h));
  }
  return ad::sigmoid(apply(output_, h));
}

template <std::floating_point T>
TrainForward<T> FieldNet<T>::forward_train(const Tensor<T>& x, const Tensor<T>& y,
                                           Rng& rng) const {
  const Encoded<T> enc = encode(x);
  TrainForward<T> out;
  out.prior = prior_heads(enc.bottleneck);
  out.posterior = posterior_heads(x, y);
  out.sample = sample_latent(out.posterior, out.prior, rng);
  out.output = decode(enc.skips, pem(enc.bottleneck, out.sample));
  return out;
}

template <std::floating_point T>
InferenceResult FieldNet<T>::infer_map(const ImagePlane& x, int samples,
                                       std::uint64_t seed) const {
  if (samples < 1) throw ConfigError("infer_map: samples must be >= 1");
  if (x.channels() != 3) {
    throw DataError(fmt::format("infer_map: expected 3 channels, got {}", x.channels()));
  }
  const ImagePlane padded = pad_to_multiple(x, config_.stride_multiple());
  const CropWindow window{0, 0, x.width(), x.height()};

  ad::NoGradGuard no_grad;
  const Encoded<T> enc = encode(to_tensor<T>(padded));
  const LatentDists<T> prior = prior_heads(enc.bottleneck);
  Rng rng(seed);
  InferenceResult result;
  for (int k = 0; k < samples; ++k) {
    const LatentSample<T> draw = sample_latent(prior, rng);
    const Tensor<T> out = decode(enc.skips, pem(enc.bottleneck, draw));
    result.samples.push_back(crop(to_image(out), window));
    result.log_densities.push_back(draw.log_prior_density[0]);
  }
  const auto best = std::max_element(result.log_densities.begin(), result.log_densities.end());
  result.best_index = static_cast<int>(best - result.log_densities.begin());
  result.best = result.samples[result.best_index];
  return result;
}

template <std::floating_point T>
std::vector<Tensor<T>> FieldNet<T>::parameters() const {
  std::vector<Tensor<T>> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.push_back(t);
  return out;
}

template <std::floating_point T>
std::size_t FieldNet<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : params_) total += t.numel();
  return total;
}

template <std::floating_point T>
Tensor<T> to_tensor(const std::vector<ImagePlane>& images) {
  if (images.empty()) throw ConfigError("to_tensor: empty batch");
  const ImagePlane& first = images.front();
  Shape s{static_cast<int>(images.size()), first.channels(), first.height(), first.width()};
  std::vector<T> values;
  values.reserve(s.numel());
  for (const auto& img : images) {
    if (!img.same_dims(first)) throw DataError("to_tensor: batch images differ in size");
    for (float v : img.samples()) values.push_back(static_cast<T>(v));
  }
  return Tensor<T>::from(s, std::move(values));
}

template <std::floating_point T>
Tensor<T> to_tensor(const ImagePlane& image) {
  return to_tensor<T>(std::vector<ImagePlane>{image});
}

template <std::floating_point T>
ImagePlane to_image(const Tensor<T>& t, int index) {
  const Shape& s = t.shape();
  if (index < 0 || index >= s.n) throw ConfigError("to_image: batch index out of range");
  const std::size_t plane = static_cast<std::size_t>(s.c) * s.h * s.w;
  const auto data = t.data().subspan(plane * index, plane);
  std::vector<float> values(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    values[i] = std::clamp(static_cast<float>(data[i]), 0.0f, 1.0f);
  }
  return ImagePlane(s.h, s.w, s.c, std::move(values));
}

#define FIELDNET_INSTANTIATE_MODEL(T)                                                         \
  template class FieldNet<T>;                                                                 \
  template std::vector<double> log_density(const LatentDists<T>&, const Tensor<T>&,          \
                                           const Tensor<T>&);                                 \
  template Tensor<T> pem(const Tensor<T>&, const LatentSample<T>&);                          \
  template Tensor<T> to_tensor<T>(const std::vector<ImagePlane>&);                            \
  template Tensor<T> to_tensor<T>(const ImagePlane&);                                         \
  template ImagePlane to_image(const Tensor<T>&, int);

FIELDNET_INSTANTIATE_MODEL(float)
FIELDNET_INSTANTIATE_MODEL(double)

}  // namespace fieldnet
