#pragma once

#include "fieldnet/autodiff.hpp"
#include "fieldnet/imaging.hpp"
#include "fieldnet/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace fieldnet {

struct ModelConfig {
  std::vector<int> ladder{16, 32, 64};  // encoder channels per stride-2 level
  int latent_channels = 64;             // bottleneck width D
  int kernel = 3;
  double leaky_slope = 0.2;
  int samples = 10;  // K for infer_map
  std::uint64_t seed = 0;

  // Roughly 0.3M parameters.
  static ModelConfig desk();
  // Larger preset used for complexity accounting (about 2.7M parameters).
  static ModelConfig paper_scale();

  // Throws ConfigError on an empty or non-increasing ladder, D <= 0, even
  // kernel, K < 1 or a negative slope.
  void validate() const;
  int levels() const { return static_cast<int>(ladder.size()); }
  // Spatial dims must be multiples of this.
  int stride_multiple() const { return 1 << levels(); }

  std::string to_json() const;
  // Unknown keys are a ConfigError.
  static ModelConfig from_json(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

template <std::floating_point T>
struct DiagGaussian {
  ad::Tensor<T> mu;      // N x D x 1 x 1
  ad::Tensor<T> logvar;  // N x D x 1 x 1
};

template <std::floating_point T>
struct LatentDists {
  DiagGaussian<T> shift;  // distribution of a
  DiagGaussian<T> scale;  // distribution of b (before softplus)
};

template <std::floating_point T>
struct LatentSample {
  ad::Tensor<T> a;      // N x D x 1 x 1
  ad::Tensor<T> b;      // softplus(b_raw) + 1e-5
  ad::Tensor<T> b_raw;
  std::vector<double> log_prior_density;  // one per batch item
};

template <std::floating_point T>
struct Encoded {
  // skips[0] is the input itself, skips[i] the output of encoder level i.
  std::vector<ad::Tensor<T>> skips;
  ad::Tensor<T> bottleneck;
};

template <std::floating_point T>
struct TrainForward {
  ad::Tensor<T> output;
  LatentDists<T> prior;
  LatentDists<T> posterior;
  LatentSample<T> sample;
};

struct InferenceResult {
  ImagePlane best;
  int best_index = 0;
  std::vector<ImagePlane> samples;
  std::vector<double> log_densities;
};

// Sum of diagonal Gaussian log-densities of a and b_raw under `prior`,
// per batch item.
template <std::floating_point T>
std::vector<double> log_density(const LatentDists<T>& prior, const ad::Tensor<T>& a,
                                const ad::Tensor<T>& b_raw);

// Per-channel instance normalization followed by scale b and shift a.
template <std::floating_point T>
ad::Tensor<T> pem(const ad::Tensor<T>& features, const LatentSample<T>& sample);

template <std::floating_point T>
class FieldNet {
 public:
  struct Conv {
    ad::Tensor<T> weight;
    ad::Tensor<T> bias;
    int stride = 1;
    int pad = 0;
    int pad_end = 0;
  };

  // Weights are initialized deterministically from config.seed.
  explicit FieldNet(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  Encoded<T> encode(const ad::Tensor<T>& x) const;
  LatentDists<T> prior_heads(const ad::Tensor<T>& bottleneck) const;
  LatentDists<T> posterior_heads(const ad::Tensor<T>& x, const ad::Tensor<T>& y) const;
  // Reparameterized draw from `from`; densities are evaluated under `prior`.
  LatentSample<T> sample_latent(const LatentDists<T>& from, const LatentDists<T>& prior,
                                Rng& rng) const;
  LatentSample<T> sample_latent(const LatentDists<T>& prior, Rng& rng) const {
    return sample_latent(prior, prior, rng);
  }
  ad::Tensor<T> decode(const std::vector<ad::Tensor<T>>& skips,
                       const ad::Tensor<T>& modulated) const;

  // Training pass: latent drawn from the posterior of (x, y).
  TrainForward<T> forward_train(const ad::Tensor<T>& x, const ad::Tensor<T>& y, Rng& rng) const;

  // Encodes once, draws K latents from the prior using Rng(seed), decodes
  // each and returns the draw with the highest prior log-density (first on
  // ties). Inputs of any size are edge-padded to stride_multiple() and the
  // outputs cropped back.
  InferenceResult infer_map(const ImagePlane& x, int samples, std::uint64_t seed) const;

  std::vector<std::pair<std::string, ad::Tensor<T>>>& named_parameters() { return params_; }
  const std::vector<std::pair<std::string, ad::Tensor<T>>>& named_parameters() const {
    return params_;
  }
  std::vector<ad::Tensor<T>> parameters() const;
  std::size_t parameter_count() const;

  // Copy of the model in another precision.
  template <std::floating_point U>
  FieldNet<U> cast() const {
    FieldNet<U> out(config_);
    auto& dst = out.named_parameters();
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto src = params_[i].second.data();
      auto values = dst[i].second.mutable_data();
      for (std::size_t j = 0; j < src.size(); ++j) values[j] = static_cast<U>(src[j]);
    }
    return out;
  }

 private:
  struct EncoderLevel {
    Conv down;
    Conv refine;
  };
  struct DecoderStage {
    Conv fuse;
    Conv refine;
  };
  struct Heads {
    Conv shift;
    Conv scale;
  };

  Conv make_conv(const std::string& name, int in, int out, int k, int stride, bool zero_init);
  ad::Tensor<T> apply(const Conv& conv, const ad::Tensor<T>& x) const;
  ad::Tensor<T> act(const ad::Tensor<T>& x) const;
  LatentDists<T> run_heads(const Heads& heads, const ad::Tensor<T>& bottleneck) const;
  void check_input(const ad::Tensor<T>& x, int channels, const char* what) const;

  ModelConfig config_;
  std::vector<std::pair<std::string, ad::Tensor<T>>> params_;
  std::uint64_t init_counter_ = 0;

  std::vector<EncoderLevel> encoder_;
  Conv bottleneck_;
  std::vector<EncoderLevel> post_encoder_;
  Conv post_bottleneck_;
  Heads prior_heads_;
  Heads post_heads_;
  std::vector<DecoderStage> decoder_;  // index 0 is the coarsest stage
  Conv output_;
};

// Batch of images (same dims, 3 channels) as an N x C x H x W tensor.
template <std::floating_point T>
ad::Tensor<T> to_tensor(const std::vector<ImagePlane>& images);
template <std::floating_point T>
ad::Tensor<T> to_tensor(const ImagePlane& image);
// One batch item back to an image; values are clamped to [0,1].
template <std::floating_point T>
ImagePlane to_image(const ad::Tensor<T>& t, int index = 0);

// Binary weight archive (magic "FNWT"). Loading a model rebuilds it from the
// stored config; loading into an existing model requires matching arrays.
void save_weights(const FieldNet<float>& model, const std::filesystem::path& path);
FieldNet<float> load_weights(const std::filesystem::path& path);
void load_weights_into(FieldNet<float>& model, const std::filesystem::path& path);

// In-memory forms used by checkpoints.
std::vector<std::uint8_t> serialize_weights(const FieldNet<float>& model);
// Parses an archive from `bytes` starting at `offset`; advances offset past it.
FieldNet<float> deserialize_weights(std::span<const std::uint8_t> bytes, std::size_t& offset);
void deserialize_weights_into(FieldNet<float>& model, std::span<const std::uint8_t> bytes,
                              std::size_t& offset);

}  // namespace fieldnet
