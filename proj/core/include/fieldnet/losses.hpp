#pragma once

#include "fieldnet/autodiff.hpp"
#include "fieldnet/model.hpp"

#include <cstdint>
#include <vector>

namespace fieldnet {

struct LossWeights {
  double alpha = 1.0;     // enhancement
  double beta = 0.1;      // both KL terms
  double gamma = 0.5;     // boundary
  double lambda_p = 0.1;  // perceptual share of the enhancement loss

  // Throws ConfigError on negative or non-finite weights.
  void validate() const;
};

// Which distribution is the first KL argument. The default puts the prior
// branch first: KL(N(x) || N(y, x)).
enum class KlOrder { kPriorFirst, kPosteriorFirst };

struct LossBreakdown {
  double l_e = 0.0;
  double l_mse = 0.0;
  double l_perc = 0.0;
  double l_m = 0.0;
  double l_s = 0.0;
  double l_b = 0.0;
  double total = 0.0;
};

// alpha * l_e + beta * (l_m + l_s) + gamma * l_b in double precision.
double recompose_total(const LossBreakdown& b, const LossWeights& w);

template <std::floating_point T>
ad::Tensor<T> mse_loss(const ad::Tensor<T>& pred, const ad::Tensor<T>& ref);

// Mean of |pred - ref| * weights; weights are N x 1 x H x W (or N x C x H x W).
template <std::floating_point T>
ad::Tensor<T> boundary_loss(const ad::Tensor<T>& pred, const ad::Tensor<T>& ref,
                            const ad::Tensor<T>& weights);

// Closed-form KL(p || q) for diagonal Gaussians, summed over D and averaged
// over the batch.
template <std::floating_point T>
ad::Tensor<T> kl_diag_gaussian(const DiagGaussian<T>& p, const DiagGaussian<T>& q);

template <std::floating_point T>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  // Feature maps at the depths compared by the perceptual loss.
  virtual std::vector<ad::Tensor<T>> features(const ad::Tensor<T>& x) const = 0;
};

// Four fixed 3x3 conv layers (3->8, 8->16 stride 2, 16->16, 16->32 stride 2)
// with leaky ReLU, orthogonally initialized from a seed. Features are taken
// after the second and fourth layers. Weights never receive gradients.
template <std::floating_point T>
class ProxyExtractor final : public FeatureExtractor<T> {
 public:
  static constexpr std::uint64_t kDefaultSeed = 0x9e3779b97f4a7c15ULL;

  explicit ProxyExtractor(std::uint64_t seed = kDefaultSeed);
  std::vector<ad::Tensor<T>> features(const ad::Tensor<T>& x) const override;

  const std::vector<ad::Tensor<T>>& weights() const { return weights_; }

 private:
  std::vector<ad::Tensor<T>> weights_;
};

// Sum over depths of the mean squared feature difference. The reference
// branch is evaluated without recording a graph.
template <std::floating_point T>
ad::Tensor<T> perceptual_proxy_loss(const ad::Tensor<T>& pred, const ad::Tensor<T>& ref,
                                    const FeatureExtractor<T>& extractor);

template <std::floating_point T>
struct LossTerms {
  ad::Tensor<T> l_mse;
  ad::Tensor<T> l_perc;
  ad::Tensor<T> l_e;
  ad::Tensor<T> l_m;
  ad::Tensor<T> l_s;
  ad::Tensor<T> l_b;
  ad::Tensor<T> total;

  LossBreakdown breakdown() const;
};

template <std::floating_point T>
LossTerms<T> total_loss(const ad::Tensor<T>& pred, const ad::Tensor<T>& ref,
                        const LatentDists<T>& prior, const LatentDists<T>& posterior,
                        const ad::Tensor<T>& detail_weights, const LossWeights& weights,
                        const FeatureExtractor<T>& extractor,
                        KlOrder order = KlOrder::kPriorFirst);

}  // namespace fieldnet
