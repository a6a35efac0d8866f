#include "fieldnet/error.hpp"
#include "fieldnet/losses.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace fieldnet {
namespace {

using ad::Tensor;
using testing::random_tensor;

TEST(Mse, MatchesElementwiseLoop) {
  Rng rng(1);
  const auto a = random_tensor<double>({2, 3, 4, 5}, rng);
  const auto b = random_tensor<double>({2, 3, 4, 5}, rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  EXPECT_NEAR(mse_loss(a, b).item(), acc / a.numel(), 1e-14);
  EXPECT_EQ(mse_loss(a, a).item(), 0.0);
}

TEST(Boundary, WeightedMeanAbsoluteError) {
  Rng rng(2);
  const auto a = random_tensor<double>({2, 3, 4, 4}, rng);
  const auto b = random_tensor<double>({2, 3, 4, 4}, rng);
  std::vector<double> w(2 * 16);
  for (auto& x : w) x = rng.uniform();
  const auto wt = Tensor<double>::from({2, 1, 4, 4}, w);
  double acc = 0.0;
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int p = 0; p < 16; ++p) {
        const std::size_t i = (static_cast<std::size_t>(n) * 3 + c) * 16 + p;
        acc += std::fabs(a.data()[i] - b.data()[i]) * w[n * 16 + p];
      }
  EXPECT_NEAR(boundary_loss(a, b, wt).item(), acc / a.numel(), 1e-14);
  EXPECT_EQ(boundary_loss(a, b, Tensor<double>::zeros({2, 1, 4, 4})).item(), 0.0);
}

TEST(Kl, SelfDivergenceIsExactlyZero) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const DiagGaussian<double> p{random_tensor<double>({3, 5, 1, 1}, rng, 2.0),
                                 random_tensor<double>({3, 5, 1, 1}, rng, 2.0)};
    EXPECT_EQ(kl_diag_gaussian(p, p).item(), 0.0);
    const DiagGaussian<float> pf{random_tensor<float>({1, 5, 1, 1}, rng, 2.0),
                                 random_tensor<float>({1, 5, 1, 1}, rng, 2.0)};
    EXPECT_EQ(kl_diag_gaussian(pf, pf).item(), 0.0f);
  }
}

TEST(Kl, MatchesMonteCarloAndIsNonNegative) {
  Rng rng(4);
  for (int t = 0; t < 5; ++t) {
    std::vector<double> v(8);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    const DiagGaussian<double> p{Tensor<double>::from({1, 2, 1, 1}, {v[0], v[1]}),
                                 Tensor<double>::from({1, 2, 1, 1}, {v[2], v[3]})};
    const DiagGaussian<double> q{Tensor<double>::from({1, 2, 1, 1}, {v[4], v[5]}),
                                 Tensor<double>::from({1, 2, 1, 1}, {v[6], v[7]})};
    const double closed = kl_diag_gaussian(p, q).item();
    EXPECT_GE(closed, 0.0);
    double acc = 0.0;
    const int draws = 200000;
    for (int i = 0; i < draws; ++i) {
      for (int d = 0; d < 2; ++d) {
        const double z = v[d] + std::exp(0.5 * v[2 + d]) * rng.normal();
        acc += testing::gaussian_log_pdf(z, v[d], v[2 + d]) -
               testing::gaussian_log_pdf(z, v[4 + d], v[6 + d]);
      }
    }
    EXPECT_NEAR(closed, acc / draws, 0.03);
  }
}

TEST(Kl, AveragesOverBatch) {
  const DiagGaussian<double> p{Tensor<double>::from({2, 1, 1, 1}, {1.0, 0.0}),
                               Tensor<double>::zeros({2, 1, 1, 1})};
  const DiagGaussian<double> q{Tensor<double>::zeros({2, 1, 1, 1}),
                               Tensor<double>::zeros({2, 1, 1, 1})};
  // 0.5 * mu^2 for the first item, zero for the second.
  EXPECT_DOUBLE_EQ(kl_diag_gaussian(p, q).item(), 0.25);
}

TEST(ProxyExtractor, FixedOrthogonalFilters) {
  const ProxyExtractor<double> e;
  const auto& w = e.weights();
  ASSERT_EQ(w.size(), 4u);
  for (const auto& t : w) {
    EXPECT_FALSE(t.requires_grad());
    const int out = t.shape().n;
    const int fan = t.shape().c * 9;
    for (int i = 0; i < out; ++i)
      for (int j = 0; j < out; ++j) {
        double dot = 0.0;
        for (int k = 0; k < fan; ++k) dot += t.data()[i * fan + k] * t.data()[j * fan + k];
        if (i == j) {
          EXPECT_GT(dot, 0.0);
        } else {
          EXPECT_NEAR(dot, 0.0, 1e-9);
        }
      }
  }
  const ProxyExtractor<double> same;
  EXPECT_TRUE(std::equal(w[1].data().begin(), w[1].data().end(), same.weights()[1].data().begin()));
  Rng rng(1);
  const auto feats = e.features(random_tensor<double>({1, 3, 16, 16}, rng));
  ASSERT_EQ(feats.size(), 2u);
  EXPECT_EQ(feats[0].shape(), (ad::Shape{1, 16, 8, 8}));
  EXPECT_EQ(feats[1].shape(), (ad::Shape{1, 32, 4, 4}));
}

TEST(Perceptual, ZeroForIdenticalInputsAndRefBranchDetached) {
  const ProxyExtractor<double> e;
  Rng rng(5);
  auto x = random_tensor<double>({1, 3, 8, 8}, rng, 1.0, true);
  auto y = random_tensor<double>({1, 3, 8, 8}, rng, 1.0, true);
  EXPECT_EQ(perceptual_proxy_loss(x, x.detach(), e).item(), 0.0);
  const auto l = perceptual_proxy_loss(x, y, e);
  EXPECT_GT(l.item(), 0.0);
  ad::backward(l);
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(y.has_grad());
}

TEST(TotalLoss, RecomposesFromBreakdown) {
  Rng rng(6);
  const ProxyExtractor<float> e;
  auto make = [&] {
    return LatentDists<float>{{random_tensor<float>({2, 4, 1, 1}, rng),
                               random_tensor<float>({2, 4, 1, 1}, rng)},
                              {random_tensor<float>({2, 4, 1, 1}, rng),
                               random_tensor<float>({2, 4, 1, 1}, rng)}};
  };
  const auto prior = make();
  const auto post = make();
  const auto pred = random_tensor<float>({2, 3, 8, 8}, rng, 0.3);
  const auto ref = random_tensor<float>({2, 3, 8, 8}, rng, 0.3);
  const auto detail = ad::Tensor<float>::full({2, 1, 8, 8}, 0.5f);
  const LossWeights w;
  const LossTerms<float> terms = total_loss(pred, ref, prior, post, detail, w, e);
  const LossBreakdown b = terms.breakdown();
  EXPECT_NEAR(b.total, recompose_total(b, w), 1e-5 * std::fabs(b.total));
  EXPECT_NEAR(b.l_e, b.l_mse + w.lambda_p * b.l_perc, 1e-6);
  EXPECT_NEAR(b.l_m, kl_diag_gaussian(prior.shift, post.shift).item(), 1e-6);
  EXPECT_NEAR(b.l_s, kl_diag_gaussian(prior.scale, post.scale).item(), 1e-6);
  const LossBreakdown swapped =
      total_loss(pred, ref, prior, post, detail, w, e, KlOrder::kPosteriorFirst).breakdown();
  EXPECT_NEAR(swapped.l_m, kl_diag_gaussian(post.shift, prior.shift).item(), 1e-6);
  EXPECT_NEAR(recompose_total({1, 0, 0, 2, 3, 4, 0}, w), 1.0 + 0.1 * 5 + 0.5 * 4, 1e-15);
}

TEST(LossWeights, RejectNegative) {
  LossWeights w;
  w.beta = -1.0;
  EXPECT_THROW(w.validate(), ConfigError);
  w = LossWeights{};
  w.gamma = NAN;
  EXPECT_THROW(w.validate(), ConfigError);
}

}  // namespace
}  // namespace fieldnet
