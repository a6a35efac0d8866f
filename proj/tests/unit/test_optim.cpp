#include "fieldnet/error.hpp"
#include "fieldnet/optim.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace fieldnet {
namespace {

using ad::Tensor;

TEST(Adam, MatchesHandComputedUpdates) {
  auto p = Tensor<double>::from({1, 1, 1, 2}, {1.0, -2.0}, true);
  Adam<double> opt({p});
  const double grads[3][2] = {{0.5, -1.0}, {0.1, 2.0}, {-0.3, 0.0}};
  double m[2] = {0, 0}, v[2] = {0, 0}, theta[2] = {1.0, -2.0};
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int t = 1; t <= 3; ++t) {
    p.zero_grad();
    for (int i = 0; i < 2; ++i) p.mutable_grad()[i] = grads[t - 1][i];
    opt.step(lr);
    for (int i = 0; i < 2; ++i) {
      const double g = grads[t - 1][i];
      m[i] = b1 * m[i] + (1 - b1) * g;
      v[i] = b2 * v[i] + (1 - b2) * g * g;
      const double mh = m[i] / (1 - std::pow(b1, t));
      const double vh = v[i] / (1 - std::pow(b2, t));
      theta[i] -= lr * mh / (std::sqrt(vh) + eps);
      EXPECT_NEAR(p.data()[i], theta[i], 1e-14) << "step " << t << " index " << i;
    }
  }
  EXPECT_EQ(opt.steps(), 3);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto p = Tensor<double>::from({1, 1, 1, 3}, {0.1, 0.2, 0.3}, true);
  Adam<double> opt({p});
  p.zero_grad();
  opt.step(0.1);
  EXPECT_EQ(p.data()[0], 0.1);
  EXPECT_EQ(p.data()[2], 0.3);
}

TEST(Adam, MissingGradientIsAnError) {
  auto p = Tensor<float>::from({1, 1, 1, 1}, {1.0f}, true);
  Adam<float> opt({p});
  EXPECT_THROW(opt.step(0.1), ConfigError);
}

TEST(Adam, MinimizesAQuadratic) {
  auto p = Tensor<double>::from({1, 1, 1, 2}, {3.0, -4.0}, true);
  Adam<double> opt({p});
  const auto target = Tensor<double>::from({1, 1, 1, 2}, {1.0, 2.0});
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    ad::backward(ad::sum(ad::square(ad::sub(p, target))));
    opt.step(0.05);
  }
  EXPECT_NEAR(p.data()[0], 1.0, 1e-3);
  EXPECT_NEAR(p.data()[1], 2.0, 1e-3);
}

TEST(Adam, RestoreContinuesIdentically) {
  auto run = [](int split) {
    auto p = Tensor<double>::from({1, 1, 1, 1}, {2.0}, true);
    Adam<double> opt({p});
    for (int i = 0; i < 6; ++i) {
      if (i == split) {
        auto q = Tensor<double>::from({1, 1, 1, 1}, {p.data()[0]}, true);
        Adam<double> fresh({q});
        fresh.restore(opt.steps(), opt.first_moments(), opt.second_moments());
        p = q;
        opt = std::move(fresh);
      }
      opt.zero_grad();
      ad::backward(ad::sum(ad::square(p)));
      opt.step(0.1);
    }
    return p.data()[0];
  };
  EXPECT_EQ(run(-1), run(3));
}

TEST(LrSchedule, DefaultDecaysOverFinal200Epochs) {
  LrSchedule s;
  EXPECT_EQ(s.resolved_decay_start(), 300);
  EXPECT_DOUBLE_EQ(s.lr_at(0), 1e-4);
  EXPECT_DOUBLE_EQ(s.lr_at(300), 1e-4);
  EXPECT_NEAR(s.lr_at(499), 1e-6, 1e-18);
  EXPECT_NEAR(s.lr_at(400), 1e-4 + (1e-6 - 1e-4) * 100.0 / 199.0, 1e-18);
  for (int e = 1; e < 500; ++e) EXPECT_LE(s.lr_at(e), s.lr_at(e - 1));
}

TEST(LrSchedule, ShortRunsDecayOverFinalFortyPercent) {
  LrSchedule s;
  s.total_epochs = 10;
  EXPECT_EQ(s.resolved_decay_start(), 6);
  EXPECT_DOUBLE_EQ(s.lr_at(5), 1e-4);
  EXPECT_NEAR(s.lr_at(9), 1e-6, 1e-18);
  s.decay_start_epoch = 2;
  EXPECT_EQ(s.resolved_decay_start(), 2);
}

}  // namespace
}  // namespace fieldnet
