#pragma once

// Finite-difference cases for every differentiable op and every loss. Used by
// the unit tests and by the acceptance runner.

#include "fieldnet/gradcheck.hpp"
#include "fieldnet/losses.hpp"
#include "fieldnet/model.hpp"
#include "test_support.hpp"

#include <functional>
#include <string>
#include <vector>

namespace fieldnet::testing {

struct GradCase {
  std::string name;
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

namespace grad_detail {

using ad::Shape;
using T = ad::Tensor<double>;
using Inputs = std::span<const T>;

inline GradCase shaped(std::string name, std::vector<Shape> shapes, DiffFn fn,
                       GradCheckOptions opts = {}) {
  return {std::move(name), [shapes = std::move(shapes), fn = std::move(fn), opts](std::uint64_t s) {
            return grad_check_detailed(fn, shapes, s, opts);
          }};
}

inline GradCase conv_case(std::string name, Shape x, int cout, int k, int stride, int pad,
                          int pad_end, bool bias) {
  std::vector<Shape> shapes{x, {cout, x.c, k, k}};
  if (bias) shapes.push_back({1, cout, 1, 1});
  return shaped(std::move(name), shapes, [=](Inputs in) {
    return ad::conv2d(in[0], in[1], bias ? in[2] : T{}, {stride, pad, pad_end});
  });
}

inline LatentDists<double> dists(Inputs in, std::size_t first) {
  return {{in[first], in[first + 1]}, {in[first + 2], in[first + 3]}};
}

// pred and ref = pred + offset keep |pred - ref| away from the L1 kink.
inline std::vector<T> separated_pair(Rng& rng, Shape s) {
  std::vector<double> p(s.numel()), r(s.numel());
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = rng.uniform(0.1, 0.9);
    const double gap = rng.uniform(0.05, 0.3);
    r[i] = p[i] + (rng.uniform() < 0.5 ? -gap : gap);
  }
  return {T::from(s, p), T::from(s, r)};
}

inline T uniform_tensor(Rng& rng, Shape s, double lo, double hi) {
  std::vector<double> v(s.numel());
  for (auto& x : v) x = rng.uniform(lo, hi);
  return T::from(s, std::move(v));
}

}  // namespace grad_detail

inline std::vector<GradCase> grad_cases() {
  using namespace grad_detail;
  GradCheckOptions away_from_zero;
  away_from_zero.min_magnitude = 0.1;
  GradCheckOptions small_exp;
  small_exp.scale = 0.5;

  std::vector<GradCase> cases;
  cases.push_back(conv_case("conv2d 3x3 stride 1 pad 1", {2, 3, 5, 5}, 4, 3, 1, 1, 1, true));
  cases.push_back(conv_case("conv2d 3x3 stride 2 pad 1/0", {1, 2, 6, 6}, 3, 3, 2, 1, 0, true));
  cases.push_back(conv_case("conv2d 5x5 stride 1 pad 2", {1, 2, 6, 5}, 2, 5, 1, 2, 2, true));
  cases.push_back(conv_case("conv2d 1x1 no bias", {2, 4, 3, 3}, 3, 1, 1, 0, 0, false));
  cases.push_back(shaped("upsample_nearest x2", {{2, 3, 3, 4}},
                         [](Inputs in) { return ad::upsample_nearest(in[0], 2); }));
  cases.push_back(shaped("relu", {{2, 3, 4, 4}}, [](Inputs in) { return ad::relu(in[0]); },
                         away_from_zero));
  cases.push_back(shaped("leaky_relu", {{2, 3, 4, 4}},
                         [](Inputs in) { return ad::leaky_relu(in[0], 0.2); }, away_from_zero));
  cases.push_back(shaped("sigmoid", {{2, 3, 4, 4}}, [](Inputs in) { return ad::sigmoid(in[0]); }));
  cases.push_back(shaped("softplus", {{2, 3, 4, 4}},
                         [](Inputs in) { return ad::softplus(in[0]); }));
  cases.push_back(shaped("exp", {{2, 3, 4, 4}}, [](Inputs in) { return ad::exp(in[0]); },
                         small_exp));
  cases.push_back(shaped("square", {{2, 3, 4, 4}}, [](Inputs in) { return ad::square(in[0]); }));
  cases.push_back(shaped("abs", {{2, 3, 4, 4}}, [](Inputs in) { return ad::abs(in[0]); },
                         away_from_zero));
  cases.push_back(shaped("add broadcast", {{2, 3, 4, 4}, {1, 3, 1, 1}},
                         [](Inputs in) { return ad::add(in[0], in[1]); }));
  cases.push_back(shaped("sub broadcast", {{2, 1, 4, 4}, {2, 3, 4, 4}},
                         [](Inputs in) { return ad::sub(in[0], in[1]); }));
  cases.push_back(shaped("mul broadcast", {{2, 3, 4, 4}, {2, 3, 1, 1}},
                         [](Inputs in) { return ad::mul(in[0], in[1]); }));
  GradCheckOptions div_opts;
  div_opts.min_magnitude = 0.5;
  cases.push_back(shaped("div broadcast", {{2, 3, 4, 4}, {1, 3, 1, 1}},
                         [](Inputs in) { return ad::div(in[0], in[1]); }, div_opts));
  cases.push_back(shaped("scale", {{2, 3, 4, 4}},
                         [](Inputs in) { return ad::scale(in[0], -1.7); }));
  cases.push_back(shaped("add_scalar", {{2, 3, 4, 4}},
                         [](Inputs in) { return ad::add_scalar(in[0], 0.3); }));
  cases.push_back(shaped("concat_channels", {{2, 2, 3, 3}, {2, 3, 3, 3}, {2, 1, 3, 3}},
                         [](Inputs in) {
                           return ad::concat_channels(std::vector<T>{in[0], in[1], in[2]});
                         }));
  cases.push_back(shaped("slice_channels", {{2, 5, 3, 3}},
                         [](Inputs in) { return ad::slice_channels(in[0], 1, 3); }));
  cases.push_back(shaped("avg_pool_global", {{2, 3, 4, 5}},
                         [](Inputs in) { return ad::avg_pool_global(in[0]); }));
  cases.push_back(shaped("instance_stats", {{2, 3, 4, 4}}, [](Inputs in) {
    auto [mu, sigma] = ad::instance_stats(in[0]);
    return ad::concat_channels(std::vector<T>{mu, sigma});
  }));
  cases.push_back(shaped("sum", {{2, 3, 4, 4}}, [](Inputs in) { return ad::sum(in[0]); }));
  cases.push_back(shaped("mean", {{2, 3, 4, 4}}, [](Inputs in) { return ad::mean(in[0]); }));
  cases.push_back(shaped("sum_per_sample", {{3, 2, 3, 3}},
                         [](Inputs in) { return ad::sum_per_sample(in[0]); }));
  cases.push_back(shaped("pem", {{2, 3, 4, 4}, {2, 3, 1, 1}, {2, 3, 1, 1}}, [](Inputs in) {
    LatentSample<double> s;
    s.a = in[1];
    s.b_raw = in[2];
    s.b = ad::add_scalar(ad::softplus(in[2]), 1e-5);
    return pem(in[0], s);
  }));

  // Losses.
  cases.push_back(shaped("mse_loss", {{2, 3, 4, 4}, {2, 3, 4, 4}},
                         [](Inputs in) { return mse_loss(in[0], in[1]); }));
  for (int wc : {1, 3}) {
    cases.push_back({"boundary_loss " + std::to_string(wc) + "-channel weights", [wc](std::uint64_t seed) {
                       Rng rng(seed);
                       auto inputs = separated_pair(rng, {2, 3, 4, 4});
                       inputs.push_back(uniform_tensor(rng, {2, wc, 4, 4}, 0.0, 1.0));
                       GradCheckOptions o;
                       o.check_inputs = {0, 1};
                       return grad_check_at(
                           [](Inputs in) { return boundary_loss(in[0], in[1], in[2]); }, inputs,
                           seed, o);
                     }});
  }
  cases.push_back(shaped("kl_diag_gaussian", {{2, 4, 1, 1}, {2, 4, 1, 1}, {2, 4, 1, 1}, {2, 4, 1, 1}},
                         [](Inputs in) {
                           return kl_diag_gaussian<double>({in[0], in[1]}, {in[2], in[3]});
                         }));
  GradCheckOptions fine;
  fine.step = 1e-5;
  cases.push_back({"perceptual_proxy_loss", [fine](std::uint64_t seed) {
                     static const ProxyExtractor<double> extractor;
                     Rng rng(seed);
                     std::vector<T> inputs{uniform_tensor(rng, {1, 3, 8, 8}, 0.0, 1.0),
                                           uniform_tensor(rng, {1, 3, 8, 8}, 0.0, 1.0)};
                     // The reference branch is detached by design; only pred carries gradient.
                     GradCheckOptions o = fine;
                     o.check_inputs = {0};
                     return grad_check_at(
                         [](Inputs in) { return perceptual_proxy_loss(in[0], in[1], extractor); },
                         inputs, seed, o);
                   }});
  cases.push_back({"total_loss", [fine](std::uint64_t seed) {
                     static const ProxyExtractor<double> extractor;
                     Rng rng(seed);
                     std::vector<T> inputs = separated_pair(rng, {1, 3, 8, 8});
                     for (int i = 0; i < 8; ++i) {
                       inputs.push_back(random_tensor<double>({1, 4, 1, 1}, rng, 0.7));
                     }
                     inputs.push_back(uniform_tensor(rng, {1, 1, 8, 8}, 0.0, 1.0));
                     GradCheckOptions o = fine;
                     o.check_inputs = {0, 2, 3, 4, 5, 6, 7, 8, 9};  // ref (1) is detached
                     return grad_check_at(
                         [](Inputs in) {
                           return total_loss(in[0], in[1], dists(in, 2), dists(in, 6), in[10],
                                             LossWeights{}, extractor)
                               .total;
                         },
                         inputs, seed, o);
                   }});
  return cases;
}

// Gradient of the full training loss with respect to the input image of a
// small double-precision model (1 x 3 x 16 x 16).
inline GradCheckResult end_to_end_grad_check(std::uint64_t seed, double step = 1e-5) {
  using namespace grad_detail;
  ModelConfig cfg;
  cfg.ladder = {4, 8};
  cfg.latent_channels = 6;
  cfg.seed = seed;
  FieldNet<double> model(cfg);
  // Heads start at zero; perturb them so the latent path carries gradient.
  Rng rng(mix_seed(seed, 77));
  for (auto& [name, p] : model.named_parameters()) {
    if (name.rfind("prior.", 0) == 0 || name.rfind("post.", 0) == 0) {
      for (auto& v : p.mutable_data()) v = 0.1 * rng.normal();
    }
  }
  static const ProxyExtractor<double> extractor;
  std::vector<T> inputs{uniform_tensor(rng, {1, 3, 16, 16}, 0.1, 0.9)};
  const T y = uniform_tensor(rng, {1, 3, 16, 16}, 0.1, 0.9);
  const T detail = uniform_tensor(rng, {1, 1, 16, 16}, 0.0, 1.0);
  GradCheckOptions o;
  o.step = step;
  return grad_check_at(
      [&](Inputs in) {
        Rng noise(seed);
        const TrainForward<double> f = model.forward_train(in[0], y, noise);
        return total_loss(f.output, y, f.prior, f.posterior, detail, LossWeights{}, extractor)
            .total;
      },
      inputs, seed, o);
}

}  // namespace fieldnet::testing
