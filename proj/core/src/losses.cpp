#include "fieldnet/losses.hpp"

#include "fieldnet/error.hpp"
#include "fieldnet/rng.hpp"

#include <cmath>

#include <fmt/format.h>

namespace fieldnet {

using ad::Shape;
using ad::Tensor;

void LossWeights::validate() const {
  for (double w : {alpha, beta, gamma, lambda_p}) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw ConfigError(fmt::format("loss weights must be finite and >= 0, got {}", w));
    }
  }
}

double recompose_total(const LossBreakdown& b, const LossWeights& w) {
  return w.alpha * b.l_e + w.beta * (b.l_m + b.l_s) + w.gamma * b.l_b;
}

namespace {

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!(a.shape() == b.shape())) {
    throw ConfigError(fmt::format("{}: shapes {} and {} differ", what, a.shape().str(),
                                  b.shape().str()));
  }
}

// Rows of a (rows x cols) matrix made orthonormal by modified Gram-Schmidt
// on Gaussian draws; requires rows <= cols.
std::vector<double> orthogonal_rows(int rows, int cols, Rng& rng) {
  std::vector<double> m(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    double* row = m.data() + static_cast<std::size_t>(r) * cols;
    for (;;) {
      for (int c = 0; c < cols; ++c) row[c] = rng.normal();
      for (int p = 0; p < r; ++p) {
        const double* prev = m.data() + static_cast<std::size_t>(p) * cols;
        double dot = 0.0;
        for (int c = 0; c < cols; ++c) dot += row[c] * prev[c];
        for (int c = 0; c < cols; ++c) row[c] -= dot * prev[c];
      }
      double norm = 0.0;
      for (int c = 0; c < cols; ++c) norm += row[c] * row[c];
      norm = std::sqrt(norm);
      if (norm > 1e-6) {
        for (int c = 0; c < cols; ++c) row[c] /= norm;
        break;
      }
    }
  }
  return m;
}

struct ProxyLayer {
  int in;
  int out;
  int stride;
};

constexpr ProxyLayer kProxyLayers[] = {{3, 8, 1}, {8, 16, 2}, {16, 16, 1}, {16, 32, 2}};

}  // namespace

template <std::floating_point T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& ref) {
  require_same(pred, ref, "mse_loss");
  return ad::mean(ad::square(ad::sub(pred, ref)));
}

template <std::floating_point T>
Tensor<T> boundary_loss(const Tensor<T>& pred, const Tensor<T>& ref, const Tensor<T>& weights) {
  require_same(pred, ref, "boundary_loss");
  const Shape& p = pred.shape();
  const Shape& w = weights.shape();
  if (w.n != p.n || w.h != p.h || w.w != p.w || (w.c != 1 && w.c != p.c)) {
    throw ConfigError(fmt::format("boundary_loss: weights {} do not fit prediction {}", w.str(),
                                  p.str()));
  }
  return ad::mean(ad::mul(ad::abs(ad::sub(pred, ref)), weights));
}

template <std::floating_point T>
Tensor<T> kl_diag_gaussian(const DiagGaussian<T>& p, const DiagGaussian<T>& q) {
  require_same(p.mu, q.mu, "kl_diag_gaussian");
  require_same(p.logvar, q.logvar, "kl_diag_gaussian");
  require_same(p.mu, p.logvar, "kl_diag_gaussian");
  // 0.5 * sum(lv_q - lv_p + (exp(lv_p) + (mu_p - mu_q)^2) / exp(lv_q) - 1)
  const Tensor<T> ratio =
      ad::div(ad::add(ad::exp(p.logvar), ad::square(ad::sub(p.mu, q.mu))), ad::exp(q.logvar));
  const Tensor<T> terms = ad::add_scalar(ad::add(ad::sub(q.logvar, p.logvar), ratio), T(-1));
  const T factor = T(0.5) / static_cast<T>(p.mu.shape().n);
  return ad::scale(ad::sum(terms), factor);
}

template <std::floating_point T>
ProxyExtractor<T>::ProxyExtractor(std::uint64_t seed) {
  Rng rng(seed);
  for (const ProxyLayer& layer : kProxyLayers) {
    const auto m = orthogonal_rows(layer.out, layer.in * 9, rng);
    std::vector<T> w(m.begin(), m.end());
    weights_.push_back(Tensor<T>::from({layer.out, layer.in, 3, 3}, std::move(w)));
  }
}

template <std::floating_point T>
std::vector<Tensor<T>> ProxyExtractor<T>::features(const Tensor<T>& x) const {
  if (x.shape().c != 3) throw ConfigError("proxy extractor expects 3-channel input");
  if (x.shape().h % 4 != 0 || x.shape().w % 4 != 0) {
    throw ConfigError(fmt::format("proxy extractor needs dims divisible by 4, got {}",
                                  x.shape().str()));
  }
  std::vector<Tensor<T>> out;
  Tensor<T> h = x;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    const int stride = kProxyLayers[i].stride;
    h = ad::conv2d(h, weights_[i], Tensor<T>(), {stride, 1, stride == 2 ? 0 : 1});
    h = ad::leaky_relu(h, T(0.2));
    if (stride == 2) out.push_back(h);
  }
  return out;
}

template <std::floating_point T>
Tensor<T> perceptual_proxy_loss(const Tensor<T>& pred, const Tensor<T>& ref,
                                const FeatureExtractor<T>& extractor) {
  require_same(pred, ref, "perceptual_proxy_loss");
  std::vector<Tensor<T>> ref_features;
  {
    ad::NoGradGuard no_grad;
    ref_features = extractor.features(ref.detach());
  }
  const std::vector<Tensor<T>> pred_features = extractor.features(pred);
  Tensor<T> total;
  for (std::size_t i = 0; i < pred_features.size(); ++i) {
    const Tensor<T> term = mse_loss(pred_features[i], ref_features[i]);
    total = total.defined() ? ad::add(total, term) : term;
  }
  return total;
}

template <std::floating_point T>
LossBreakdown LossTerms<T>::breakdown() const {
  LossBreakdown b;
  b.l_mse = l_mse.item();
  b.l_perc = l_perc.item();
  b.l_e = l_e.item();
  b.l_m = l_m.item();
  b.l_s = l_s.item();
  b.l_b = l_b.item();
  b.total = total.item();
  return b;
}

template <std::floating_point T>
LossTerms<T> total_loss(const Tensor<T>& pred, const Tensor<T>& ref, const LatentDists<T>& prior,
                        const LatentDists<T>& posterior, const Tensor<T>& detail_weights,
                        const LossWeights& weights, const FeatureExtractor<T>& extractor,
                        KlOrder order) {
  weights.validate();
  LossTerms<T> t;
  t.l_mse = mse_loss(pred, ref);
  t.l_perc = perceptual_proxy_loss(pred, ref, extractor);
  t.l_e = ad::add(t.l_mse, ad::scale(t.l_perc, static_cast<T>(weights.lambda_p)));
  if (order == KlOrder::kPriorFirst) {
    t.l_m = kl_diag_gaussian(prior.shift, posterior.shift);
    t.l_s = kl_diag_gaussian(prior.scale, posterior.scale);
  } else {
    t.l_m = kl_diag_gaussian(posterior.shift, prior.shift);
    t.l_s = kl_diag_gaussian(posterior.scale, prior.scale);
  }
  t.l_b = boundary_loss(pred, ref, detail_weights);
  t.total = ad::add(ad::add(ad::scale(t.l_e, static_cast<T>(weights.alpha)),
                            ad::scale(ad::add(t.l_m, t.l_s), static_cast<T>(weights.beta))),
                    ad::scale(t.l_b, static_cast<T>(weights.gamma)));
  return t;
}

#define FIELDNET_INSTANTIATE_LOSSES(T)                                                        \
  template Tensor<T> mse_loss(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> boundary_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> kl_diag_gaussian(const DiagGaussian<T>&, const DiagGaussian<T>&);        \
  template class ProxyExtractor<T>;                                                           \
  template Tensor<T> perceptual_proxy_loss(const Tensor<T>&, const Tensor<T>&,                \
                                           const FeatureExtractor<T>&);                       \
  template struct LossTerms<T>;                                                               \
  template LossTerms<T> total_loss(const Tensor<T>&, const Tensor<T>&, const LatentDists<T>&, \
                                   const LatentDists<T>&, const Tensor<T>&,                   \
                                   const LossWeights&, const FeatureExtractor<T>&, KlOrder);

FIELDNET_INSTANTIATE_LOSSES(float)
FIELDNET_INSTANTIATE_LOSSES(double)

}  // namespace fieldnet
