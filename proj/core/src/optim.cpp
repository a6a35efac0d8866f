#include "fieldnet/optim.hpp"

#include "fieldnet/error.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace fieldnet {

int LrSchedule::resolved_decay_start() const {
  if (decay_start_epoch >= 0) return decay_start_epoch;
  if (total_epochs >= 500) return total_epochs - 200;
  return static_cast<int>(std::lround(0.6 * total_epochs));
}

double LrSchedule::lr_at(int epoch) const {
  const int start = resolved_decay_start();
  const int last = total_epochs - 1;
  if (epoch < start) return lr_initial;
  if (last <= start) return lr_final;
  const double frac = std::min(1.0, static_cast<double>(epoch - start) / (last - start));
  return lr_initial + (lr_final - lr_initial) * frac;
}

template <std::floating_point T>
Adam<T>::Adam(std::vector<ad::Tensor<T>> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), T(0));
    v_.emplace_back(p.numel(), T(0));
  }
}

template <std::floating_point T>
void Adam<T>::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) {
      throw ConfigError(fmt::format("adam step: parameter {} has no gradient", i));
    }
  }
  ++t_;
  const double b1 = options_.beta1;
  const double b2 = options_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto value = params_[i].mutable_data();
    const auto grad = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const T g = grad[j];
      m[j] = static_cast<T>(b1 * m[j] + (1.0 - b1) * g);
      v[j] = static_cast<T>(b2 * v[j] + (1.0 - b2) * g * g);
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      value[j] -= static_cast<T>(lr * m_hat / (std::sqrt(v_hat) + options_.epsilon));
    }
  }
}

template <std::floating_point T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <std::floating_point T>
void Adam<T>::restore(std::int64_t steps, std::vector<std::vector<T>> m,
                      std::vector<std::vector<T>> v) {
  if (m.size() != params_.size() || v.size() != params_.size()) {
    throw DataError("adam restore: moment count does not match parameters");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (m[i].size() != params_[i].numel() || v[i].size() != params_[i].numel()) {
      throw DataError(fmt::format("adam restore: moment size mismatch for parameter {}", i));
    }
  }
  t_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

template class Adam<float>;
template class Adam<double>;

}  // namespace fieldnet
