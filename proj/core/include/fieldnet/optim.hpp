#pragma once

#include "fieldnet/autodiff.hpp"

#include <cstdint>
#include <vector>

namespace fieldnet {

// Constant lr_initial until decay_start_epoch, then linear to lr_final at the
// last epoch (total_epochs - 1).
struct LrSchedule {
  double lr_initial = 1e-4;
  double lr_final = 1e-6;
  int total_epochs = 500;
  // Negative selects the default: total - 200 when total >= 500, otherwise
  // the final 40% of epochs.
  int decay_start_epoch = -1;

  int resolved_decay_start() const;
  double lr_at(int epoch) const;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with bias correction. Moments are kept in the parameter precision.
template <std::floating_point T>
class Adam {
 public:
  Adam(std::vector<ad::Tensor<T>> params, AdamOptions options = {});

  // One update with the given learning rate. Throws ConfigError if any
  // parameter has no populated gradient.
  void step(double lr);
  void zero_grad();

  std::int64_t steps() const { return t_; }
  const AdamOptions& options() const { return options_; }
  const std::vector<ad::Tensor<T>>& params() const { return params_; }

  // Checkpoint access.
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  void restore(std::int64_t steps, std::vector<std::vector<T>> m, std::vector<std::vector<T>> v);

 private:
  std::vector<ad::Tensor<T>> params_;
  AdamOptions options_;
  std::int64_t t_ = 0;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
};

}  // namespace fieldnet
