#pragma once

#include "fieldnet/autodiff.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace fieldnet {

using DiffFn = std::function<ad::Tensor<double>(std::span<const ad::Tensor<double>>)>;

struct GradCheckOptions {
  double step = 1e-3;  // central difference half-width
  // Inputs are drawn as sign * (min_magnitude + |N(0, scale^2)|) when
  // min_magnitude > 0, keeping samples away from kinks at zero.
  double scale = 1.0;
  double min_magnitude = 0.0;
  // Which inputs to check; empty = all.
  std::vector<std::size_t> check_inputs;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares analytic gradients against central differences in double
// precision. Non-scalar op outputs are reduced with a fixed random
// projection sum(out * R). Relative error is |a - n| / max(|a|, |n|, 1e-8).
GradCheckResult grad_check_detailed(const DiffFn& op, std::span<const ad::Shape> input_shapes,
                                    std::uint64_t seed, const GradCheckOptions& options = {});

// Same check on caller-provided input values.
GradCheckResult grad_check_at(const DiffFn& op, std::vector<ad::Tensor<double>> inputs,
                              std::uint64_t seed, const GradCheckOptions& options = {});

double grad_check(const DiffFn& op, std::span<const ad::Shape> input_shapes, std::uint64_t seed,
                  const GradCheckOptions& options = {});

}  // namespace fieldnet
