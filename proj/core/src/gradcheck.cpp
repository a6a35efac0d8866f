#include "fieldnet/gradcheck.hpp"

#include "fieldnet/rng.hpp"

#include <algorithm>
#include <cmath>

namespace fieldnet {

using ad::Shape;
using ad::Tensor;

namespace {

// Scalar objective: the op output itself, or its projection onto R.
double evaluate(const DiffFn& op, std::span<const Tensor<double>> inputs,
                const std::vector<double>& projection) {
  ad::NoGradGuard no_grad;
  const Tensor<double> out = op(inputs);
  const auto values = out.data();
  if (projection.empty()) return values[0];
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) acc += values[i] * projection[i];
  return acc;
}

}  // namespace

GradCheckResult grad_check_at(const DiffFn& op, std::vector<Tensor<double>> inputs,
                              std::uint64_t seed, const GradCheckOptions& options) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Rng rng(mix_seed(seed, 0xC0FFEE));

  Tensor<double> out = op(inputs);
  std::vector<double> projection;
  Tensor<double> objective = out;
  if (out.numel() != 1) {
    projection.resize(out.numel());
    for (auto& r : projection) r = rng.normal();
    objective = ad::sum(ad::mul(out, Tensor<double>::from(out.shape(), projection)));
  }
  ad::backward(objective);

  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!options.check_inputs.empty() &&
        std::find(options.check_inputs.begin(), options.check_inputs.end(), k) ==
            options.check_inputs.end()) {
      continue;
    }
    auto values = inputs[k].mutable_data();
    const auto grad = inputs[k].grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + options.step;
      const double plus = evaluate(op, inputs, projection);
      values[i] = original - options.step;
      const double minus = evaluate(op, inputs, projection);
      values[i] = original;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double analytic = grad.empty() ? 0.0 : grad[i];
      const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(analytic - numeric) / denom;
      if (rel > result.max_relative_error || std::isnan(rel)) {
        result.max_relative_error = std::isnan(rel) ? INFINITY : rel;
        result.worst_input = k;
        result.worst_index = i;
        result.analytic = analytic;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

GradCheckResult grad_check_detailed(const DiffFn& op, std::span<const Shape> input_shapes,
                                    std::uint64_t seed, const GradCheckOptions& options) {
  Rng rng(seed);
  std::vector<Tensor<double>> inputs;
  for (const Shape& shape : input_shapes) {
    std::vector<double> values(shape.numel());
    for (auto& v : values) {
      const double z = rng.normal() * options.scale;
      if (options.min_magnitude > 0.0) {
        v = (z < 0 ? -1.0 : 1.0) * (options.min_magnitude + std::fabs(z));
      } else {
        v = z;
      }
    }
    inputs.push_back(Tensor<double>::from(shape, std::move(values)));
  }
  return grad_check_at(op, std::move(inputs), seed, options);
}

double grad_check(const DiffFn& op, std::span<const Shape> input_shapes, std::uint64_t seed,
                  const GradCheckOptions& options) {
  return grad_check_detailed(op, input_shapes, seed, options).max_relative_error;
}

}  // namespace fieldnet
