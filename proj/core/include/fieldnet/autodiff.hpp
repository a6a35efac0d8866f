#pragma once

#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace fieldnet::ad {

struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

template <std::floating_point T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily by backward
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return inputs.empty(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

// Handle to a node in a dynamically built computation graph. Copies share
// the node. Operations record their inputs and a backward closure whenever
// any input requires grad and recording is enabled (see NoGradGuard).
template <std::floating_point T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  // Empty until a backward pass has reached this tensor.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  T item() const;
  T at(int n, int c, int h, int w) const {
    const Shape& s = node_->shape;
    return node_->value[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w];
  }

  // Same values, no graph history, requires_grad = false.
  Tensor detach() const;
  // Detached copy converted to another scalar type.
  template <std::floating_point U>
  Tensor<U> cast() const {
    std::vector<U> values(node_->value.begin(), node_->value.end());
    return Tensor<U>::from(node_->shape, std::move(values));
  }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

struct Conv2dOptions {
  int stride = 1;
  int pad = 0;       // zero padding before the first row/column
  int pad_end = -1;  // after the last row/column; negative means equal to pad
};

// Cross-correlation. x: N x C x H x W, weight: C' x C x k x k, bias: C'
// (shape 1 x C' x 1 x 1) or undefined. k must be odd and the output size
// (H + pad + pad_end - k) / stride + 1 must divide exactly. Stride-2 layers
// on even inputs use pad = k/2, pad_end = k/2 - 1.
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions options = {});

template <std::floating_point T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor);

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& x);
template <std::floating_point T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope);
template <std::floating_point T>
Tensor<T> sigmoid(const Tensor<T>& x);
// log(1 + exp(x)), evaluated stably.
template <std::floating_point T>
Tensor<T> softplus(const Tensor<T>& x);
template <std::floating_point T>
Tensor<T> exp(const Tensor<T>& x);
template <std::floating_point T>
Tensor<T> square(const Tensor<T>& x);
template <std::floating_point T>
Tensor<T> abs(const Tensor<T>& x);

// Elementwise with broadcasting: each dim must match or be 1 on one side.
template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <std::floating_point T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <std::floating_point T>
Tensor<T> add_scalar(const Tensor<T>& x, T value);

template <std::floating_point T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);
template <std::floating_point T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int count);

// N x C x 1 x 1 spatial means.
template <std::floating_point T>
Tensor<T> avg_pool_global(const Tensor<T>& x);

// Per-sample, per-channel spatial mean and population standard deviation,
// both N x C x 1 x 1. sigma is floored at eps (zero gradient below it).
template <std::floating_point T>
std::pair<Tensor<T>, Tensor<T>> instance_stats(const Tensor<T>& x, T eps = T(1e-5));

// Scalar (1x1x1x1) reductions over all elements.
template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& x);
template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& x);

// Sums over C, H, W giving N x 1 x 1 x 1.
template <std::floating_point T>
Tensor<T> sum_per_sample(const Tensor<T>& x);

// Populates grads of every requires_grad tensor reachable from `loss`.
// Interior grads are reset on each call; leaf grads accumulate until zeroed.
// Throws ConfigError when loss is not a scalar.
template <std::floating_point T>
void backward(const Tensor<T>& loss);

}  // namespace fieldnet::ad
