#include "fieldnet/autodiff.hpp"

#include "fieldnet/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <unordered_set>

#include <fmt/format.h>

namespace fieldnet::ad {

std::string Shape::str() const { return fmt::format("{}x{}x{}x{}", n, c, h, w); }

namespace {

thread_local bool t_grad_enabled = true;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const char* op,
                      std::vector<NodePtr<T>> inputs, std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value = std::move(value);
  node->op = op;
  const bool needs_grad =
      t_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                                    [](const NodePtr<T>& in) { return in && in->requires_grad; });
  if (needs_grad) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
void require_defined(const Tensor<T>& t, const char* op) {
  if (!t.defined()) throw ConfigError(fmt::format("{}: undefined tensor argument", op));
}

// Accumulation target for an input, or nullptr when it needs no gradient.
template <typename T>
T* grad_target(Node<T>& self, std::size_t i) {
  Node<T>& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return in.grad.data();
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, const char* op, Fwd fwd, Deriv deriv) {
  require_defined(x, op);
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return make_result<T>(x.shape(), std::move(out), op, {x.node_ptr()}, [deriv](Node<T>& self) {
    T* gx = grad_target(self, 0);
    if (!gx) return;
    const auto& xv = self.inputs[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[i] * deriv(xv[i], self.value[i]);
  });
}

struct Broadcast {
  Shape out;
  std::array<std::size_t, 4> sa{};
  std::array<std::size_t, 4> sb{};
  bool same = false;
};

Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::array<int, 4> da{a.n, a.c, a.h, a.w};
  const std::array<int, 4> db{b.n, b.c, b.h, b.w};
  std::array<int, 4> dout{};
  for (int d = 0; d < 4; ++d) {
    if (da[d] == db[d] || db[d] == 1) {
      dout[d] = da[d];
    } else if (da[d] == 1) {
      dout[d] = db[d];
    } else {
      throw ConfigError(fmt::format("{}: cannot broadcast {} with {}", op, a.str(), b.str()));
    }
  }
  Broadcast bc;
  bc.out = Shape{dout[0], dout[1], dout[2], dout[3]};
  bc.same = a == b;
  std::size_t stride_a = 1, stride_b = 1;
  for (int d = 3; d >= 0; --d) {
    bc.sa[d] = (da[d] == 1 && dout[d] != 1) ? 0 : stride_a;
    bc.sb[d] = (db[d] == 1 && dout[d] != 1) ? 0 : stride_b;
    stride_a *= da[d];
    stride_b *= db[d];
  }
  return bc;
}

template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  std::size_t k = 0;
  for (int n = 0; n < bc.out.n; ++n) {
    for (int c = 0; c < bc.out.c; ++c) {
      for (int h = 0; h < bc.out.h; ++h) {
        const std::size_t ia0 = n * bc.sa[0] + c * bc.sa[1] + h * bc.sa[2];
        const std::size_t ib0 = n * bc.sb[0] + c * bc.sb[1] + h * bc.sb[2];
        for (int w = 0; w < bc.out.w; ++w, ++k) f(k, ia0 + w * bc.sa[3], ib0 + w * bc.sb[3]);
      }
    }
  }
}

// Binary op with partial derivatives da(a, b), db(a, b).
template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, Fwd fwd, Da da, Db db) {
  require_defined(a, op);
  require_defined(b, op);
  const Broadcast bc = broadcast_shapes(a.shape(), b.shape(), op);
  std::vector<T> out(bc.out.numel());
  const auto av = a.data();
  const auto bv = b.data();
  if (bc.same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    for_each_broadcast(bc, [&](std::size_t k, std::size_t ia, std::size_t ib) {
      out[k] = fwd(av[ia], bv[ib]);
    });
  }
  return make_result<T>(bc.out, std::move(out), op, {a.node_ptr(), b.node_ptr()},
                        [bc, da, db](Node<T>& self) {
                          T* ga = grad_target(self, 0);
                          T* gb = grad_target(self, 1);
                          const auto& av = self.inputs[0]->value;
                          const auto& bv = self.inputs[1]->value;
                          for_each_broadcast(bc, [&](std::size_t k, std::size_t ia, std::size_t ib) {
                            const T g = self.grad[k];
                            if (ga) ga[ia] += g * da(av[ia], bv[ib]);
                            if (gb) gb[ib] += g * db(av[ia], bv[ib]);
                          });
                        });
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  int n, c, h, w;      // input
  int co, k;           // kernel
  int stride, pad;
  int ho, wo;          // output
};

// Lays out the receptive fields of one sample as a (C*k*k) x (Ho*Wo) matrix.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;
  for (int ci = 0; ci < g.c; ++ci) {
    const T* in = x + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = col + (static_cast<std::size_t>(ci) * g.k * g.k + ky * g.k + kx) * plane;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* out = row + static_cast<std::size_t>(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(out, out + g.wo, T(0));
            continue;
          }
          const T* irow = in + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            out[ox] = (ix >= 0 && ix < g.w) ? irow[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* gx) {
  const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;
  for (int ci = 0; ci < g.c; ++ci) {
    T* in = gx + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = col + (static_cast<std::size_t>(ci) * g.k * g.k + ky * g.k + kx) * plane;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * g.wo;
          T* irow = in + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) irow[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

template <std::floating_point T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <std::floating_point T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  return from(shape, std::vector<T>(shape.numel(), value), requires_grad);
}

template <std::floating_point T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0 || values.size() != shape.numel()) {
    throw ConfigError(fmt::format("tensor of shape {} given {} values", shape.str(), values.size()));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <std::floating_point T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from(Shape{1, 1, 1, 1}, {value});
}

template <std::floating_point T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ConfigError(fmt::format("item() on tensor of shape {}", shape().str()));
  return node_->value[0];
}

template <std::floating_point T>
Tensor<T> Tensor<T>::detach() const {
  return from(node_->shape, node_->value);
}

template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions options) {
  require_defined(x, "conv2d");
  require_defined(weight, "conv2d");
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.h != ws.w || ws.h % 2 == 0) {
    throw ConfigError(fmt::format("conv2d: kernel must be square and odd, got {}", ws.str()));
  }
  if (ws.c != xs.c) {
    throw ConfigError(fmt::format("conv2d: input has {} channels, weight expects {} ({})", xs.c,
                                  ws.c, ws.str()));
  }
  if (bias.defined() && bias.numel() != static_cast<std::size_t>(ws.n)) {
    throw ConfigError(fmt::format("conv2d: bias has {} values for {} output channels",
                                  bias.numel(), ws.n));
  }
  const int pad_end = options.pad_end < 0 ? options.pad : options.pad_end;
  if (options.stride < 1 || options.pad < 0) throw ConfigError("conv2d: invalid stride/pad");
  const int span_h = xs.h + options.pad + pad_end - ws.h;
  const int span_w = xs.w + options.pad + pad_end - ws.w;
  if (span_h < 0 || span_w < 0 || span_h % options.stride != 0 || span_w % options.stride != 0) {
    throw ConfigError(fmt::format("conv2d: non-integral output size for input {} kernel {} "
                                  "stride {} pad {}/{}",
                                  xs.str(), ws.h, options.stride, options.pad, pad_end));
  }
  ConvGeometry g{xs.n, xs.c, xs.h, xs.w, ws.n, ws.h, options.stride, options.pad,
                 span_h / options.stride + 1, span_w / options.stride + 1};
  const Shape os{g.n, g.co, g.ho, g.wo};
  const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;
  const std::size_t rows = static_cast<std::size_t>(g.c) * g.k * g.k;
  const std::size_t in_stride = static_cast<std::size_t>(g.c) * g.h * g.w;

  std::vector<T> out(os.numel());
  std::vector<T> col(rows * plane);
  Eigen::Map<const RowMatrix<T>> wmat(weight.data().data(), g.co, rows);
  for (int n = 0; n < g.n; ++n) {
    im2col(x.data().data() + n * in_stride, g, col.data());
    Eigen::Map<const RowMatrix<T>> cmat(col.data(), rows, plane);
    Eigen::Map<RowMatrix<T>> omat(out.data() + n * g.co * plane, g.co, plane);
    omat.noalias() = wmat * cmat;
    if (bias.defined()) {
      const auto bv = bias.data();
      for (int co = 0; co < g.co; ++co) omat.row(co).array() += bv[co];
    }
  }

  std::vector<NodePtr<T>> inputs{x.node_ptr(), weight.node_ptr()};
  if (bias.defined()) inputs.push_back(bias.node_ptr());
  return make_result<T>(os, std::move(out), "conv2d", std::move(inputs), [g](Node<T>& self) {
    T* gx = grad_target(self, 0);
    T* gw = grad_target(self, 1);
    T* gb = self.inputs.size() > 2 ? grad_target(self, 2) : nullptr;
    const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;
    const std::size_t rows = static_cast<std::size_t>(g.c) * g.k * g.k;
    const std::size_t in_stride = static_cast<std::size_t>(g.c) * g.h * g.w;
    const T* xv = self.inputs[0]->value.data();
    Eigen::Map<const RowMatrix<T>> wmat(self.inputs[1]->value.data(), g.co, rows);
    std::vector<T> col(rows * plane);
    for (int n = 0; n < g.n; ++n) {
      Eigen::Map<const RowMatrix<T>> gout(self.grad.data() + n * g.co * plane, g.co, plane);
      if (gb) {
        for (int co = 0; co < g.co; ++co) gb[co] += gout.row(co).sum();
      }
      if (gw) {
        im2col(xv + n * in_stride, g, col.data());
        Eigen::Map<const RowMatrix<T>> cmat(col.data(), rows, plane);
        Eigen::Map<RowMatrix<T>> gwmat(gw, g.co, rows);
        gwmat.noalias() += gout * cmat.transpose();
      }
      if (gx) {
        Eigen::Map<RowMatrix<T>> cmat(col.data(), rows, plane);
        cmat.noalias() = wmat.transpose() * gout;
        col2im(col.data(), g, gx + n * in_stride);
      }
    }
  });
}

template <std::floating_point T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor) {
  require_defined(x, "upsample_nearest");
  if (factor < 1) throw ConfigError("upsample_nearest: factor must be >= 1");
  const Shape xs = x.shape();
  const Shape os{xs.n, xs.c, xs.h * factor, xs.w * factor};
  std::vector<T> out(os.numel());
  const auto in = x.data();
  std::size_t k = 0;
  for (int p = 0; p < xs.n * xs.c; ++p) {
    for (int y = 0; y < os.h; ++y) {
      const std::size_t row = (static_cast<std::size_t>(p) * xs.h + y / factor) * xs.w;
      for (int xx = 0; xx < os.w; ++xx) out[k++] = in[row + xx / factor];
    }
  }
  return make_result<T>(os, std::move(out), "upsample_nearest", {x.node_ptr()},
                        [xs, os, factor](Node<T>& self) {
                          T* gx = grad_target(self, 0);
                          if (!gx) return;
                          std::size_t k = 0;
                          for (int p = 0; p < xs.n * xs.c; ++p) {
                            for (int y = 0; y < os.h; ++y) {
                              const std::size_t row =
                                  (static_cast<std::size_t>(p) * xs.h + y / factor) * xs.w;
                              for (int xx = 0; xx < os.w; ++xx) gx[row + xx / factor] += self.grad[k++];
                            }
                          }
                        });
}

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <std::floating_point T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  return unary(
      x, "leaky_relu", [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <std::floating_point T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(
      x, "sigmoid",
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <std::floating_point T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary(
      x, "softplus",
      [](T v) { return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](T v, T) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      });
}

template <std::floating_point T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary(
      x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <std::floating_point T>
Tensor<T> square(const Tensor<T>& x) {
  return unary(
      x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <std::floating_point T>
Tensor<T> abs(const Tensor<T>& x) {
  return unary(
      x, "abs", [](T v) { return std::fabs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <std::floating_point T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary(
      x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <std::floating_point T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  return unary(
      x, "add_scalar", [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <std::floating_point T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ConfigError("concat_channels: no inputs");
  for (const auto& p : parts) require_defined(p, "concat_channels");
  const Shape first = parts.front().shape();
  Shape os = first;
  os.c = 0;
  std::vector<int> channels;
  for (const auto& p : parts) {
    const Shape s = p.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ConfigError(fmt::format("concat_channels: shape {} incompatible with {}", s.str(),
                                    first.str()));
    }
    channels.push_back(s.c);
    os.c += s.c;
  }
  const std::size_t plane = static_cast<std::size_t>(os.h) * os.w;
  std::vector<T> out(os.numel());
  std::vector<NodePtr<T>> inputs;
  for (int n = 0; n < os.n; ++n) {
    std::size_t offset = static_cast<std::size_t>(n) * os.c * plane;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const std::size_t len = channels[i] * plane;
      const auto src = parts[i].data().subspan(n * len, len);
      std::copy(src.begin(), src.end(), out.begin() + offset);
      offset += len;
    }
  }
  for (const auto& p : parts) inputs.push_back(p.node_ptr());
  return make_result<T>(os, std::move(out), "concat_channels", std::move(inputs),
                        [os, channels, plane](Node<T>& self) {
                          for (int n = 0; n < os.n; ++n) {
                            std::size_t offset = static_cast<std::size_t>(n) * os.c * plane;
                            for (std::size_t i = 0; i < channels.size(); ++i) {
                              const std::size_t len = channels[i] * plane;
                              if (T* g = grad_target(self, i)) {
                                for (std::size_t j = 0; j < len; ++j) {
                                  g[n * len + j] += self.grad[offset + j];
                                }
                              }
                              offset += len;
                            }
                          }
                        });
}

template <std::floating_point T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int count) {
  require_defined(x, "slice_channels");
  const Shape xs = x.shape();
  if (begin < 0 || count < 1 || begin + count > xs.c) {
    throw ConfigError(fmt::format("slice_channels: [{}, {}) outside {} channels", begin,
                                  begin + count, xs.c));
  }
  const Shape os{xs.n, count, xs.h, xs.w};
  const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
  std::vector<T> out(os.numel());
  const auto in = x.data();
  for (int n = 0; n < xs.n; ++n) {
    const auto src = in.subspan((static_cast<std::size_t>(n) * xs.c + begin) * plane, count * plane);
    std::copy(src.begin(), src.end(), out.begin() + static_cast<std::size_t>(n) * count * plane);
  }
  return make_result<T>(os, std::move(out), "slice_channels", {x.node_ptr()},
                        [xs, begin, count, plane](Node<T>& self) {
                          T* gx = grad_target(self, 0);
                          if (!gx) return;
                          for (int n = 0; n < xs.n; ++n) {
                            T* dst = gx + (static_cast<std::size_t>(n) * xs.c + begin) * plane;
                            const T* src = self.grad.data() + static_cast<std::size_t>(n) * count * plane;
                            for (std::size_t j = 0; j < count * plane; ++j) dst[j] += src[j];
                          }
                        });
}

template <std::floating_point T>
Tensor<T> avg_pool_global(const Tensor<T>& x) {
  require_defined(x, "avg_pool_global");
  const Shape xs = x.shape();
  const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
  if (plane == 0) throw ConfigError("avg_pool_global: empty spatial extent");
  const Shape os{xs.n, xs.c, 1, 1};
  std::vector<T> out(os.numel());
  const auto in = x.data();
  for (std::size_t p = 0; p < out.size(); ++p) {
    T acc = 0;
    for (std::size_t j = 0; j < plane; ++j) acc += in[p * plane + j];
    out[p] = acc / static_cast<T>(plane);
  }
  return make_result<T>(os, std::move(out), "avg_pool_global", {x.node_ptr()},
                        [plane](Node<T>& self) {
                          T* gx = grad_target(self, 0);
                          if (!gx) return;
                          for (std::size_t p = 0; p < self.grad.size(); ++p) {
                            const T g = self.grad[p] / static_cast<T>(plane);
                            for (std::size_t j = 0; j < plane; ++j) gx[p * plane + j] += g;
                          }
                        });
}

template <std::floating_point T>
std::pair<Tensor<T>, Tensor<T>> instance_stats(const Tensor<T>& x, T eps) {
  require_defined(x, "instance_stats");
  const Shape xs = x.shape();
  const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
  if (plane == 0) throw ConfigError("instance_stats: empty spatial extent");
  const Shape os{xs.n, xs.c, 1, 1};
  std::vector<T> mu(os.numel()), sigma(os.numel());
  std::vector<bool> floored(os.numel());
  const auto in = x.data();
  for (std::size_t p = 0; p < mu.size(); ++p) {
    const T* v = in.data() + p * plane;
    T acc = 0;
    for (std::size_t j = 0; j < plane; ++j) acc += v[j];
    const T m = acc / static_cast<T>(plane);
    T var = 0;
    for (std::size_t j = 0; j < plane; ++j) var += (v[j] - m) * (v[j] - m);
    var /= static_cast<T>(plane);
    const T sd = std::sqrt(var);
    mu[p] = m;
    floored[p] = !(sd > eps);
    sigma[p] = floored[p] ? eps : sd;
  }

  auto mean_node = make_result<T>(os, std::move(mu), "instance_mean", {x.node_ptr()},
                                  [plane](Node<T>& self) {
                                    T* gx = grad_target(self, 0);
                                    if (!gx) return;
                                    for (std::size_t p = 0; p < self.grad.size(); ++p) {
                                      const T g = self.grad[p] / static_cast<T>(plane);
                                      for (std::size_t j = 0; j < plane; ++j) gx[p * plane + j] += g;
                                    }
                                  });
  // d sigma / d x_j = (x_j - mu) / (HW sigma) for the population std.
  auto std_node = make_result<T>(
      os, std::move(sigma), "instance_std", {x.node_ptr()},
      [plane, floored = std::move(floored)](Node<T>& self) {
        T* gx = grad_target(self, 0);
        if (!gx) return;
        const auto& xv = self.inputs[0]->value;
        for (std::size_t p = 0; p < self.grad.size(); ++p) {
          if (floored[p]) continue;
          const T* v = xv.data() + p * plane;
          T acc = 0;
          for (std::size_t j = 0; j < plane; ++j) acc += v[j];
          const T m = acc / static_cast<T>(plane);
          const T g = self.grad[p] / (static_cast<T>(plane) * self.value[p]);
          for (std::size_t j = 0; j < plane; ++j) gx[p * plane + j] += g * (v[j] - m);
        }
      });
  return {mean_node, std_node};
}

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& x) {
  require_defined(x, "sum");
  T acc = 0;
  for (T v : x.data()) acc += v;
  return make_result<T>(Shape{1, 1, 1, 1}, {acc}, "sum", {x.node_ptr()}, [](Node<T>& self) {
    T* gx = grad_target(self, 0);
    if (!gx) return;
    const std::size_t n = self.inputs[0]->value.size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
  });
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& x) {
  require_defined(x, "mean");
  if (x.numel() == 0) throw ConfigError("mean: empty tensor");
  T acc = 0;
  for (T v : x.data()) acc += v;
  const T count = static_cast<T>(x.numel());
  return make_result<T>(Shape{1, 1, 1, 1}, {acc / count}, "mean", {x.node_ptr()},
                        [count](Node<T>& self) {
                          T* gx = grad_target(self, 0);
                          if (!gx) return;
                          const std::size_t n = self.inputs[0]->value.size();
                          const T g = self.grad[0] / count;
                          for (std::size_t i = 0; i < n; ++i) gx[i] += g;
                        });
}

template <std::floating_point T>
Tensor<T> sum_per_sample(const Tensor<T>& x) {
  require_defined(x, "sum_per_sample");
  const Shape xs = x.shape();
  const std::size_t per = static_cast<std::size_t>(xs.c) * xs.h * xs.w;
  std::vector<T> out(xs.n, T(0));
  const auto in = x.data();
  for (int n = 0; n < xs.n; ++n) {
    for (std::size_t j = 0; j < per; ++j) out[n] += in[n * per + j];
  }
  return make_result<T>(Shape{xs.n, 1, 1, 1}, std::move(out), "sum_per_sample", {x.node_ptr()},
                        [per](Node<T>& self) {
                          T* gx = grad_target(self, 0);
                          if (!gx) return;
                          for (std::size_t n = 0; n < self.grad.size(); ++n) {
                            for (std::size_t j = 0; j < per; ++j) gx[n * per + j] += self.grad[n];
                          }
                        });
}

template <std::floating_point T>
void backward(const Tensor<T>& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) {
    throw ConfigError(fmt::format("backward needs a scalar loss, got shape {}", loss.shape().str()));
  }
  Node<T>* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* node : order) {
    if (node->is_leaf()) {
      node->ensure_grad();
    } else {
      node->grad.assign(node->value.size(), T(0));
    }
  }
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn) node->backward_fn(*node);
  }
}

#define FIELDNET_INSTANTIATE(T)                                                              \
  template class Tensor<T>;                                                                  \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                            Conv2dOptions);                                                  \
  template Tensor<T> upsample_nearest(const Tensor<T>&, int);                                \
  template Tensor<T> relu(const Tensor<T>&);                                                 \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                        \
  template Tensor<T> sigmoid(const Tensor<T>&);                                              \
  template Tensor<T> softplus(const Tensor<T>&);                                             \
  template Tensor<T> exp(const Tensor<T>&);                                                  \
  template Tensor<T> square(const Tensor<T>&);                                               \
  template Tensor<T> abs(const Tensor<T>&);                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale(const Tensor<T>&, T);                                             \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                        \
  template Tensor<T> concat_channels(const std::vector<Tensor<T>>&);                         \
  template Tensor<T> slice_channels(const Tensor<T>&, int, int);                             \
  template Tensor<T> avg_pool_global(const Tensor<T>&);                                      \
  template std::pair<Tensor<T>, Tensor<T>> instance_stats(const Tensor<T>&, T);              \
  template Tensor<T> sum(const Tensor<T>&);                                                  \
  template Tensor<T> mean(const Tensor<T>&);                                                 \
  template Tensor<T> sum_per_sample(const Tensor<T>&);                                       \
  template void backward(const Tensor<T>&);

FIELDNET_INSTANTIATE(float)
FIELDNET_INSTANTIATE(double)

#undef FIELDNET_INSTANTIATE

}  // namespace fieldnet::ad
