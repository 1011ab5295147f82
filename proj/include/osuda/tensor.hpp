#pragma once

// Dense 64-bit tensor with a dynamic reverse-mode tape.
//
// Every op returns a fresh Tensor. When gradient recording is enabled and any
// input requires a gradient, the result keeps references to its inputs plus a
// closure that pushes the result's gradient back into them. Calling
// backward() on a scalar walks that graph once; a second call on the same
// graph throws.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace osuda {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> push_grad;

  bool is_leaf() const { return !push_grad; }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables gradient recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (numel_of(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t dim(std::size_t axis) const { return node().shape.at(axis); }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t numel() const { return node().data.size(); }

  std::span<const double> data() const { return node().data; }

  // Direct write access; only meaningful on leaves (parameters, inputs).
  std::span<double> mutable_data() { return node().data; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node().data[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  bool has_grad() const { return !node().grad.empty(); }
  std::span<const double> grad() const { return node().grad; }
  void zero_grad() { node().grad.clear(); }

  // Same values, cut from the graph.
  Tensor detach() const { return Tensor(shape(), node().data, false); }

  void backward() const;

  // Identity of the underlying storage; used by tests to check aliasing.
  const void* id() const { return node_.get(); }

  // Op construction. `push_grad` receives the result node and must accumulate
  // result.grad into the inputs' grad buffers (already sized when called).
  static Tensor make_result(Shape shape, std::vector<double> data,
                            std::vector<Tensor> inputs,
                            std::function<void(detail::Node&)> push_grad) {
    Tensor out(std::move(shape), std::move(data), false);
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
    out.node_->push_grad = std::move(push_grad);
    return out;
  }

  detail::Node& node() const {
    if (!node_) throw std::logic_error("use of undefined tensor");
    return *node_;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

inline void Tensor::backward() const {
  using detail::Node;
  Node& root = node();
  if (root.data.size() != 1) {
    throw AutogradError("backward requires a scalar loss, got shape " + to_string(root.shape));
  }
  if (root.consumed) throw AutogradError("backward called twice on the same graph");
  if (!root.requires_grad) throw AutogradError("backward on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{&root, 0}};
  seen.insert(&root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->consumed) throw AutogradError("backward through a graph that was already backpropagated");
    if (n->is_leaf() && !n->grad.empty()) {
      throw AutogradError("leaf gradient already populated; call zero_grad() before another backward");
    }
  }
  for (Node* n : order) n->grad.assign(n->data.size(), 0.0);
  root.grad[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf()) continue;
    n->push_grad(*n);
  }
  for (Node* n : order) {
    if (n->is_leaf()) continue;
    n->consumed = true;
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->inputs.clear();
    n->push_grad = nullptr;
  }
}

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string("shape mismatch in ") + op + ": " + to_string(a.shape()) +
                     " vs " + to_string(b.shape()));
  }
}

inline void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + " expects a rank-" + std::to_string(rank) +
                     " tensor, got " + to_string(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename Forward, typename Backward>
Tensor binary_elementwise(const char* name, const Tensor& a, const Tensor& b, Forward fwd,
                          Backward bwd) {
  detail::require_same_shape(name, a, b);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i], y[i]);
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [bwd](detail::Node& r) {
    auto& na = *r.inputs[0];
    auto& nb = *r.inputs[1];
    for (std::size_t i = 0; i < r.grad.size(); ++i) {
      const auto [da, db] = bwd(na.data[i], nb.data[i], r.data[i]);
      if (na.requires_grad) na.grad[i] += r.grad[i] * da;
      if (nb.requires_grad) nb.grad[i] += r.grad[i] * db;
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return std::pair{1.0, 1.0}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return std::pair{1.0, -1.0}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double) { return std::pair{y, x}; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double z) { return std::pair{1.0 / y, -z / y}; });
}

template <typename Forward, typename Derivative>
Tensor unary_elementwise(const Tensor& a, Forward fwd, Derivative dfdx) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  return Tensor::make_result(a.shape(), std::move(out), {a}, [dfdx](detail::Node& r) {
    auto& na = *r.inputs[0];
    for (std::size_t i = 0; i < r.grad.size(); ++i) na.grad[i] += r.grad[i] * dfdx(na.data[i], r.data[i]);
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return unary_elementwise(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& a, double s) {
  return unary_elementwise(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

inline Tensor relu(const Tensor& a) {
  return unary_elementwise(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor log(const Tensor& a) {
  return unary_elementwise(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
  return unary_elementwise(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

// max(x, floor); gradient passes only where x > floor.
inline Tensor clamp_min(const Tensor& a, double floor) {
  return unary_elementwise(
      a, [floor](double x) { return x > floor ? x : floor; },
      [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  const auto x = a.data();
  double s = 0.0;
  for (double v : x) s += v;
  return Tensor::make_result(Shape{}, {s}, {a}, [](detail::Node& r) {
    auto& na = *r.inputs[0];
    for (double& g : na.grad) g += r.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// [N,C,H,W] -> [N,C], spatial mean per channel.
inline Tensor channel_mean(const Tensor& a) {
  detail::require_rank("channel_mean", a, 4);
  const std::size_t nc = a.dim(0) * a.dim(1);
  const std::size_t hw = a.dim(2) * a.dim(3);
  if (hw == 0) throw ShapeError("channel_mean over empty spatial extent " + to_string(a.shape()));
  const auto x = a.data();
  std::vector<double> out(nc);
  for (std::size_t i = 0; i < nc; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += x[i * hw + j];
    out[i] = s / static_cast<double>(hw);
  }
  return Tensor::make_result(Shape{a.dim(0), a.dim(1)}, std::move(out), {a}, [hw](detail::Node& r) {
    auto& na = *r.inputs[0];
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t i = 0; i < r.grad.size(); ++i) {
      const double g = r.grad[i] * inv;
      for (std::size_t j = 0; j < hw; ++j) na.grad[i * hw + j] += g;
    }
  });
}

// [N,C,H,W] -> [N,C], sqrt(population variance + eps) per channel.
inline Tensor channel_std(const Tensor& a, double eps) {
  detail::require_rank("channel_std", a, 4);
  const std::size_t nc = a.dim(0) * a.dim(1);
  const std::size_t hw = a.dim(2) * a.dim(3);
  if (hw == 0) throw ShapeError("channel_std over empty spatial extent " + to_string(a.shape()));
  const auto x = a.data();
  std::vector<double> out(nc);
  std::vector<double> means(nc);
  for (std::size_t i = 0; i < nc; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += x[i * hw + j];
    const double mu = s / static_cast<double>(hw);
    double v = 0.0;
    for (std::size_t j = 0; j < hw; ++j) {
      const double d = x[i * hw + j] - mu;
      v += d * d;
    }
    means[i] = mu;
    out[i] = std::sqrt(v / static_cast<double>(hw) + eps);
  }
  return Tensor::make_result(
      Shape{a.dim(0), a.dim(1)}, std::move(out), {a}, [hw, means = std::move(means)](detail::Node& r) {
        auto& na = *r.inputs[0];
        const double inv = 1.0 / static_cast<double>(hw);
        for (std::size_t i = 0; i < r.grad.size(); ++i) {
          // d sigma / d x_j = (x_j - mu) / (HW * sigma); the mean's own
          // dependence on x_j cancels because deviations sum to zero.
          const double g = r.grad[i] * inv / r.data[i];
          for (std::size_t j = 0; j < hw; ++j) na.grad[i * hw + j] += g * (na.data[i * hw + j] - means[i]);
        }
      });
}

// ---------------------------------------------------------------------------
// Shape ops

// [N,C] -> [N,C,H,W] by repeating each entry over the spatial grid.
inline Tensor broadcast_channels(const Tensor& v, std::size_t height, std::size_t width) {
  detail::require_rank("broadcast_channels", v, 2);
  const std::size_t nc = v.numel();
  const std::size_t hw = height * width;
  const auto x = v.data();
  std::vector<double> out(nc * hw);
  for (std::size_t i = 0; i < nc; ++i) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(i * hw), hw, x[i]);
  return Tensor::make_result(Shape{v.dim(0), v.dim(1), height, width}, std::move(out), {v},
                             [hw](detail::Node& r) {
                               auto& nv = *r.inputs[0];
                               for (std::size_t i = 0; i < nv.grad.size(); ++i) {
                                 double s = 0.0;
                                 for (std::size_t j = 0; j < hw; ++j) s += r.grad[i * hw + j];
                                 nv.grad[i] += s;
                               }
                             });
}

// Broadcast a per-channel vector to match a 4-D feature's shape.
inline Tensor broadcast_like(const Tensor& v, const Tensor& like) {
  detail::require_rank("broadcast_like", like, 4);
  if (v.rank() != 2 || v.dim(0) != like.dim(0) || v.dim(1) != like.dim(1)) {
    throw ShapeError("shape mismatch in broadcast: " + to_string(v.shape()) + " vs " + to_string(like.shape()));
  }
  return broadcast_channels(v, like.dim(2), like.dim(3));
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("shape mismatch in reshape: " + to_string(a.shape()) + " vs " + to_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {a}, [](detail::Node& r) {
    auto& na = *r.inputs[0];
    for (std::size_t i = 0; i < r.grad.size(); ++i) na.grad[i] += r.grad[i];
  });
}

// Contiguous range [start, start+length) along `axis`.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= a.rank() || start + length > a.dim(axis)) {
    throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + length) +
                     ") on axis " + std::to_string(axis) + " out of range for " + to_string(a.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t extent = a.dim(axis);
  Shape shape = a.shape();
  shape[axis] = length;
  const auto x = a.data();
  std::vector<double> out(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < length; ++k)
      for (std::size_t i = 0; i < inner; ++i)
        out[(o * length + k) * inner + i] = x[(o * extent + start + k) * inner + i];
  return Tensor::make_result(std::move(shape), std::move(out), {a},
                             [outer, inner, extent, start, length](detail::Node& r) {
                               auto& na = *r.inputs[0];
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t k = 0; k < length; ++k)
                                   for (std::size_t i = 0; i < inner; ++i)
                                     na.grad[(o * extent + start + k) * inner + i] +=
                                         r.grad[(o * length + k) * inner + i];
                             });
}

// Nearest-neighbour spatial upsample of [N,C,H,W] by an integer factor.
// Forward only: the result never records a gradient.
inline Tensor upsample_nearest(const Tensor& a, std::size_t factor) {
  detail::require_rank("upsample_nearest", a, 4);
  if (factor == 0) throw ShapeError("upsample factor must be positive");
  const std::size_t nc = a.dim(0) * a.dim(1), h = a.dim(2), w = a.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  const auto x = a.data();
  std::vector<double> out(nc * oh * ow);
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t z = 0; z < ow; ++z) out[(i * oh + y) * ow + z] = x[(i * h + y / factor) * w + z / factor];
  return Tensor(Shape{a.dim(0), a.dim(1), oh, ow}, std::move(out), false);
}

// ---------------------------------------------------------------------------
// Softmax over the channel axis of [N,C,H,W].

inline Tensor softmax_channels(const Tensor& a) {
  detail::require_rank("softmax_channels", a, 4);
  const std::size_t n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t base = b * c * hw;
    for (std::size_t j = 0; j < hw; ++j) {
      double mx = -INFINITY;
      for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, x[base + k * hw + j]);
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double e = std::exp(x[base + k * hw + j] - mx);
        out[base + k * hw + j] = e;
        s += e;
      }
      for (std::size_t k = 0; k < c; ++k) out[base + k * hw + j] /= s;
    }
  }
  return Tensor::make_result(a.shape(), std::move(out), {a}, [n, c, hw](detail::Node& r) {
    auto& na = *r.inputs[0];
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t base = b * c * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        double dot = 0.0;
        for (std::size_t k = 0; k < c; ++k) dot += r.grad[base + k * hw + j] * r.data[base + k * hw + j];
        for (std::size_t k = 0; k < c; ++k) {
          const std::size_t i = base + k * hw + j;
          na.grad[i] += r.data[i] * (r.grad[i] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// 2-D convolution, NCHW input, OIKK weights, zero padding.

struct Conv2dGeometry {
  std::size_t batch, in_ch, in_h, in_w;
  std::size_t out_ch, kernel, stride, pad;
  std::size_t out_h, out_w;
};

namespace detail {

// Output column range [lo, hi) whose input column ox*stride + k - pad is in bounds.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out_len, std::size_t in_len, std::size_t k,
                                                       std::size_t stride, std::size_t pad) {
  std::size_t lo = 0;
  while (lo < out_len && lo * stride + k < pad) ++lo;
  std::size_t hi = out_len;
  while (hi > lo && (hi - 1) * stride + k - pad >= in_len) --hi;
  return {lo, hi};
}

}  // namespace detail

namespace detail {

// Unfolds one image [C,H,W] into columns [C*K*K, Ho*Wo] (zero padded).
inline void im2col(const double* src, const Conv2dGeometry& g, double* cols) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    const double* img = src + c * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      const auto [ylo, yhi] = valid_range(g.out_h, g.in_h, ky, g.stride, g.pad);
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const auto [xlo, xhi] = valid_range(g.out_w, g.in_w, kx, g.stride, g.pad);
        double* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * plane;
        std::fill_n(row, plane, 0.0);
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          const double* in = img + (oy * g.stride + ky - g.pad) * g.in_w;
          double* out = row + oy * g.out_w;
          for (std::size_t ox = xlo; ox < xhi; ++ox) out[ox] = in[ox * g.stride + kx - g.pad];
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column gradients back onto the image.
inline void col2im_add(const double* cols, const Conv2dGeometry& g, double* dst) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    double* img = dst + c * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      const auto [ylo, yhi] = valid_range(g.out_h, g.in_h, ky, g.stride, g.pad);
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const auto [xlo, xhi] = valid_range(g.out_w, g.in_w, kx, g.stride, g.pad);
        const double* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * plane;
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          double* out = img + (oy * g.stride + ky - g.pad) * g.in_w;
          const double* in = row + oy * g.out_w;
          for (std::size_t ox = xlo; ox < xhi; ++ox) out[ox * g.stride + kx - g.pad] += in[ox];
        }
      }
    }
  }
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                     std::size_t pad) {
  detail::require_rank("conv2d input", x, 4);
  detail::require_rank("conv2d weight", weight, 4);
  detail::require_rank("conv2d bias", bias, 1);
  if (weight.dim(1) != x.dim(1) || weight.dim(2) != weight.dim(3) || bias.dim(0) != weight.dim(0)) {
    throw ShapeError("shape mismatch in conv2d: input " + to_string(x.shape()) + " vs weight " +
                     to_string(weight.shape()) + " and bias " + to_string(bias.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  Conv2dGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), stride, pad, 0, 0};
  if (g.in_h + 2 * pad < g.kernel || g.in_w + 2 * pad < g.kernel) {
    throw ShapeError("conv2d kernel larger than padded input " + to_string(x.shape()));
  }
  g.out_h = (g.in_h + 2 * pad - g.kernel) / stride + 1;
  g.out_w = (g.in_w + 2 * pad - g.kernel) / stride + 1;

  const auto rows = static_cast<Eigen::Index>(g.in_ch * g.kernel * g.kernel);
  const auto plane = static_cast<Eigen::Index>(g.out_h * g.out_w);
  const auto out_ch = static_cast<Eigen::Index>(g.out_ch);
  const std::size_t in_plane = g.in_ch * g.in_h * g.in_w;

  // Columns are kept for the backward pass.
  auto cols = std::make_shared<std::vector<double>>(g.batch * static_cast<std::size_t>(rows * plane));
  std::vector<double> out(g.batch * g.out_ch * static_cast<std::size_t>(plane));
  const detail::ConstMatrixMap w(weight.data().data(), out_ch, rows);
  const auto b = bias.data();
  for (std::size_t n = 0; n < g.batch; ++n) {
    double* col = cols->data() + n * static_cast<std::size_t>(rows * plane);
    detail::im2col(x.data().data() + n * in_plane, g, col);
    detail::MatrixMap y(out.data() + n * g.out_ch * static_cast<std::size_t>(plane), out_ch, plane);
    y.noalias() = w * detail::ConstMatrixMap(col, rows, plane);
    for (Eigen::Index o = 0; o < out_ch; ++o) y.row(o).array() += b[static_cast<std::size_t>(o)];
  }

  return Tensor::make_result(
      Shape{g.batch, g.out_ch, g.out_h, g.out_w}, std::move(out), {x, weight, bias},
      [g, cols, rows, plane, out_ch, in_plane](detail::Node& r) {
        auto& nx = *r.inputs[0];
        auto& nw = *r.inputs[1];
        auto& nb = *r.inputs[2];
        const detail::ConstMatrixMap w(nw.data.data(), out_ch, rows);
        std::vector<double> dcol(nx.requires_grad ? static_cast<std::size_t>(rows * plane) : 0);
        for (std::size_t n = 0; n < g.batch; ++n) {
          const detail::ConstMatrixMap gout(r.grad.data() + n * g.out_ch * static_cast<std::size_t>(plane), out_ch,
                                            plane);
          const detail::ConstMatrixMap col(cols->data() + n * static_cast<std::size_t>(rows * plane), rows, plane);
          if (nb.requires_grad) {
            for (Eigen::Index o = 0; o < out_ch; ++o) nb.grad[static_cast<std::size_t>(o)] += gout.row(o).sum();
          }
          if (nw.requires_grad) {
            detail::MatrixMap gw(nw.grad.data(), out_ch, rows);
            gw.noalias() += gout * col.transpose();
          }
          if (nx.requires_grad) {
            detail::MatrixMap dc(dcol.data(), rows, plane);
            dc.noalias() = w.transpose() * gout;
            detail::col2im_add(dcol.data(), g, nx.grad.data() + n * in_plane);
          }
        }
      });
}

}  // namespace osuda
