#pragma once

// Minimal reverse-mode automatic differentiation over dcedit::Tensor.
//
// A Var wraps a shared graph node. Operations build the graph only while
// gradient recording is enabled and at least one input requires a gradient;
// backward() walks the graph in reverse topological order and accumulates
// into every node that requires a gradient, including intermediate ones.

#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dcedit/tensor.hpp"

namespace dcedit::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  // Zero-initialized gradient buffer, allocated on first use.
  Tensor& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor(value.shape(), 0.0);
    return grad;
  }
};

inline thread_local bool grad_recording = true;

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_recording) { grad_recording = false; }
  ~NoGradGuard() { grad_recording = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad() { node_->grad = Tensor(); }
  const std::shared_ptr<Node>& node() const { return node_; }

  // Leaf copy of the current value, detached from the graph.
  Var detach() const { return Var(node_->value, false); }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Tensor t) { return Var(std::move(t), false); }
inline Var parameter(Tensor t) { return Var(std::move(t), true); }

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Var*> vs) {
  for (const Var* v : vs)
    if (v->defined() && v->requires_grad()) return true;
  return false;
}

// Builds the result node; the backward closure is attached only when needed.
inline Var make_result(Tensor value, std::initializer_list<const Var*> inputs,
                       std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (grad_recording && any_requires_grad(inputs)) {
    node->requires_grad = true;
    for (const Var* v : inputs)
      if (v->defined()) node->inputs.push_back(v->node());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

inline bool wants(const std::shared_ptr<Node>& n) { return n && n->requires_grad; }

struct Broadcast4 {
  std::array<int, 4> out{};
  std::array<std::size_t, 4> sa{}, sb{};
  Shape out_shape;
};

inline std::array<int, 4> pad4(const Shape& s) {
  std::array<int, 4> d{1, 1, 1, 1};
  const int off = 4 - static_cast<int>(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) d[static_cast<std::size_t>(off) + i] = s[i];
  return d;
}

inline std::array<std::size_t, 4> strides_of(const std::array<int, 4>& d) {
  std::array<std::size_t, 4> s{};
  std::size_t acc = 1;
  for (int i = 3; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = d[static_cast<std::size_t>(i)] == 1 ? 0 : acc;
    acc *= static_cast<std::size_t>(d[static_cast<std::size_t>(i)]);
  }
  return s;
}

inline Broadcast4 broadcast(const Shape& a, const Shape& b) {
  require(a.size() <= 4 && b.size() <= 4, ErrorCode::invalid_argument, "rank > 4 not supported");
  const auto da = pad4(a), db = pad4(b);
  Broadcast4 bc;
  for (std::size_t i = 0; i < 4; ++i) {
    require(da[i] == db[i] || da[i] == 1 || db[i] == 1, ErrorCode::shape_mismatch,
            "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    bc.out[i] = std::max(da[i], db[i]);
  }
  bc.sa = strides_of(da);
  bc.sb = strides_of(db);
  const std::size_t rank = std::max(a.size(), b.size());
  for (std::size_t i = 4 - rank; i < 4; ++i) bc.out_shape.push_back(bc.out[i]);
  return bc;
}

template <typename F>
void for_each_broadcast(const Broadcast4& bc, F&& f) {
  std::size_t o = 0;
  for (int i0 = 0; i0 < bc.out[0]; ++i0)
    for (int i1 = 0; i1 < bc.out[1]; ++i1)
      for (int i2 = 0; i2 < bc.out[2]; ++i2) {
        std::size_t ia = i0 * bc.sa[0] + i1 * bc.sa[1] + i2 * bc.sa[2];
        std::size_t ib = i0 * bc.sb[0] + i1 * bc.sb[1] + i2 * bc.sb[2];
        for (int i3 = 0; i3 < bc.out[3]; ++i3, ++o, ia += bc.sa[3], ib += bc.sb[3]) f(o, ia, ib);
      }
}

// Elementwise binary op with broadcasting. da/db receive (a, b) and return the
// partial derivative of f with respect to that argument.
template <typename F, typename DA, typename DB>
Var binary(const Var& a, const Var& b, F f, DA da, DB db) {
  const Broadcast4 bc = broadcast(a.shape(), b.shape());
  Tensor out(bc.out_shape);
  const double* pa = a.value().data();
  const double* pb = b.value().data();
  double* po = out.data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = f(pa[i], pb[i]);
  } else {
    for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { po[o] = f(pa[ia], pb[ib]); });
  }
  auto an = a.node();
  auto bn = b.node();
  return make_result(std::move(out), {&a, &b}, [an, bn, bc, da, db](Node& self) {
    const double* g = self.grad.data();
    const double* va = an->value.data();
    const double* vb = bn->value.data();
    double* ga = wants(an) ? an->grad_buffer().data() : nullptr;
    double* gb = wants(bn) ? bn->grad_buffer().data() : nullptr;
    for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) ga[ia] += g[o] * da(va[ia], vb[ib]);
      if (gb) gb[ib] += g[o] * db(va[ia], vb[ib]);
    });
  });
}

// Elementwise unary op; df receives (x, y) with y = f(x).
template <typename F, typename DF>
Var unary(const Var& x, F f, DF df) {
  Tensor out(x.shape());
  const double* px = x.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(px[i]);
  auto xn = x.node();
  return make_result(std::move(out), {&x}, [xn, df](Node& self) {
    double* gx = xn->grad_buffer().data();
    const double* vx = xn->value.data();
    const double* vy = self.value.data();
    const double* g = self.grad.data();
    for (std::size_t i = 0; i < self.value.size(); ++i) gx[i] += g[i] * df(vx[i], vy[i]);
  });
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Backward pass

inline void backward(const Var& root) {
  require(root.value().size() == 1, ErrorCode::invalid_argument, "backward() needs a scalar root");
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var operator+(const Var& a, const Var& b) {
  return detail::binary(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}
inline Var operator-(const Var& a, const Var& b) {
  return detail::binary(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}
inline Var operator*(const Var& a, const Var& b) {
  return detail::binary(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}
inline Var operator/(const Var& a, const Var& b) {
  return detail::binary(
      a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Var scale(const Var& x, double s) {
  return detail::unary(x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}
inline Var add_scalar(const Var& x, double s) {
  return detail::unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}
inline Var operator-(const Var& x) { return scale(x, -1.0); }
inline Var operator*(double s, const Var& x) { return scale(x, s); }
inline Var operator+(const Var& x, double s) { return add_scalar(x, s); }
inline Var operator-(double s, const Var& x) { return add_scalar(scale(x, -1.0), s); }

inline Var relu(const Var& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}
inline Var leaky_relu(const Var& x, double slope = 0.2) {
  return detail::unary(
      x, [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}
inline Var tanh(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}
inline double sigmoid_value(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}
inline Var sigmoid(const Var& x) {
  return detail::unary(x, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}
inline double softplus_value(double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); }
inline Var softplus(const Var& x) {
  return detail::unary(x, softplus_value, [](double v, double) { return sigmoid_value(v); });
}
inline Var square(const Var& x) {
  return detail::unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}
inline Var abs(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}
inline Var clamp(const Var& x, double lo, double hi) {
  return detail::unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions and reshapes

inline Var sum(const Var& x) {
  auto xn = x.node();
  return detail::make_result(Tensor::scalar(x.value().sum()), {&x}, [xn](Node& self) {
    const double g = self.grad[0];
    for (double& v : xn->grad_buffer().values()) v += g;
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

// Euclidean norm of each leading-axis slice: [N, ...] -> [N].
inline Var sample_norm2(const Var& x) {
  const int n = x.dim(0);
  const std::size_t per = x.value().size() / static_cast<std::size_t>(n);
  Tensor out({n});
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    const double* p = x.value().data() + i * per;
    for (std::size_t j = 0; j < per; ++j) acc += p[j] * p[j];
    out[static_cast<std::size_t>(i)] = std::sqrt(acc);
  }
  auto xn = x.node();
  return detail::make_result(std::move(out), {&x}, [xn, n, per](Node& self) {
    double* gx = xn->grad_buffer().data();
    const double* vx = xn->value.data();
    for (int i = 0; i < n; ++i) {
      const double norm = self.value[static_cast<std::size_t>(i)];
      if (norm <= 0.0) continue;
      const double g = self.grad[static_cast<std::size_t>(i)] / norm;
      for (std::size_t j = 0; j < per; ++j) gx[i * per + j] += g * vx[i * per + j];
    }
  });
}

inline Var reshape(const Var& x, Shape shape) {
  auto xn = x.node();
  return detail::make_result(x.value().reshaped(std::move(shape)), {&x}, [xn](Node& self) {
    double* gx = xn->grad_buffer().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

// [N, C, H, W] -> [N, C]
inline Var spatial_mean(const Var& x) {
  require(x.value().rank() == 4, ErrorCode::shape_mismatch, "spatial_mean expects [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor out({n, c});
  const double* px = x.value().data();
  for (std::size_t i = 0; i < static_cast<std::size_t>(n) * c; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < hw; ++j) acc += px[i * hw + j];
    out[i] = acc / static_cast<double>(hw);
  }
  auto xn = x.node();
  return detail::make_result(std::move(out), {&x}, [xn, hw](Node& self) {
    double* gx = xn->grad_buffer().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double g = self.grad[i] / static_cast<double>(hw);
      for (std::size_t j = 0; j < hw; ++j) gx[i * hw + j] += g;
    }
  });
}

// [N, L, D] -> [N, D]
inline Var mean_layers(const Var& x) {
  require(x.value().rank() == 3, ErrorCode::shape_mismatch, "mean_layers expects [N,L,D]");
  const int n = x.dim(0), l = x.dim(1), d = x.dim(2);
  Tensor out({n, d});
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < l; ++k)
      for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(i * d + j)] += x.value()[static_cast<std::size_t>((i * l + k) * d + j)] / l;
  auto xn = x.node();
  return detail::make_result(std::move(out), {&x}, [xn, n, l, d](Node& self) {
    double* gx = xn->grad_buffer().data();
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < l; ++k)
        for (int j = 0; j < d; ++j) gx[(i * l + k) * d + j] += self.grad[static_cast<std::size_t>(i * d + j)] / l;
  });
}

// [N, D] -> [N, L, D] by repetition.
inline Var tile_layers(const Var& x, int layers) {
  require(x.value().rank() == 2, ErrorCode::shape_mismatch, "tile_layers expects [N,D]");
  const int n = x.dim(0), d = x.dim(1);
  Tensor out({n, layers, d});
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < layers; ++k)
      for (int j = 0; j < d; ++j) out[static_cast<std::size_t>((i * layers + k) * d + j)] = x.value()[static_cast<std::size_t>(i * d + j)];
  auto xn = x.node();
  return detail::make_result(std::move(out), {&x}, [xn, n, layers, d](Node& self) {
    double* gx = xn->grad_buffer().data();
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < layers; ++k)
        for (int j = 0; j < d; ++j) gx[i * d + j] += self.grad[static_cast<std::size_t>((i * layers + k) * d + j)];
  });
}

// Column j of [N, P] as [N, 1, 1, 1], for broadcasting against image tensors.
inline Var column(const Var& x, int j) {
  require(x.value().rank() == 2 && j >= 0 && j < x.dim(1), ErrorCode::invalid_argument, "column index out of range");
  const int n = x.dim(0), p = x.dim(1);
  Tensor out({n, 1, 1, 1});
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = x.value()[static_cast<std::size_t>(i * p + j)];
  auto xn = x.node();
  return detail::make_result(std::move(out), {&x}, [xn, n, p, j](Node& self) {
    double* gx = xn->grad_buffer().data();
    for (int i = 0; i < n; ++i) gx[i * p + j] += self.grad[static_cast<std::size_t>(i)];
  });
}

// Single element (flat index) as a scalar.
inline Var element(const Var& x, std::size_t index) {
  require(index < x.value().size(), ErrorCode::invalid_argument, "element index out of range");
  auto xn = x.node();
  return detail::make_result(Tensor::scalar(x.value()[index]), {&x}, [xn, index](Node& self) {
    xn->grad_buffer()[index] += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Layers

// x [N, F], weight [O, F], bias [O] (optional) -> [N, O]
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
  require(x.value().rank() == 2 && weight.value().rank() == 2 && x.dim(1) == weight.dim(1),
          ErrorCode::shape_mismatch,
          "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  const int n = x.dim(0), f = x.dim(1), o = weight.dim(0);
  Tensor out({n, o});
  detail::CMapMat X(x.value().data(), n, f);
  detail::CMapMat W(weight.value().data(), o, f);
  detail::MapMat Y(out.data(), n, o);
  Y.noalias() = X * W.transpose();
  if (bias.defined())
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < o; ++j) Y(i, j) += bias.value()[static_cast<std::size_t>(j)];
  auto xn = x.node(), wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result(std::move(out), {&x, &weight, &bias}, [xn, wn, bn, n, f, o](Node& self) {
    detail::CMapMat G(self.grad.data(), n, o);
    if (detail::wants(xn)) {
      detail::MapMat GX(xn->grad_buffer().data(), n, f);
      GX.noalias() += G * detail::CMapMat(wn->value.data(), o, f);
    }
    if (detail::wants(wn)) {
      detail::MapMat GW(wn->grad_buffer().data(), o, f);
      GW.noalias() += G.transpose() * detail::CMapMat(xn->value.data(), n, f);
    }
    if (detail::wants(bn)) {
      double* gb = bn->grad_buffer().data();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < o; ++j) gb[j] += G(i, j);
    }
  });
}

// x [N, C, H, W], weight [O, C, k, k], bias [O] (optional).
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  require(x.value().rank() == 4 && weight.value().rank() == 4 && x.dim(1) == weight.dim(1),
          ErrorCode::shape_mismatch,
          "conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int o = weight.dim(0), k = weight.dim(2);
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  require(ho > 0 && wo > 0, ErrorCode::shape_mismatch, "conv2d: output would be empty");
  const int ckk = c * k * k;
  const int hw = ho * wo;

  auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * ckk * hw, 0.0);
  for (int b = 0; b < n; ++b) {
    double* col = cols->data() + static_cast<std::size_t>(b) * ckk * hw;
    const double* img = x.value().data() + static_cast<std::size_t>(b) * c * h * w;
    for (int ci = 0; ci < c; ++ci)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          double* row = col + static_cast<std::size_t>((ci * k + ky) * k + kx) * hw;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < w) row[oy * wo + ox] = img[(ci * h + iy) * w + ix];
            }
          }
        }
  }

  Tensor out({n, o, ho, wo});
  detail::CMapMat W(weight.value().data(), o, ckk);
  for (int b = 0; b < n; ++b) {
    detail::MapMat Y(out.data() + static_cast<std::size_t>(b) * o * hw, o, hw);
    Y.noalias() = W * detail::CMapMat(cols->data() + static_cast<std::size_t>(b) * ckk * hw, ckk, hw);
    if (bias.defined())
      for (int oc = 0; oc < o; ++oc) Y.row(oc).array() += bias.value()[static_cast<std::size_t>(oc)];
  }

  auto xn = x.node(), wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result(
      std::move(out), {&x, &weight, &bias},
      [xn, wn, bn, cols, n, c, h, w, o, k, ho, wo, ckk, hw, stride, pad](Node& self) {
        detail::CMapMat W(wn->value.data(), o, ckk);
        std::vector<double> dcol(detail::wants(xn) ? static_cast<std::size_t>(ckk) * hw : 0);
        for (int b = 0; b < n; ++b) {
          detail::CMapMat G(self.grad.data() + static_cast<std::size_t>(b) * o * hw, o, hw);
          detail::CMapMat C(cols->data() + static_cast<std::size_t>(b) * ckk * hw, ckk, hw);
          if (detail::wants(wn)) {
            detail::MapMat GW(wn->grad_buffer().data(), o, ckk);
            GW.noalias() += G * C.transpose();
          }
          if (detail::wants(bn)) {
            double* gb = bn->grad_buffer().data();
            for (int oc = 0; oc < o; ++oc) gb[oc] += G.row(oc).sum();
          }
          if (detail::wants(xn)) {
            detail::MapMat DC(dcol.data(), ckk, hw);
            DC.noalias() = W.transpose() * G;
            double* gimg = xn->grad_buffer().data() + static_cast<std::size_t>(b) * c * h * w;
            for (int ci = 0; ci < c; ++ci)
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  const double* row = dcol.data() + static_cast<std::size_t>((ci * k + ky) * k + kx) * hw;
                  for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                      const int ix = ox * stride - pad + kx;
                      if (ix >= 0 && ix < w) gimg[(ci * h + iy) * w + ix] += row[oy * wo + ox];
                    }
                  }
                }
          }
        }
      });
}

// Nearest-neighbour upsampling by an integer factor: [N,C,H,W] -> [N,C,fH,fW].
inline Var upsample_nearest(const Var& x, int factor) {
  require(x.value().rank() == 4 && factor >= 1, ErrorCode::invalid_argument, "upsample_nearest expects [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h * factor, wo = w * factor;
  Tensor out({n, c, ho, wo});
  for (int p = 0; p < n * c; ++p)
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx)
        out[(static_cast<std::size_t>(p) * ho + y) * wo + xx] =
            x.value()[(static_cast<std::size_t>(p) * h + y / factor) * w + xx / factor];
  auto xn = x.node();
  return detail::make_result(std::move(out), {&x}, [xn, n, c, h, w, ho, wo, factor](Node& self) {
    double* gx = xn->grad_buffer().data();
    for (int p = 0; p < n * c; ++p)
      for (int y = 0; y < ho; ++y)
        for (int xx = 0; xx < wo; ++xx)
          gx[(static_cast<std::size_t>(p) * h + y / factor) * w + xx / factor] +=
              self.grad[(static_cast<std::size_t>(p) * ho + y) * wo + xx];
  });
}

// Mean softmax cross-entropy of logits [N, K] against class indices.
inline Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
  require(logits.value().rank() == 2 && static_cast<int>(labels.size()) == logits.dim(0),
          ErrorCode::shape_mismatch, "cross_entropy: labels do not match logits batch");
  const int n = logits.dim(0), k = logits.dim(1);
  auto probs = std::make_shared<Tensor>(Shape{n, k});
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    require(labels[static_cast<std::size_t>(i)] >= 0 && labels[static_cast<std::size_t>(i)] < k,
            ErrorCode::invalid_argument, "cross_entropy: label out of range");
    const double* s = logits.value().data() + static_cast<std::size_t>(i) * k;
    const double m = *std::max_element(s, s + k);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(s[j] - m);
    for (int j = 0; j < k; ++j) (*probs)[static_cast<std::size_t>(i * k + j)] = std::exp(s[j] - m) / z;
    total += (m + std::log(z)) - s[labels[static_cast<std::size_t>(i)]];
  }
  auto ln = logits.node();
  return detail::make_result(Tensor::scalar(total / n), {&logits}, [ln, probs, labels, n, k](Node& self) {
    double* g = ln->grad_buffer().data();
    const double scale = self.grad[0] / n;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) {
        const double y = labels[static_cast<std::size_t>(i)] == j ? 1.0 : 0.0;
        g[i * k + j] += scale * ((*probs)[static_cast<std::size_t>(i * k + j)] - y);
      }
  });
}

}  // namespace dcedit::ag
