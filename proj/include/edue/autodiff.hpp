#pragma once

// Tape-based reverse-mode differentiation over rank-4 tensors.
//
// A Tape owns every value produced during one forward computation. Ops
// append their output node and, when the tape is recording, a backward
// closure. Tape::backward replays the closures in exact reverse order and
// then adds leaf gradients into the bound parameter tensors. Parameter
// gradients accumulate across backward calls; zeroing them is the caller's
// job (Adam::zero_grad or Tensor::zero_grad).

#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "edue/error.hpp"
#include "edue/tensor.hpp"

namespace edue::ad {

template <class T>
class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  [[nodiscard]] const Shape& shape() const { return tape->shape(id); }
  [[nodiscard]] std::span<const T> value() const { return tape->value(id); }
  [[nodiscard]] T item() const { return tape->value(id)[0]; }
};

template <class T>
class Tape {
 public:
  struct Op {
    std::vector<std::size_t> inputs;
    std::size_t output;
    std::function<void(Tape&)> backward;
  };

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  [[nodiscard]] bool recording() const { return record_; }

  Var<T> constant(const Tensor<T>& t) { return {this, emit(t.shape(), t.vec(), false)}; }
  Var<T> constant(Shape s, std::vector<T> v) { return {this, emit(s, std::move(v), false)}; }

  // Bind a trainable tensor. Its gradient receives the leaf gradient after
  // every backward call. Tensors without requires_grad become constants.
  Var<T> parameter(Tensor<T>& p) {
    const bool grad = record_ && p.requires_grad();
    const std::size_t id = emit(p.shape(), p.vec(), grad);
    if (grad) nodes_[id].param = &p;
    return {this, id};
  }

  // Ops call this to append their output.
  std::size_t emit(Shape s, std::vector<T> value, bool needs_grad) {
    if (value.size() != s.numel()) throw ShapeError("tape: value length does not match " + s.str());
#ifndef NDEBUG
    for (T v : value) assert(std::isfinite(v) && "non-finite value produced by forward op");
#endif
    nodes_.push_back(Node{s, std::move(value), {}, nullptr, needs_grad && record_});
    return nodes_.size() - 1;
  }

  void record(std::vector<std::size_t> inputs, std::size_t output,
              std::function<void(Tape&)> backward) {
    for (std::size_t in : inputs) assert(in < output && "tape op recorded before its inputs");
    ops_.push_back(Op{std::move(inputs), output, std::move(backward)});
  }

  // True when an op producing from these inputs must be recorded.
  [[nodiscard]] bool any_needs_grad(std::initializer_list<std::size_t> ids) const {
    if (!record_) return false;
    for (std::size_t id : ids)
      if (nodes_[id].needs_grad) return true;
    return false;
  }
  [[nodiscard]] bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  [[nodiscard]] const Shape& shape(std::size_t id) const { return nodes_[id].shape; }
  [[nodiscard]] std::span<const T> value(std::size_t id) const { return nodes_[id].value; }
  [[nodiscard]] std::span<T> grad(std::size_t id) { return nodes_[id].grad; }

  [[nodiscard]] Tensor<T> tensor(Var<T> v) const {
    return Tensor<T>(nodes_[v.id].shape, nodes_[v.id].value);
  }

  [[nodiscard]] std::size_t node_count() const { return nodes_.size(); }
  [[nodiscard]] std::size_t op_count() const { return ops_.size(); }

  // Reverse sweep from a scalar root. Intermediate gradients restart at
  // zero each call; bound parameters accumulate.
  void backward(Var<T> root) {
    if (!record_) throw Error("backward: tape was created without recording");
    if (root.tape != this) throw Error("backward: root belongs to another tape");
    if (nodes_[root.id].value.size() != 1)
      throw ShapeError("backward: root must be a scalar, got " + nodes_[root.id].shape.str());
    for (auto& node : nodes_) {
      if (node.needs_grad)
        node.grad.assign(node.value.size(), T(0));
      else
        node.grad.clear();
    }
    if (!nodes_[root.id].needs_grad) return;
    nodes_[root.id].grad[0] = T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backward(*this);
    for (auto& node : nodes_) {
      if (node.param == nullptr) continue;
      auto dst = node.param->grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += node.grad[i];
    }
  }

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    Tensor<T>* param;
    bool needs_grad;
  };

  bool record_;
  std::vector<Node> nodes_;
  std::vector<Op> ops_;
};

namespace detail {

template <class T>
Tape<T>& same_tape(Var<T> a, Var<T> b, const char* op) {
  if (a.tape != b.tape || a.tape == nullptr) throw Error(std::string(op) + ": vars on different tapes");
  return *a.tape;
}

}  // namespace detail

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b, "add");
  require_same_shape(a.shape(), b.shape(), "add");
  auto av = a.value(), bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const bool g = tape.any_needs_grad({a.id, b.id});
  const std::size_t y = tape.emit(a.shape(), std::move(out), g);
  if (g) {
    tape.record({a.id, b.id}, y, [a = a.id, b = b.id, y](Tape<T>& t) {
      auto gy = t.grad(y);
      for (std::size_t in : {a, b}) {
        if (!t.needs_grad(in)) continue;
        auto gi = t.grad(in);
        for (std::size_t i = 0; i < gy.size(); ++i) gi[i] += gy[i];
      }
    });
  }
  return {&tape, y};
}

template <class T>
Var<T> scale(Var<T> a, T factor) {
  auto& tape = *a.tape;
  auto av = a.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  const bool g = tape.any_needs_grad({a.id});
  const std::size_t y = tape.emit(a.shape(), std::move(out), g);
  if (g) {
    tape.record({a.id}, y, [a = a.id, y, factor](Tape<T>& t) {
      auto gy = t.grad(y);
      auto ga = t.grad(a);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * factor;
    });
  }
  return {&tape, y};
}

template <class T>
Var<T> relu(Var<T> a) {
  auto& tape = *a.tape;
  auto av = a.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
  const bool g = tape.any_needs_grad({a.id});
  const std::size_t y = tape.emit(a.shape(), std::move(out), g);
  if (g) {
    tape.record({a.id}, y, [a = a.id, y](Tape<T>& t) {
      auto gy = t.grad(y);
      auto ga = t.grad(a);
      auto av = t.value(a);
      // Subgradient at exactly zero is zero.
      for (std::size_t i = 0; i < gy.size(); ++i)
        if (av[i] > T(0)) ga[i] += gy[i];
    });
  }
  return {&tape, y};
}

template <class T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  auto& tape = *a.tape;
  auto av = a.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(av[i]);
  const bool g = tape.any_needs_grad({a.id});
  const std::size_t y = tape.emit(a.shape(), std::move(out), g);
  if (g) {
    tape.record({a.id}, y, [a = a.id, y](Tape<T>& t) {
      auto gy = t.grad(y);
      auto s = t.value(y);
      auto ga = t.grad(a);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * s[i] * (T(1) - s[i]);
    });
  }
  return {&tape, y};
}

template <class T>
Var<T> reshape(Var<T> a, Shape s) {
  auto& tape = *a.tape;
  if (s.numel() != a.shape().numel())
    throw ShapeError("reshape: " + a.shape().str() + " to " + s.str());
  auto av = a.value();
  const bool g = tape.any_needs_grad({a.id});
  const std::size_t y = tape.emit(s, std::vector<T>(av.begin(), av.end()), g);
  if (g) {
    tape.record({a.id}, y, [a = a.id, y](Tape<T>& t) {
      auto gy = t.grad(y);
      auto ga = t.grad(a);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    });
  }
  return {&tape, y};
}

template <class T>
Var<T> mean_all(Var<T> a) {
  auto& tape = *a.tape;
  auto av = a.value();
  T acc = T(0);
  for (T v : av) acc += v;
  const T n = static_cast<T>(av.size());
  const bool g = tape.any_needs_grad({a.id});
  const std::size_t y = tape.emit(Shape{}, {acc / n}, g);
  if (g) {
    tape.record({a.id}, y, [a = a.id, y, n](Tape<T>& t) {
      const T gy = t.grad(y)[0] / n;
      for (T& gi : t.grad(a)) gi += gy;
    });
  }
  return {&tape, y};
}

// Concatenate along the channel axis; batch and spatial extents must agree.
template <class T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b, "concat_channels");
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
    throw ShapeError("concat_channels: " + sa.str() + " vs " + sb.str());
  const Shape so{sa.n, sa.c + sb.c, sa.h, sa.w};
  const std::size_t la = sa.c * sa.plane(), lb = sb.c * sb.plane();
  auto av = a.value(), bv = b.value();
  std::vector<T> out(so.numel());
  for (std::size_t n = 0; n < sa.n; ++n) {
    std::copy_n(av.begin() + n * la, la, out.begin() + n * (la + lb));
    std::copy_n(bv.begin() + n * lb, lb, out.begin() + n * (la + lb) + la);
  }
  const bool g = tape.any_needs_grad({a.id, b.id});
  const std::size_t y = tape.emit(so, std::move(out), g);
  if (g) {
    tape.record({a.id, b.id}, y, [a = a.id, b = b.id, y, la, lb, batch = sa.n](Tape<T>& t) {
      auto gy = t.grad(y);
      if (t.needs_grad(a)) {
        auto ga = t.grad(a);
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t i = 0; i < la; ++i) ga[n * la + i] += gy[n * (la + lb) + i];
      }
      if (t.needs_grad(b)) {
        auto gb = t.grad(b);
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t i = 0; i < lb; ++i) gb[n * lb + i] += gy[n * (la + lb) + la + i];
      }
    });
  }
  return {&tape, y};
}

// Stack K single-channel maps of shape (b,1,h,w) along a new leading axis,
// giving (K,b,h,w). The batch index moves to the channel slot.
template <class T>
Var<T> stack(std::span<const Var<T>> items) {
  if (items.empty()) throw ShapeError("stack: no inputs");
  auto& tape = *items.front().tape;
  const Shape s = items.front().shape();
  if (s.c != 1) throw ShapeError("stack: inputs must be single-channel, got " + s.str());
  std::vector<T> out;
  out.reserve(s.numel() * items.size());
  std::vector<std::size_t> ids;
  bool g = false;
  for (const auto& v : items) {
    if (v.tape != &tape) throw Error("stack: vars on different tapes");
    require_same_shape(v.shape(), s, "stack");
    auto vv = v.value();
    out.insert(out.end(), vv.begin(), vv.end());
    ids.push_back(v.id);
    g = g || tape.any_needs_grad({v.id});
  }
  const Shape so{items.size(), s.n, s.h, s.w};
  const std::size_t y = tape.emit(so, std::move(out), g);
  if (g) {
    tape.record(ids, y, [ids, y, len = s.numel()](Tape<T>& t) {
      auto gy = t.grad(y);
      for (std::size_t k = 0; k < ids.size(); ++k) {
        if (!t.needs_grad(ids[k])) continue;
        auto gk = t.grad(ids[k]);
        for (std::size_t i = 0; i < len; ++i) gk[i] += gy[k * len + i];
      }
    });
  }
  return {&tape, y};
}

template <class T>
Var<T> stack(const std::vector<Var<T>>& items) {
  return stack(std::span<const Var<T>>(items));
}

// Population variance over the leading axis: (N,a,h,w) -> (1,a,h,w).
template <class T>
Var<T> variance_along_first_axis(Var<T> a) {
  auto& tape = *a.tape;
  const Shape s = a.shape();
  if (s.n < 2) throw ShapeError("variance_along_first_axis: need at least 2 entries, got " + s.str());
  const std::size_t len = s.c * s.plane();
  const T inv_n = T(1) / static_cast<T>(s.n);
  auto av = a.value();
  std::vector<T> mean(len, T(0)), out(len, T(0));
  for (std::size_t k = 0; k < s.n; ++k)
    for (std::size_t i = 0; i < len; ++i) mean[i] += av[k * len + i];
  for (T& m : mean) m *= inv_n;
  for (std::size_t k = 0; k < s.n; ++k)
    for (std::size_t i = 0; i < len; ++i) {
      const T d = av[k * len + i] - mean[i];
      out[i] += d * d;
    }
  for (T& v : out) v *= inv_n;
  const bool g = tape.any_needs_grad({a.id});
  const std::size_t y = tape.emit(Shape{1, s.c, s.h, s.w}, std::move(out), g);
  if (g) {
    tape.record({a.id}, y,
                [a = a.id, y, len, count = s.n, inv_n, mean = std::move(mean)](Tape<T>& t) {
                  auto gy = t.grad(y);
                  auto av = t.value(a);
                  auto ga = t.grad(a);
                  for (std::size_t k = 0; k < count; ++k)
                    for (std::size_t i = 0; i < len; ++i)
                      ga[k * len + i] += gy[i] * T(2) * (av[k * len + i] - mean[i]) * inv_n;
                });
  }
  return {&tape, y};
}

template <class T>
Var<T> upsample_nearest(Var<T> a, std::size_t factor) {
  if (factor == 0) throw ShapeError("upsample_nearest: factor must be positive");
  auto& tape = *a.tape;
  const Shape s = a.shape();
  if (factor == 1) return a;
  const Shape so{s.n, s.c, s.h * factor, s.w * factor};
  auto av = a.value();
  std::vector<T> out(so.numel());
  for (std::size_t p = 0; p < s.n * s.c; ++p)
    for (std::size_t y = 0; y < so.h; ++y) {
      const T* src = av.data() + p * s.plane() + (y / factor) * s.w;
      T* dst = out.data() + p * so.plane() + y * so.w;
      for (std::size_t x = 0; x < so.w; ++x) dst[x] = src[x / factor];
    }
  const bool g = tape.any_needs_grad({a.id});
  const std::size_t y = tape.emit(so, std::move(out), g);
  if (g) {
    tape.record({a.id}, y, [a = a.id, y, s, so, factor](Tape<T>& t) {
      auto gy = t.grad(y);
      auto ga = t.grad(a);
      for (std::size_t p = 0; p < s.n * s.c; ++p)
        for (std::size_t yy = 0; yy < so.h; ++yy) {
          const T* src = gy.data() + p * so.plane() + yy * so.w;
          T* dst = ga.data() + p * s.plane() + (yy / factor) * s.w;
          for (std::size_t x = 0; x < so.w; ++x) dst[x / factor] += src[x];
        }
    });
  }
  return {&tape, y};
}

// Per-sample, per-channel normalization with a learned gain and shift of
// shape (1,c,1,1). Statistics are population mean/variance over h*w.
template <class T>
Var<T> channel_norm(Var<T> x, Var<T> gain, Var<T> shift, T epsilon) {
  auto& tape = detail::same_tape(x, gain, "channel_norm");
  const Shape s = x.shape();
  const Shape ps{1, s.c, 1, 1};
  require_same_shape(gain.shape(), ps, "channel_norm gain");
  require_same_shape(shift.shape(), ps, "channel_norm shift");
  const std::size_t hw = s.plane();
  auto xv = x.value(), gv = gain.value(), sv = shift.value();
  std::vector<T> xhat(s.numel()), inv_std(s.n * s.c), out(s.numel());
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const T* src = xv.data() + p * hw;
    T mean = T(0);
    for (std::size_t i = 0; i < hw; ++i) mean += src[i];
    mean /= static_cast<T>(hw);
    T var = T(0);
    for (std::size_t i = 0; i < hw; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<T>(hw);
    const T inv = T(1) / std::sqrt(var + epsilon);
    inv_std[p] = inv;
    const std::size_t c = p % s.c;
    for (std::size_t i = 0; i < hw; ++i) {
      const T xh = (src[i] - mean) * inv;
      xhat[p * hw + i] = xh;
      out[p * hw + i] = xh * gv[c] + sv[c];
    }
  }
  const bool g = tape.any_needs_grad({x.id, gain.id, shift.id});
  const std::size_t y = tape.emit(s, std::move(out), g);
  if (g) {
    tape.record({x.id, gain.id, shift.id}, y,
                [xi = x.id, gi = gain.id, si = shift.id, y, s, hw, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)](Tape<T>& t) {
                  auto gy = t.grad(y);
                  auto gv = t.value(gi);
                  const bool need_x = t.needs_grad(xi), need_g = t.needs_grad(gi),
                             need_s = t.needs_grad(si);
                  for (std::size_t p = 0; p < s.n * s.c; ++p) {
                    const std::size_t c = p % s.c;
                    const T* dy = gy.data() + p * hw;
                    const T* xh = xhat.data() + p * hw;
                    T sum_dy = T(0), sum_dy_xh = T(0);
                    for (std::size_t i = 0; i < hw; ++i) {
                      sum_dy += dy[i];
                      sum_dy_xh += dy[i] * xh[i];
                    }
                    if (need_g) t.grad(gi)[c] += sum_dy_xh;
                    if (need_s) t.grad(si)[c] += sum_dy;
                    if (need_x) {
                      T* dx = t.grad(xi).data() + p * hw;
                      const T k = gv[c] * inv_std[p] / static_cast<T>(hw);
                      const T n = static_cast<T>(hw);
                      for (std::size_t i = 0; i < hw; ++i)
                        dx[i] += k * (n * dy[i] - sum_dy - xh[i] * sum_dy_xh);
                    }
                  }
                });
  }
  return {&tape, y};
}

namespace detail {

struct ConvGeometry {
  std::size_t cin, hin, win, k, stride, pad, hout, wout;
  [[nodiscard]] std::size_t rows() const { return cin * k * k; }
  [[nodiscard]] std::size_t cols() const { return hout * wout; }
};

// col[(ci*k + ky)*k + kx][oy*wout + ox] = x[ci][oy*s - p + ky][ox*s - p + kx]
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((ci * g.k + ky) * g.k + kx) * g.cols();
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          T* dst = row + oy * g.wout;
          if (iy < 0 || iy >= static_cast<long>(g.hin)) {
            std::fill_n(dst, g.wout, T(0));
            continue;
          }
          const T* src = x + (ci * g.hin + static_cast<std::size_t>(iy)) * g.win;
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.win)) ? T(0) : src[ix];
          }
        }
      }
}

template <class T>
void col2im(const T* col, const ConvGeometry& g, T* dx) {
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((ci * g.k + ky) * g.k + kx) * g.cols();
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.hin)) continue;
          T* dst = dx + (ci * g.hin + static_cast<std::size_t>(iy)) * g.win;
          const T* src = row + oy * g.wout;
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.win)) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

// Cross-correlation. kernel: (cout, cin, k, k); bias: (1, cout, 1, 1).
template <class T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, std::size_t stride, std::size_t padding) {
  auto& tape = detail::same_tape(input, kernel, "conv2d");
  const Shape xs = input.shape(), ks = kernel.shape();
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (ks.c != xs.c || ks.h != ks.w)
    throw ShapeError("conv2d: input " + xs.str() + " incompatible with kernel " + ks.str());
  require_same_shape(bias.shape(), Shape{1, ks.n, 1, 1}, "conv2d bias");
  if (xs.h + 2 * padding < ks.h || xs.w + 2 * padding < ks.w)
    throw ShapeError("conv2d: kernel " + ks.str() + " larger than padded input " + xs.str());
  detail::ConvGeometry geo{xs.c,
                           xs.h,
                           xs.w,
                           ks.h,
                           stride,
                           padding,
                           (xs.h + 2 * padding - ks.h) / stride + 1,
                           (xs.w + 2 * padding - ks.w) / stride + 1};
  const std::size_t cout = ks.n, rows = geo.rows(), cols = geo.cols();
  const Shape ys{xs.n, cout, geo.hout, geo.wout};
  const bool g = tape.any_needs_grad({input.id, kernel.id, bias.id});

  auto xv = input.value(), wv = kernel.value(), bv = bias.value();
  std::vector<T> out(ys.numel());
  std::vector<T> cols_all(g ? xs.n * rows * cols : rows * cols);
  for (std::size_t n = 0; n < xs.n; ++n) {
    T* col = cols_all.data() + (g ? n * rows * cols : 0);
    detail::im2col(xv.data() + n * xs.c * xs.plane(), geo, col);
    T* dst = out.data() + n * cout * cols;
    for (std::size_t co = 0; co < cout; ++co) {
      T* o = dst + co * cols;
      std::fill_n(o, cols, bv[co]);
      const T* wrow = wv.data() + co * rows;
      for (std::size_t r = 0; r < rows; ++r) {
        const T wk = wrow[r];
        const T* c = col + r * cols;
#pragma omp simd
        for (std::size_t p = 0; p < cols; ++p) o[p] += wk * c[p];
      }
    }
  }
  const std::size_t y = tape.emit(ys, std::move(out), g);
  if (g) {
    tape.record(
        {input.id, kernel.id, bias.id}, y,
        [xi = input.id, wi = kernel.id, bi = bias.id, y, geo, batch = xs.n, cout,
         cols_all = std::move(cols_all)](Tape<T>& t) {
          const std::size_t rows = geo.rows(), cols = geo.cols();
          auto gy = t.grad(y);
          auto wv = t.value(wi);
          const bool need_x = t.needs_grad(xi), need_w = t.needs_grad(wi), need_b = t.needs_grad(bi);
          std::vector<T> dcol(need_x ? rows * cols : 0);
          for (std::size_t n = 0; n < batch; ++n) {
            const T* col = cols_all.data() + n * rows * cols;
            const T* dy = gy.data() + n * cout * cols;
            if (need_b) {
              auto gb = t.grad(bi);
              for (std::size_t co = 0; co < cout; ++co) {
                T acc = T(0);
#pragma omp simd reduction(+ : acc)
                for (std::size_t p = 0; p < cols; ++p) acc += dy[co * cols + p];
                gb[co] += acc;
              }
            }
            if (need_w) {
              auto gw = t.grad(wi);
              for (std::size_t co = 0; co < cout; ++co) {
                const T* d = dy + co * cols;
                for (std::size_t r = 0; r < rows; ++r) {
                  const T* c = col + r * cols;
                  T acc = T(0);
#pragma omp simd reduction(+ : acc)
                  for (std::size_t p = 0; p < cols; ++p) acc += d[p] * c[p];
                  gw[co * rows + r] += acc;
                }
              }
            }
            if (need_x) {
              std::fill(dcol.begin(), dcol.end(), T(0));
              for (std::size_t co = 0; co < cout; ++co) {
                const T* d = dy + co * cols;
                const T* wrow = wv.data() + co * rows;
                for (std::size_t r = 0; r < rows; ++r) {
                  const T wk = wrow[r];
                  T* dc = dcol.data() + r * cols;
#pragma omp simd
                  for (std::size_t p = 0; p < cols; ++p) dc[p] += wk * d[p];
                }
              }
              detail::col2im(dcol.data(), geo, t.grad(xi).data() + n * geo.cin * geo.hin * geo.win);
            }
          }
        });
  }
  return {&tape, y};
}

// Mean binary cross-entropy of probabilities against (possibly soft) targets.
// Probabilities are clamped to [clamp, 1 - clamp]; the backward pass uses the
// clamped probability so saturated heads still receive a corrective signal.
template <class T>
Var<T> bce_loss(Var<T> probs, const Tensor<T>& target, T clamp = T(1e-7)) {
  auto& tape = *probs.tape;
  require_same_shape(probs.shape(), target.shape(), "bce_loss");
  auto pv = probs.value();
  auto tv = target.data();
  const T n = static_cast<T>(pv.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T p = std::clamp(pv[i], clamp, T(1) - clamp);
    acc -= static_cast<double>(tv[i] * std::log(p) + (T(1) - tv[i]) * std::log(T(1) - p));
  }
  const bool g = tape.any_needs_grad({probs.id});
  const std::size_t y = tape.emit(Shape{}, {static_cast<T>(acc / static_cast<double>(n))}, g);
  if (g) {
    tape.record({probs.id}, y, [pi = probs.id, y, target, clamp, n](Tape<T>& t) {
      const T gy = t.grad(y)[0] / n;
      auto pv = t.value(pi);
      auto gp = t.grad(pi);
      auto tv = target.data();
      for (std::size_t i = 0; i < pv.size(); ++i) {
        const T p = std::clamp(pv[i], clamp, T(1) - clamp);
        gp[i] += gy * (p - tv[i]) / (p * (T(1) - p));
      }
    });
  }
  return {&tape, y};
}

// sqrt(sum(w * (a - b)^2) / sum(w) + epsilon). With no weights every element
// counts once, giving the plain root-mean-square error.
template <class T>
Var<T> rmse_loss(Var<T> prediction, const Tensor<T>& target, std::span<const T> weights = {},
                 T epsilon = T(1e-12)) {
  auto& tape = *prediction.tape;
  require_same_shape(prediction.shape(), target.shape(), "rmse_loss");
  if (!weights.empty() && weights.size() != target.numel())
    throw ShapeError("rmse_loss: weight length " + std::to_string(weights.size()) +
                     " does not match " + target.shape().str());
  auto av = prediction.value();
  auto bv = target.data();
  T sum_w = T(0), sum_sq = T(0);
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T w = weights.empty() ? T(1) : weights[i];
    const T d = av[i] - bv[i];
    sum_w += w;
    sum_sq += w * d * d;
  }
  if (sum_w <= T(0)) throw ValidationError("rmse_loss: weights sum to zero");
  const T root = std::sqrt(sum_sq / sum_w + epsilon);
  const bool g = tape.any_needs_grad({prediction.id});
  const std::size_t y = tape.emit(Shape{}, {root}, g);
  if (g) {
    std::vector<T> w(weights.begin(), weights.end());
    tape.record({prediction.id}, y,
                [ai = prediction.id, y, target, w = std::move(w), sum_w, root](Tape<T>& t) {
                  const T k = t.grad(y)[0] / (sum_w * root);
                  auto av = t.value(ai);
                  auto ga = t.grad(ai);
                  auto bv = target.data();
                  for (std::size_t i = 0; i < av.size(); ++i)
                    ga[i] += k * (w.empty() ? T(1) : w[i]) * (av[i] - bv[i]);
                });
  }
  return {&tape, y};
}

}  // namespace edue::ad
