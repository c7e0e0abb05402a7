#pragma once

#include <cassert>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "tpcnet/colorspace.hpp"
#include "tpcnet/imaging_physics.hpp"
#include "tpcnet/tensor.hpp"

// Reverse-mode differentiation over Tensor<T> values. A Tape owns the nodes
// of one forward pass; Var is a cheap handle. Nodes record a backward closure
// over parent ids, so creation order is a valid topological order and
// backward() is a single reverse sweep. Everything is sequential and
// deterministic for a fixed input/parameter order.

namespace tpc::ad {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& val() const { return tape->val(id); }
  int c() const { return val().c; }
  int h() const { return val().h; }
  int w() const { return val().w; }
};

template <typename T>
class Tape {
 public:
  int push(Tensor<T> value, bool requires_grad, std::function<void(Tape&)> back = nullptr) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  Var<T> var(int id) { return Var<T>{this, id}; }

  const Tensor<T>& val(int id) const { return nodes_[id].value; }
  Tensor<T>& grad(int id) { return nodes_[id].grad; }
  bool wants(int id) const { return nodes_[id].requires_grad; }

  // root must be scalar (1x1x1)
  void backward(int root) {
    const Tensor<T>& rv = nodes_[root].value;
    if (rv.c != 1 || rv.h != 1 || rv.w != 1)
      throw std::invalid_argument("backward: root must be a scalar");
    for (int i = 0; i <= root; ++i)
      if (nodes_[i].requires_grad) {
        auto& v = nodes_[i].value;
        nodes_[i].grad = Tensor<T>(v.c, v.h, v.w);
      }
    if (!nodes_[root].requires_grad)
      throw std::invalid_argument("backward: root does not depend on any parameter");
    nodes_[root].grad.v[0] = T(1);
    for (int i = root; i >= 0; --i)
      if (nodes_[i].requires_grad && nodes_[i].back) nodes_[i].back(*this);
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad;
    std::function<void(Tape&)> back;
  };
  std::vector<Node> nodes_;
};

template <typename T>
Var<T> constant(Tape<T>& t, Tensor<T> v) {
  return t.var(t.push(std::move(v), false));
}

template <typename T>
Var<T> param(Tape<T>& t, Tensor<T> v) {
  return t.var(t.push(std::move(v), true));
}

namespace detail {

template <typename T>
void same_tape(Var<T> a, Var<T> b, const char* what) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(what) + ": vars from different tapes");
}

template <typename T>
void same_shape(Var<T> a, Var<T> b, const char* what) {
  if (!a.val().same_shape(b.val()))
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.val().shape_str() +
                                " vs " + b.val().shape_str());
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "add");
  detail::same_shape(a, b, "add");
  Tape<T>& t = *a.tape;
  Tensor<T> y = a.val() + b.val();
  bool rg = t.wants(a.id) || t.wants(b.id);
  int id = t.push(std::move(y), rg, [a = a.id, b = b.id, self = (int)t.size()](Tape<T>& t) {
    const auto& gy = t.grad(self);
    if (t.wants(a)) {
      auto& ga = t.grad(a);
      for (size_t i = 0; i < gy.size(); ++i) ga.v[i] += gy.v[i];
    }
    if (t.wants(b)) {
      auto& gb = t.grad(b);
      for (size_t i = 0; i < gy.size(); ++i) gb.v[i] += gy.v[i];
    }
  });
  return t.var(id);
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "sub");
  detail::same_shape(a, b, "sub");
  Tape<T>& t = *a.tape;
  Tensor<T> y = a.val() - b.val();
  bool rg = t.wants(a.id) || t.wants(b.id);
  int id = t.push(std::move(y), rg, [a = a.id, b = b.id, self = (int)t.size()](Tape<T>& t) {
    const auto& gy = t.grad(self);
    if (t.wants(a)) {
      auto& ga = t.grad(a);
      for (size_t i = 0; i < gy.size(); ++i) ga.v[i] += gy.v[i];
    }
    if (t.wants(b)) {
      auto& gb = t.grad(b);
      for (size_t i = 0; i < gy.size(); ++i) gb.v[i] -= gy.v[i];
    }
  });
  return t.var(id);
}

// Elementwise product. Either side may be 1 x H x W against C x H x W; the
// single-channel side broadcasts and its gradient sums over channels.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "mul");
  const auto& av = a.val();
  const auto& bv = b.val();
  if (av.h != bv.h || av.w != bv.w || (av.c != bv.c && av.c != 1 && bv.c != 1))
    throw std::invalid_argument("mul: incompatible shapes " + av.shape_str() + " vs " + bv.shape_str());
  Tape<T>& t = *a.tape;
  int C = std::max(av.c, bv.c);
  size_t plane = static_cast<size_t>(av.h) * av.w;
  Tensor<T> y(C, av.h, av.w);
  for (int ci = 0; ci < C; ++ci) {
    const T* pa = av.v.data() + (av.c == 1 ? 0 : ci * plane);
    const T* pb = bv.v.data() + (bv.c == 1 ? 0 : ci * plane);
    T* py = y.v.data() + ci * plane;
    for (size_t i = 0; i < plane; ++i) py[i] = pa[i] * pb[i];
  }
  bool rg = t.wants(a.id) || t.wants(b.id);
  int id = t.push(std::move(y), rg,
                  [a = a.id, b = b.id, self = (int)t.size(), C, plane](Tape<T>& t) {
    const auto& gy = t.grad(self);
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    if (t.wants(a)) {
      auto& ga = t.grad(a);
      for (int ci = 0; ci < C; ++ci) {
        const T* pb = bv.v.data() + (bv.c == 1 ? 0 : ci * plane);
        const T* pg = gy.v.data() + ci * plane;
        T* pa = ga.v.data() + (av.c == 1 ? 0 : ci * plane);
        for (size_t i = 0; i < plane; ++i) pa[i] += pg[i] * pb[i];
      }
    }
    if (t.wants(b)) {
      auto& gb = t.grad(b);
      for (int ci = 0; ci < C; ++ci) {
        const T* pa = av.v.data() + (av.c == 1 ? 0 : ci * plane);
        const T* pg = gy.v.data() + ci * plane;
        T* pb = gb.v.data() + (bv.c == 1 ? 0 : ci * plane);
        for (size_t i = 0; i < plane; ++i) pb[i] += pg[i] * pa[i];
      }
    }
  });
  return t.var(id);
}

template <typename T>
Var<T> scale(Var<T> x, double s) {
  Tape<T>& t = *x.tape;
  Tensor<T> y = x.val();
  for (auto& v : y.v) v = static_cast<T>(v * s);
  int id = t.push(std::move(y), t.wants(x.id), [x = x.id, s, self = (int)t.size()](Tape<T>& t) {
    const auto& gy = t.grad(self);
    if (!t.wants(x)) return;
    auto& gx = t.grad(x);
    for (size_t i = 0; i < gy.size(); ++i) gx.v[i] += static_cast<T>(gy.v[i] * s);
  });
  return t.var(id);
}

template <typename T>
Var<T> add_const(Var<T> x, double cst) {
  Tape<T>& t = *x.tape;
  Tensor<T> y = x.val();
  for (auto& v : y.v) v = static_cast<T>(v + cst);
  int id = t.push(std::move(y), t.wants(x.id), [x = x.id, self = (int)t.size()](Tape<T>& t) {
    const auto& gy = t.grad(self);
    if (!t.wants(x)) return;
    auto& gx = t.grad(x);
    for (size_t i = 0; i < gy.size(); ++i) gx.v[i] += gy.v[i];
  });
  return t.var(id);
}

template <typename T>
Var<T> neg(Var<T> x) {
  return scale(x, -1.0);
}

// Per-channel affine helpers: g and b are C x 1 x 1.
template <typename T>
Var<T> channel_scale(Var<T> x, Var<T> g) {
  detail::same_tape(x, g, "channel_scale");
  const auto& xv = x.val();
  if (g.val().c != xv.c || g.val().h != 1 || g.val().w != 1)
    throw std::invalid_argument("channel_scale: scale must be C x 1 x 1");
  Tape<T>& t = *x.tape;
  size_t plane = static_cast<size_t>(xv.h) * xv.w;
  Tensor<T> y(xv.c, xv.h, xv.w);
  for (int ci = 0; ci < xv.c; ++ci)
    for (size_t i = 0; i < plane; ++i) y.v[ci * plane + i] = xv.v[ci * plane + i] * g.val().v[ci];
  bool rg = t.wants(x.id) || t.wants(g.id);
  int id = t.push(std::move(y), rg, [x = x.id, g = g.id, self = (int)t.size(), plane](Tape<T>& t) {
    const auto& gy = t.grad(self);
    const auto& xv = t.val(x);
    const auto& gv = t.val(g);
    if (t.wants(x)) {
      auto& gx = t.grad(x);
      for (int ci = 0; ci < xv.c; ++ci)
        for (size_t i = 0; i < plane; ++i) gx.v[ci * plane + i] += gy.v[ci * plane + i] * gv.v[ci];
    }
    if (t.wants(g)) {
      auto& gg = t.grad(g);
      for (int ci = 0; ci < xv.c; ++ci) {
        T acc = T(0);
        for (size_t i = 0; i < plane; ++i) acc += gy.v[ci * plane + i] * xv.v[ci * plane + i];
        gg.v[ci] += acc;
      }
    }
  });
  return t.var(id);
}

template <typename T>
Var<T> channel_shift(Var<T> x, Var<T> b) {
  detail::same_tape(x, b, "channel_shift");
  const auto& xv = x.val();
  if (b.val().c != xv.c || b.val().h != 1 || b.val().w != 1)
    throw std::invalid_argument("channel_shift: shift must be C x 1 x 1");
  Tape<T>& t = *x.tape;
  size_t plane = static_cast<size_t>(xv.h) * xv.w;
  Tensor<T> y(xv.c, xv.h, xv.w);
  for (int ci = 0; ci < xv.c; ++ci)
    for (size_t i = 0; i < plane; ++i) y.v[ci * plane + i] = xv.v[ci * plane + i] + b.val().v[ci];
  bool rg = t.wants(x.id) || t.wants(b.id);
  int id = t.push(std::move(y), rg, [x = x.id, b = b.id, self = (int)t.size(), plane](Tape<T>& t) {
    const auto& gy = t.grad(self);
    if (t.wants(x)) {
      auto& gx = t.grad(x);
      for (size_t i = 0; i < gy.size(); ++i) gx.v[i] += gy.v[i];
    }
    if (t.wants(b)) {
      auto& gb = t.grad(b);
      int C = gy.c;
      for (int ci = 0; ci < C; ++ci) {
        T acc = T(0);
        for (size_t i = 0; i < plane; ++i) acc += gy.v[ci * plane + i];
        gb.v[ci] += acc;
      }
    }
  });
  return t.var(id);
}

// Elementwise quotient; denominator must stay away from zero (caller's duty).
template <typename T>
Var<T> div_elem(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "div_elem");
  detail::same_shape(a, b, "div_elem");
  Tape<T>& t = *a.tape;
  Tensor<T> y = a.val();
  for (size_t i = 0; i < y.size(); ++i) y.v[i] /= b.val().v[i];
  bool rg = t.wants(a.id) || t.wants(b.id);
  int id = t.push(std::move(y), rg, [a = a.id, b = b.id, self = (int)t.size()](Tape<T>& t) {
    const auto& gy = t.grad(self);
    const auto& yv = t.val(self);
    const auto& bv = t.val(b);
    if (t.wants(a)) {
      auto& ga = t.grad(a);
      for (size_t i = 0; i < gy.size(); ++i) ga.v[i] += gy.v[i] / bv.v[i];
    }
    if (t.wants(b)) {
      auto& gb = t.grad(b);
      for (size_t i = 0; i < gy.size(); ++i) gb.v[i] -= gy.v[i] * yv.v[i] / bv.v[i];
    }
  });
  return t.var(id);
}

// x / s with s a scalar (1x1x1) variable.
template <typename T>
Var<T> div_scalar_var(Var<T> x, Var<T> s) {
  detail::same_tape(x, s, "div_scalar_var");
  if (s.val().size() != 1) throw std::invalid_argument("div_scalar_var: s must be scalar");
  Tape<T>& t = *x.tape;
  T sv = s.val().v[0];
  Tensor<T> y = x.val();
  for (auto& v : y.v) v /= sv;
  bool rg = t.wants(x.id) || t.wants(s.id);
  int id = t.push(std::move(y), rg, [x = x.id, s = s.id, self = (int)t.size()](Tape<T>& t) {
    const auto& gy = t.grad(self);
    const auto& yv = t.val(self);
    T sv = t.val(s).v[0];
    if (t.wants(x)) {
      auto& gx = t.grad(x);
      for (size_t i = 0; i < gy.size(); ++i) gx.v[i] += gy.v[i] / sv;
    }
    if (t.wants(s)) {
      T acc = T(0);
      for (size_t i = 0; i < gy.size(); ++i) acc += gy.v[i] * yv.v[i];
      t.grad(s).v[0] -= acc / sv;
    }
  });
  return t.var(id);
}

// Generic elementwise map with pointwise derivative df(x).
template <typename T, typename F, typename DF>
Var<T> map_unary(Var<T> x, F f, DF df) {
  Tape<T>& t = *x.tape;
  Tensor<T> y = x.val();
  for (auto& v : y.v) v = static_cast<T>(f(static_cast<double>(v)));
  int id = t.push(std::move(y), t.wants(x.id), [x = x.id, df, self = (int)t.size()](Tape<T>& t) {
    if (!t.wants(x)) return;
    const auto& gy = t.grad(self);
    const auto& xv = t.val(x);
    auto& gx = t.grad(x);
    for (size_t i = 0; i < gy.size(); ++i)
      gx.v[i] += gy.v[i] * static_cast<T>(df(static_cast<double>(xv.v[i])));
  });
  return t.var(id);
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return map_unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double v) {
        double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 - s);
      });
}

template <typename T>
Var<T> tanh_op(Var<T> x) {
  return map_unary(
      x, [](double v) { return std::tanh(v); },
      [](double v) {
        double th = std::tanh(v);
        return 1.0 - th * th;
      });
}

template <typename T>
Var<T> exp_op(Var<T> x) {
  return map_unary(x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

template <typename T>
Var<T> abs_op(Var<T> x) {
  return map_unary(
      x, [](double v) { return std::abs(v); },
      [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

template <typename T>
Var<T> sqrt_op(Var<T> x) {
  return map_unary(
      x, [](double v) { return std::sqrt(v); },
      [](double v) { return v > 0 ? 0.5 / std::sqrt(v) : 0.0; });
}

template <typename T>
Var<T> clamp01(Var<T> x) {
  return map_unary(
      x, [](double v) { return std::clamp(v, 0.0, 1.0); },
      [](double v) { return (v >= 0.0 && v <= 1.0) ? 1.0 : 0.0; });
}

// PReLU with one learnable slope shared across the block.
template <typename T>
Var<T> prelu(Var<T> x, Var<T> slope) {
  detail::same_tape(x, slope, "prelu");
  if (slope.val().size() != 1) throw std::invalid_argument("prelu: slope must be scalar");
  Tape<T>& t = *x.tape;
  T s = slope.val().v[0];
  Tensor<T> y = x.val();
  for (auto& v : y.v)
    if (v < T(0)) v *= s;
  bool rg = t.wants(x.id) || t.wants(slope.id);
  int id = t.push(std::move(y), rg, [x = x.id, sl = slope.id, self = (int)t.size()](Tape<T>& t) {
    const auto& gy = t.grad(self);
    const auto& xv = t.val(x);
    T s = t.val(sl).v[0];
    if (t.wants(x)) {
      auto& gx = t.grad(x);
      for (size_t i = 0; i < gy.size(); ++i) gx.v[i] += xv.v[i] < T(0) ? gy.v[i] * s : gy.v[i];
    }
    if (t.wants(sl)) {
      T acc = T(0);
      for (size_t i = 0; i < gy.size(); ++i)
        if (xv.v[i] < T(0)) acc += gy.v[i] * xv.v[i];
      t.grad(sl).v[0] += acc;
    }
  });
  return t.var(id);
}

template <typename T>
Var<T> reshape(Var<T> x, int c, int h, int w) {
  const auto& xv = x.val();
  if (static_cast<size_t>(c) * h * w != xv.size())
    throw std::invalid_argument("reshape: element count mismatch");
  Tape<T>& t = *x.tape;
  Tensor<T> y(c, h, w);
  y.v = xv.v;
  int id = t.push(std::move(y), t.wants(x.id), [x = x.id, self = (int)t.size()](Tape<T>& t) {
    if (!t.wants(x)) return;
    const auto& gy = t.grad(self);
    auto& gx = t.grad(x);
    for (size_t i = 0; i < gy.size(); ++i) gx.v[i] += gy.v[i];
  });
  return t.var(id);
}

template <typename T>
Var<T> slice_channels(Var<T> x, int c0, int len) {
  const auto& xv = x.val();
  if (c0 < 0 || len <= 0 || c0 + len > xv.c) throw std::invalid_argument("slice_channels: bad range");
  Tape<T>& t = *x.tape;
  size_t plane = static_cast<size_t>(xv.h) * xv.w;
  Tensor<T> y(len, xv.h, xv.w);
  std::copy(xv.v.begin() + c0 * plane, xv.v.begin() + (c0 + len) * plane, y.v.begin());
  int id = t.push(std::move(y), t.wants(x.id),
                  [x = x.id, c0, self = (int)t.size(), plane](Tape<T>& t) {
    if (!t.wants(x)) return;
    const auto& gy = t.grad(self);
    auto& gx = t.grad(x);
    for (size_t i = 0; i < gy.size(); ++i) gx.v[c0 * plane + i] += gy.v[i];
  });
  return t.var(id);
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: empty");
  Tape<T>& t = *xs[0].tape;
  int H = xs[0].h(), W = xs[0].w(), C = 0;
  bool rg = false;
  for (auto v : xs) {
    if (v.h() != H || v.w() != W) throw std::invalid_argument("concat_channels: spatial mismatch");
    C += v.c();
    rg = rg || t.wants(v.id);
  }
  Tensor<T> y(C, H, W);
  size_t plane = static_cast<size_t>(H) * W;
  size_t off = 0;
  std::vector<int> ids;
  std::vector<int> chans;
  for (auto v : xs) {
    std::copy(v.val().v.begin(), v.val().v.end(), y.v.begin() + off);
    off += v.val().size();
    ids.push_back(v.id);
    chans.push_back(v.c());
  }
  int id = t.push(std::move(y), rg,
                  [ids, chans, self = (int)t.size(), plane](Tape<T>& t) {
    const auto& gy = t.grad(self);
    size_t off = 0;
    for (size_t k = 0; k < ids.size(); ++k) {
      size_t n = chans[k] * plane;
      if (t.wants(ids[k])) {
        auto& g = t.grad(ids[k]);
        for (size_t i = 0; i < n; ++i) g.v[i] += gy.v[off + i];
      }
      off += n;
    }
  });
  return t.var(id);
}

namespace detail {

// Valid tap rectangle: output rows oy with iy = oy + kq - pad inside [0, in).
inline void tap_range(int kq, int pad, int in, int out, int& o0, int& o1) {
  o0 = std::max(0, pad - kq);
  o1 = std::min(out, in + pad - kq);
}

}  // namespace detail

// General small convolution, stride 1. Weight layout: (C_out, C_in/groups, K*K),
// bias (C_out,1,1). Zero 'same' padding by default; valid mode shrinks output.
// Taps iterate outermost so the position loops stay contiguous and branch-free.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> wgt, Var<T> bias, int k, int groups = 1, bool valid = false) {
  detail::same_tape(x, wgt, "conv2d");
  detail::same_tape(x, bias, "conv2d");
  const auto& xv = x.val();
  const auto& wv = wgt.val();
  int cin = xv.c, cout = wv.c;
  if (groups < 1 || cin % groups || cout % groups)
    throw std::invalid_argument("conv2d: bad group count");
  int cpg = cin / groups, opg = cout / groups;
  if (wv.h != cpg || wv.w != k * k)
    throw std::invalid_argument("conv2d: weight shape " + wv.shape_str() + " does not match cin=" +
                                std::to_string(cin) + " k=" + std::to_string(k));
  if (bias.val().c != cout || bias.val().h != 1 || bias.val().w != 1)
    throw std::invalid_argument("conv2d: bias must be C_out x 1 x 1");
  int pad = valid ? 0 : k / 2;
  int oh = valid ? xv.h - k + 1 : xv.h;
  int ow = valid ? xv.w - k + 1 : xv.w;
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: input smaller than kernel");

  Tape<T>& t = *x.tape;
  Tensor<T> y(cout, oh, ow);
  size_t oplane = static_cast<size_t>(oh) * ow;
  for (int co = 0; co < cout; ++co) {
    T b = bias.val().v[co];
    T* yp = y.v.data() + co * oplane;
    for (size_t i = 0; i < oplane; ++i) yp[i] = b;
  }
  for (int g = 0; g < groups; ++g)
    for (int oc = 0; oc < opg; ++oc) {
      int co = g * opg + oc;
      T* yc = y.v.data() + co * oplane;
      for (int ic = 0; ic < cpg; ++ic) {
        int ci = g * cpg + ic;
        const T* xc = xv.v.data() + static_cast<size_t>(ci) * xv.h * xv.w;
        const T* wrow = wv.v.data() + (static_cast<size_t>(co) * cpg + ic) * k * k;
        for (int ky = 0; ky < k; ++ky) {
          int oy0, oy1;
          detail::tap_range(ky, pad, xv.h, oh, oy0, oy1);
          for (int kx = 0; kx < k; ++kx) {
            T w = wrow[ky * k + kx];
            if (w == T(0)) continue;
            int ox0, ox1;
            detail::tap_range(kx, pad, xv.w, ow, ox0, ox1);
            for (int oy = oy0; oy < oy1; ++oy) {
              T* yrow = yc + static_cast<size_t>(oy) * ow;
              const T* xrow = xc + static_cast<size_t>(oy + ky - pad) * xv.w + (kx - pad);
              for (int ox = ox0; ox < ox1; ++ox) yrow[ox] += w * xrow[ox];
            }
          }
        }
      }
    }

  bool rg = t.wants(x.id) || t.wants(wgt.id) || t.wants(bias.id);
  int id = t.push(std::move(y), rg,
                  [x = x.id, wg = wgt.id, bi = bias.id, k, groups, pad, self = (int)t.size()](Tape<T>& t) {
    const auto& gy = t.grad(self);
    const auto& xv = t.val(x);
    const auto& wv = t.val(wg);
    int cin = xv.c, cout = wv.c;
    int cpg = cin / groups, opg = cout / groups;
    bool wx = t.wants(x), ww = t.wants(wg), wb = t.wants(bi);
    int oh = gy.h, ow = gy.w;
    size_t oplane = static_cast<size_t>(oh) * ow;
    if (wb) {
      auto& gb = t.grad(bi);
      for (int co = 0; co < cout; ++co) {
        const T* grow = gy.v.data() + co * oplane;
        T acc = T(0);
        for (size_t i = 0; i < oplane; ++i) acc += grow[i];
        gb.v[co] += acc;
      }
    }
    if (!wx && !ww) return;
    Tensor<T>* gx = wx ? &t.grad(x) : nullptr;
    Tensor<T>* gw = ww ? &t.grad(wg) : nullptr;
    for (int g = 0; g < groups; ++g)
      for (int oc = 0; oc < opg; ++oc) {
        int co = g * opg + oc;
        const T* gyc = gy.v.data() + co * oplane;
        for (int ic = 0; ic < cpg; ++ic) {
          int ci = g * cpg + ic;
          const T* xc = xv.v.data() + static_cast<size_t>(ci) * xv.h * xv.w;
          T* gxc = wx ? gx->v.data() + static_cast<size_t>(ci) * xv.h * xv.w : nullptr;
          size_t wbase = (static_cast<size_t>(co) * cpg + ic) * static_cast<size_t>(k) * k;
          for (int ky = 0; ky < k; ++ky) {
            int oy0, oy1;
            detail::tap_range(ky, pad, xv.h, oh, oy0, oy1);
            for (int kx = 0; kx < k; ++kx) {
              int ox0, ox1;
              detail::tap_range(kx, pad, xv.w, ow, ox0, ox1);
              T w = wv.v[wbase + ky * k + kx];
              T wacc = T(0);
              for (int oy = oy0; oy < oy1; ++oy) {
                const T* grow = gyc + static_cast<size_t>(oy) * ow;
                const T* xrow = xc + static_cast<size_t>(oy + ky - pad) * xv.w + (kx - pad);
                if (wx && w != T(0)) {
                  T* gxrow = gxc + static_cast<size_t>(oy + ky - pad) * xv.w + (kx - pad);
                  for (int ox = ox0; ox < ox1; ++ox) gxrow[ox] += w * grow[ox];
                }
                if (ww)
                  for (int ox = ox0; ox < ox1; ++ox) wacc += grow[ox] * xrow[ox];
              }
              if (ww) gw->v[wbase + ky * k + kx] += wacc;
            }
          }
        }
      }
  });
  return t.var(id);
}

// A (1,m,k) x B (1,k,n) -> (1,m,n); flags transpose the logical reading.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool ta = false, bool tb = false) {
  detail::same_tape(a, b, "matmul");
  const auto& av = a.val();
  const auto& bv = b.val();
  if (av.c != 1 || bv.c != 1) throw std::invalid_argument("matmul: expects 1 x m x n operands");
  int m = ta ? av.w : av.h;
  int ka = ta ? av.h : av.w;
  int kb = tb ? bv.w : bv.h;
  int n = tb ? bv.h : bv.w;
  if (ka != kb) throw std::invalid_argument("matmul: inner dims disagree");
  Tape<T>& t = *a.tape;
  Tensor<T> y(1, m, n);
  auto A = [&](int i, int j) { return ta ? av.at(0, j, i) : av.at(0, i, j); };
  auto B = [&](int i, int j) { return tb ? bv.at(0, j, i) : bv.at(0, i, j); };
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      T acc = T(0);
      for (int p = 0; p < ka; ++p) acc += A(i, p) * B(p, j);
      y.at(0, i, j) = acc;
    }
  bool rg = t.wants(a.id) || t.wants(b.id);
  int id = t.push(std::move(y), rg,
                  [a = a.id, b = b.id, ta, tb, m, n, kk = ka, self = (int)t.size()](Tape<T>& t) {
    const auto& gy = t.grad(self);
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    auto A = [&](int i, int j) { return ta ? av.at(0, j, i) : av.at(0, i, j); };
    auto B = [&](int i, int j) { return tb ? bv.at(0, j, i) : bv.at(0, i, j); };
    if (t.wants(a)) {
      auto& ga = t.grad(a);
      // dA(i,p) += sum_j gy(i,j) * B(p,j)
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < kk; ++p) {
          T acc = T(0);
          for (int j = 0; j < n; ++j) acc += gy.at(0, i, j) * B(p, j);
          if (ta)
            ga.at(0, p, i) += acc;
          else
            ga.at(0, i, p) += acc;
        }
    }
    if (t.wants(b)) {
      auto& gb = t.grad(b);
      // dB(p,j) += sum_i A(i,p) * gy(i,j)
      for (int p = 0; p < kk; ++p)
        for (int j = 0; j < n; ++j) {
          T acc = T(0);
          for (int i = 0; i < m; ++i) acc += A(i, p) * gy.at(0, i, j);
          if (tb)
            gb.at(0, j, p) += acc;
          else
            gb.at(0, p, j) += acc;
        }
    }
  });
  return t.var(id);
}

// Row-wise softmax of a (1,m,n) matrix.
template <typename T>
Var<T> softmax_rows(Var<T> x) {
  const auto& xv = x.val();
  if (xv.c != 1) throw std::invalid_argument("softmax_rows: expects 1 x m x n");
  Tape<T>& t = *x.tape;
  Tensor<T> y(1, xv.h, xv.w);
  for (int i = 0; i < xv.h; ++i) {
    const T* row = xv.v.data() + static_cast<size_t>(i) * xv.w;
    T* out = y.v.data() + static_cast<size_t>(i) * xv.w;
    T mx = row[0];
    for (int j = 1; j < xv.w; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int j = 0; j < xv.w; ++j) {
      out[j] = std::exp(row[j] - mx);
      sum += out[j];
    }
    for (int j = 0; j < xv.w; ++j) out[j] /= sum;
  }
  int id = t.push(std::move(y), t.wants(x.id), [x = x.id, self = (int)t.size()](Tape<T>& t) {
    if (!t.wants(x)) return;
    const auto& gy = t.grad(self);
    const auto& yv = t.val(self);
    auto& gx = t.grad(x);
    for (int i = 0; i < yv.h; ++i) {
      const T* yr = yv.v.data() + static_cast<size_t>(i) * yv.w;
      const T* gr = gy.v.data() + static_cast<size_t>(i) * yv.w;
      T dot = T(0);
      for (int j = 0; j < yv.w; ++j) dot += yr[j] * gr[j];
      T* gxr = gx.v.data() + static_cast<size_t>(i) * yv.w;
      for (int j = 0; j < yv.w; ++j) gxr[j] += (gr[j] - dot) * yr[j];
    }
  });
  return t.var(id);
}

// Fixed pair-downsampler kernels over non-overlapping 2x2 patches:
// anti-diagonal average (b+c)/2 and diagonal average (a+d)/2.
template <typename T>
Var<T> pair_down(Var<T> x, bool diagonal) {
  const auto& xv = x.val();
  if (xv.h % 2 || xv.w % 2) throw std::invalid_argument("pair_down: H and W must be even");
  Tape<T>& t = *x.tape;
  Tensor<T> y(xv.c, xv.h / 2, xv.w / 2);
  for (int ci = 0; ci < xv.c; ++ci)
    for (int oy = 0; oy < y.h; ++oy)
      for (int ox = 0; ox < y.w; ++ox) {
        T a = xv.at(ci, 2 * oy, 2 * ox);
        T b = xv.at(ci, 2 * oy, 2 * ox + 1);
        T c = xv.at(ci, 2 * oy + 1, 2 * ox);
        T d = xv.at(ci, 2 * oy + 1, 2 * ox + 1);
        y.at(ci, oy, ox) = diagonal ? (a + d) * T(0.5) : (b + c) * T(0.5);
      }
  int id = t.push(std::move(y), t.wants(x.id),
                  [x = x.id, diagonal, self = (int)t.size()](Tape<T>& t) {
    if (!t.wants(x)) return;
    const auto& gy = t.grad(self);
    auto& gx = t.grad(x);
    for (int ci = 0; ci < gy.c; ++ci)
      for (int oy = 0; oy < gy.h; ++oy)
        for (int ox = 0; ox < gy.w; ++ox) {
          T g = gy.at(ci, oy, ox) * T(0.5);
          if (diagonal) {
            gx.at(ci, 2 * oy, 2 * ox) += g;
            gx.at(ci, 2 * oy + 1, 2 * ox + 1) += g;
          } else {
            gx.at(ci, 2 * oy, 2 * ox + 1) += g;
            gx.at(ci, 2 * oy + 1, 2 * ox) += g;
          }
        }
  });
  return t.var(id);
}

// 4C x h x w -> C x 2h x 2w, out[c][2y+a][2x+b] = in[4c+2a+b][y][x].
template <typename T>
Var<T> pixel_shuffle2(Var<T> x) {
  const auto& xv = x.val();
  if (xv.c % 4) throw std::invalid_argument("pixel_shuffle2: channels must be divisible by 4");
  Tape<T>& t = *x.tape;
  Tensor<T> y(xv.c / 4, xv.h * 2, xv.w * 2);
  for (int co = 0; co < y.c; ++co)
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b)
        for (int iy = 0; iy < xv.h; ++iy)
          for (int ix = 0; ix < xv.w; ++ix)
            y.at(co, 2 * iy + a, 2 * ix + b) = xv.at(4 * co + 2 * a + b, iy, ix);
  int id = t.push(std::move(y), t.wants(x.id), [x = x.id, self = (int)t.size()](Tape<T>& t) {
    if (!t.wants(x)) return;
    const auto& gy = t.grad(self);
    auto& gx = t.grad(x);
    for (int co = 0; co < gy.c; ++co)
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
          for (int iy = 0; iy < gx.h; ++iy)
            for (int ix = 0; ix < gx.w; ++ix)
              gx.at(4 * co + 2 * a + b, iy, ix) += gy.at(co, 2 * iy + a, 2 * ix + b);
  });
  return t.var(id);
}

// Bilinear resize to (oh, ow), align_corners = false, edge clamped.
template <typename T>
Var<T> bilinear(Var<T> x, int oh, int ow) {
  const auto& xv = x.val();
  if (oh < 1 || ow < 1) throw std::invalid_argument("bilinear: bad target size");
  Tape<T>& t = *x.tape;
  double sy = static_cast<double>(xv.h) / oh;
  double sx = static_cast<double>(xv.w) / ow;
  Tensor<T> y(xv.c, oh, ow);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      double fy = (oy + 0.5) * sy - 0.5;
      double fx = (ox + 0.5) * sx - 0.5;
      int y0 = static_cast<int>(std::floor(fy));
      int x0 = static_cast<int>(std::floor(fx));
      double wy = fy - y0, wx = fx - x0;
      int y0c = std::clamp(y0, 0, xv.h - 1), y1c = std::clamp(y0 + 1, 0, xv.h - 1);
      int x0c = std::clamp(x0, 0, xv.w - 1), x1c = std::clamp(x0 + 1, 0, xv.w - 1);
      for (int ci = 0; ci < xv.c; ++ci) {
        double v00 = xv.at(ci, y0c, x0c), v01 = xv.at(ci, y0c, x1c);
        double v10 = xv.at(ci, y1c, x0c), v11 = xv.at(ci, y1c, x1c);
        y.at(ci, oy, ox) = static_cast<T>((1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                          wy * ((1 - wx) * v10 + wx * v11));
      }
    }
  int id = t.push(std::move(y), t.wants(x.id),
                  [x = x.id, oh, ow, self = (int)t.size()](Tape<T>& t) {
    if (!t.wants(x)) return;
    const auto& gy = t.grad(self);
    const auto& xv = t.val(x);
    auto& gx = t.grad(x);
    double sy = static_cast<double>(xv.h) / oh;
    double sx = static_cast<double>(xv.w) / ow;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double fy = (oy + 0.5) * sy - 0.5;
        double fx = (ox + 0.5) * sx - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        int x0 = static_cast<int>(std::floor(fx));
        double wy = fy - y0, wx = fx - x0;
        int y0c = std::clamp(y0, 0, xv.h - 1), y1c = std::clamp(y0 + 1, 0, xv.h - 1);
        int x0c = std::clamp(x0, 0, xv.w - 1), x1c = std::clamp(x0 + 1, 0, xv.w - 1);
        for (int ci = 0; ci < xv.c; ++ci) {
          T g = gy.at(ci, oy, ox);
          gx.at(ci, y0c, x0c) += static_cast<T>(g * (1 - wy) * (1 - wx));
          gx.at(ci, y0c, x1c) += static_cast<T>(g * (1 - wy) * wx);
          gx.at(ci, y1c, x0c) += static_cast<T>(g * wy * (1 - wx));
          gx.at(ci, y1c, x1c) += static_cast<T>(g * wy * wx);
        }
      }
  });
  return t.var(id);
}

// LayerNorm across channels at each spatial position, then per-channel affine.
template <typename T>
Var<T> layer_norm_cw(Var<T> x, Var<T> gamma, Var<T> beta, double eps = 1e-5) {
  detail::same_tape(x, gamma, "layer_norm_cw");
  detail::same_tape(x, beta, "layer_norm_cw");
  const auto& xv = x.val();
  if (gamma.val().c != xv.c || beta.val().c != xv.c)
    throw std::invalid_argument("layer_norm_cw: affine params must be C x 1 x 1");
  Tape<T>& t = *x.tape;
  int C = xv.c;
  size_t plane = static_cast<size_t>(xv.h) * xv.w;
  Tensor<T> y(C, xv.h, xv.w);
  const auto& gv = gamma.val();
  const auto& bv = beta.val();
  for (size_t i = 0; i < plane; ++i) {
    double mu = 0;
    for (int ci = 0; ci < C; ++ci) mu += xv.v[ci * plane + i];
    mu /= C;
    double var = 0;
    for (int ci = 0; ci < C; ++ci) {
      double d = xv.v[ci * plane + i] - mu;
      var += d * d;
    }
    var /= C;
    double inv = 1.0 / std::sqrt(var + eps);
    for (int ci = 0; ci < C; ++ci) {
      double xh = (xv.v[ci * plane + i] - mu) * inv;
      y.v[ci * plane + i] = static_cast<T>(xh * gv.v[ci] + bv.v[ci]);
    }
  }
  bool rg = t.wants(x.id) || t.wants(gamma.id) || t.wants(beta.id);
  int id = t.push(std::move(y), rg,
                  [x = x.id, ga = gamma.id, be = beta.id, eps, C, plane, self = (int)t.size()](Tape<T>& t) {
    const auto& gy = t.grad(self);
    const auto& xv = t.val(x);
    const auto& gv = t.val(ga);
    bool wx = t.wants(x), wg = t.wants(ga), wb = t.wants(be);
    for (size_t i = 0; i < plane; ++i) {
      double mu = 0;
      for (int ci = 0; ci < C; ++ci) mu += xv.v[ci * plane + i];
      mu /= C;
      double var = 0;
      for (int ci = 0; ci < C; ++ci) {
        double d = xv.v[ci * plane + i] - mu;
        var += d * d;
      }
      var /= C;
      double inv = 1.0 / std::sqrt(var + eps);
      double sum_dxh = 0, sum_dxh_xh = 0;
      for (int ci = 0; ci < C; ++ci) {
        double xh = (xv.v[ci * plane + i] - mu) * inv;
        double dxh = static_cast<double>(gy.v[ci * plane + i]) * gv.v[ci];
        sum_dxh += dxh;
        sum_dxh_xh += dxh * xh;
        if (wg) t.grad(ga).v[ci] += static_cast<T>(gy.v[ci * plane + i] * xh);
        if (wb) t.grad(be).v[ci] += gy.v[ci * plane + i];
      }
      if (wx) {
        auto& gx = t.grad(x);
        for (int ci = 0; ci < C; ++ci) {
          double xh = (xv.v[ci * plane + i] - mu) * inv;
          double dxh = static_cast<double>(gy.v[ci * plane + i]) * gv.v[ci];
          gx.v[ci * plane + i] +=
              static_cast<T>(inv * (dxh - sum_dxh / C - xh * sum_dxh_xh / C));
        }
      }
    }
  });
  return t.var(id);
}

template <typename T>
Var<T> mean_all(Var<T> x) {
  Tape<T>& t = *x.tape;
  const auto& xv = x.val();
  double acc = 0;
  for (T v : xv.v) acc += v;
  Tensor<T> y(1, 1, 1);
  y.v[0] = static_cast<T>(acc / xv.size());
  int id = t.push(std::move(y), t.wants(x.id),
                  [x = x.id, n = xv.size(), self = (int)t.size()](Tape<T>& t) {
    if (!t.wants(x)) return;
    T g = t.grad(self).v[0] / static_cast<T>(n);
    auto& gx = t.grad(x);
    for (auto& v : gx.v) v += g;
  });
  return t.var(id);
}

// Channel mean: C x H x W -> 1 x H x W.
template <typename T>
Var<T> channel_mean(Var<T> x) {
  Tape<T>& t = *x.tape;
  const auto& xv = x.val();
  size_t plane = static_cast<size_t>(xv.h) * xv.w;
  Tensor<T> y(1, xv.h, xv.w);
  for (size_t i = 0; i < plane; ++i) {
    double acc = 0;
    for (int ci = 0; ci < xv.c; ++ci) acc += xv.v[ci * plane + i];
    y.v[i] = static_cast<T>(acc / xv.c);
  }
  int id = t.push(std::move(y), t.wants(x.id),
                  [x = x.id, C = xv.c, plane, self = (int)t.size()](Tape<T>& t) {
    if (!t.wants(x)) return;
    const auto& gy = t.grad(self);
    auto& gx = t.grad(x);
    for (int ci = 0; ci < C; ++ci)
      for (size_t i = 0; i < plane; ++i) gx.v[ci * plane + i] += gy.v[i] / static_cast<T>(C);
  });
  return t.var(id);
}

// Illumination split on the tape. L is alpha*e up to the one-ulp nudge that makes
// L + L_bar == e bit-exact (see imaging_physics); gradients use the smooth
// reading L = alpha*e, L_bar = (1-alpha)*e.
template <typename T>
std::pair<Var<T>, Var<T>> illumination_split(Var<T> alpha, Var<T> e) {
  detail::same_tape(alpha, e, "illumination_split");
  const auto& av = alpha.val();
  const auto& ev = e.val();
  if (av.c != 1 || av.h != ev.h || av.w != ev.w)
    throw std::invalid_argument("illumination_split: alpha must be 1 x H x W matching e");
  Tape<T>& t = *alpha.tape;
  size_t plane = static_cast<size_t>(ev.h) * ev.w;
  Tensor<T> L(ev.c, ev.h, ev.w), Lbar(ev.c, ev.h, ev.w);
  for (int ci = 0; ci < ev.c; ++ci)
    for (size_t i = 0; i < plane; ++i) {
      size_t j = ci * plane + i;
      tpc::detail::exact_split(av.v[i], ev.v[j], L.v[j], Lbar.v[j]);
    }
  bool rg = t.wants(alpha.id) || t.wants(e.id);
  auto back = [al = alpha.id, ee = e.id, plane](Tape<T>& t, int self, bool complement) {
    const auto& gy = t.grad(self);
    const auto& av = t.val(al);
    const auto& ev = t.val(ee);
    for (int ci = 0; ci < gy.c; ++ci)
      for (size_t i = 0; i < plane; ++i) {
        size_t j = ci * plane + i;
        T a = complement ? T(1) - av.v[i] : av.v[i];
        if (t.wants(ee)) t.grad(ee).v[j] += gy.v[j] * a;
        if (t.wants(al)) t.grad(al).v[i] += complement ? -gy.v[j] * ev.v[j] : gy.v[j] * ev.v[j];
      }
  };
  int idL = t.push(std::move(L), rg, [back, self = (int)t.size()](Tape<T>& t) { back(t, self, false); });
  int idLb = t.push(std::move(Lbar), rg, [back, self = (int)t.size() ](Tape<T>& t) { back(t, self, true); });
  return {t.var(idL), t.var(idLb)};
}

// Separable Gaussian blur with replicate padding and a differentiable scale.
// The kernel radius is fixed; sigma enters through the tap weights, so its
// gradient flows via the chain rule through the normalized kernel.
template <typename T>
Var<T> gaussian_blur(Var<T> x, Var<T> sigma, int radius = 4) {
  detail::same_tape(x, sigma, "gaussian_blur");
  if (sigma.val().size() != 1) throw std::invalid_argument("gaussian_blur: sigma must be scalar");
  Tape<T>& t = *x.tape;
  const auto& xv = x.val();
  double sg = std::max(1e-3, static_cast<double>(sigma.val().v[0]));

  auto make_kernel = [radius](double s, std::vector<double>& w, std::vector<double>& dw) {
    int n = 2 * radius + 1;
    w.assign(n, 0.0);
    dw.assign(n, 0.0);
    double z = 0, dz = 0;
    std::vector<double> k(n), dk(n);
    for (int i = -radius; i <= radius; ++i) {
      double e = std::exp(-0.5 * i * i / (s * s));
      k[i + radius] = e;
      dk[i + radius] = e * i * i / (s * s * s);
      z += e;
      dz += dk[i + radius];
    }
    for (int i = 0; i < n; ++i) {
      w[i] = k[i] / z;
      dw[i] = (dk[i] - w[i] * dz) / z;
    }
  };

  auto blur_pass = [radius](const Tensor<T>& in, const std::vector<double>& w, bool horiz) {
    Tensor<T> out(in.c, in.h, in.w);
    for (int ci = 0; ci < in.c; ++ci)
      for (int y = 0; y < in.h; ++y)
        for (int x2 = 0; x2 < in.w; ++x2) {
          double acc = 0;
          for (int i = -radius; i <= radius; ++i) {
            int yy = horiz ? y : std::clamp(y + i, 0, in.h - 1);
            int xx = horiz ? std::clamp(x2 + i, 0, in.w - 1) : x2;
            acc += w[i + radius] * in.at(ci, yy, xx);
          }
          out.at(ci, y, x2) = static_cast<T>(acc);
        }
    return out;
  };

  std::vector<double> w, dw;
  make_kernel(sg, w, dw);
  Tensor<T> tmp = blur_pass(xv, w, true);
  Tensor<T> y = blur_pass(tmp, w, false);

  bool rg = t.wants(x.id) || t.wants(sigma.id);
  int id = t.push(std::move(y), rg,
                  [x = x.id, sgm = sigma.id, radius, make_kernel, blur_pass, self = (int)t.size()](Tape<T>& t) {
    const auto& gy = t.grad(self);
    const auto& xv = t.val(x);
    double sg = std::max(1e-3, static_cast<double>(t.val(sgm).v[0]));
    std::vector<double> w, dw;
    make_kernel(sg, w, dw);
    if (t.wants(x)) {
      // transpose passes: scatter through vertical, then horizontal
      auto& gx = t.grad(x);
      Tensor<T> gtmp(xv.c, xv.h, xv.w);
      for (int ci = 0; ci < xv.c; ++ci)
        for (int y = 0; y < xv.h; ++y)
          for (int x2 = 0; x2 < xv.w; ++x2) {
            T g = gy.at(ci, y, x2);
            if (g == T(0)) continue;
            for (int i = -radius; i <= radius; ++i)
              gtmp.at(ci, std::clamp(y + i, 0, xv.h - 1), x2) += static_cast<T>(w[i + radius] * g);
          }
      for (int ci = 0; ci < xv.c; ++ci)
        for (int y = 0; y < xv.h; ++y)
          for (int x2 = 0; x2 < xv.w; ++x2) {
            T g = gtmp.at(ci, y, x2);
            if (g == T(0)) continue;
            for (int i = -radius; i <= radius; ++i)
              gx.at(ci, y, std::clamp(x2 + i, 0, xv.w - 1)) += static_cast<T>(w[i + radius] * g);
          }
    }
    if (t.wants(sgm) && sg > 1e-3) {
      Tensor<T> hx = blur_pass(xv, w, true);
      Tensor<T> dv = blur_pass(hx, dw, false);          // V' (H x)
      Tensor<T> dhx = blur_pass(xv, dw, true);
      Tensor<T> vd = blur_pass(dhx, w, false);          // V (H' x)
      double acc = 0;
      for (size_t i = 0; i < gy.size(); ++i) acc += static_cast<double>(gy.v[i]) * (dv.v[i] + vd.v[i]);
      t.grad(sgm).v[0] += static_cast<T>(acc);
    }
  });
  return t.var(id);
}

// Fixed 3x3 per-pixel linear map on a 3-channel image (color matrices).
template <typename T>
Var<T> apply_mat3(Var<T> x, const double m[9], const double off_in[3], const double off_out[3]) {
  const auto& xv = x.val();
  if (xv.c != 3) throw std::invalid_argument("apply_mat3: expects 3 channels");
  Tape<T>& t = *x.tape;
  size_t plane = static_cast<size_t>(xv.h) * xv.w;
  Tensor<T> y(3, xv.h, xv.w);
  for (size_t i = 0; i < plane; ++i)
    color_detail::apply_mat3(m, off_in, off_out, xv.v[i], xv.v[plane + i], xv.v[2 * plane + i],
                             y.v[i], y.v[plane + i], y.v[2 * plane + i]);
  std::array<double, 9> mc;
  std::copy(m, m + 9, mc.begin());
  int id = t.push(std::move(y), t.wants(x.id),
                  [x = x.id, mc, plane, self = (int)t.size()](Tape<T>& t) {
    if (!t.wants(x)) return;
    const auto& gy = t.grad(self);
    auto& gx = t.grad(x);
    for (size_t i = 0; i < plane; ++i) {
      double g0 = gy.v[i], g1 = gy.v[plane + i], g2 = gy.v[2 * plane + i];
      gx.v[i] += static_cast<T>(mc[0] * g0 + mc[3] * g1 + mc[6] * g2);
      gx.v[plane + i] += static_cast<T>(mc[1] * g0 + mc[4] * g1 + mc[7] * g2);
      gx.v[2 * plane + i] += static_cast<T>(mc[2] * g0 + mc[5] * g1 + mc[8] * g2);
    }
  });
  return t.var(id);
}

// Differentiable color transforms matching the plain versions in
// colorspace.hpp (same constants; identical arithmetic for ycbcr).
template <typename T>
Var<T> rgb_to_ycbcr_op(Var<T> x) {
  const double off_in[3] = {0, 0, 0};
  return apply_mat3(x, color_detail::kRgbToYcbcrM, off_in, color_detail::kRgbToYcbcrOff);
}

template <typename T>
Var<T> ycbcr_to_rgb_op(Var<T> x) {
  const double off_out[3] = {0, 0, 0};
  return clamp01(apply_mat3(x, color_detail::kYcbcrToRgbM, color_detail::kYcbcrToRgbOff, off_out));
}

template <typename T>
Var<T> rgb_to_lab_op(Var<T> x) {
  using namespace color_detail;
  Var<T> lin = map_unary(x, [](double u) { return srgb_to_linear(u); },
                         [](double u) { return srgb_to_linear_d(u); });
  const double zero3[3] = {0, 0, 0};
  Var<T> xyz = apply_mat3(lin, kRgbToXyzM, zero3, zero3);
  const double wdiv[9] = {1.0 / kWhiteX, 0, 0, 0, 1.0 / kWhiteY, 0, 0, 0, 1.0 / kWhiteZ};
  Var<T> xyzn = apply_mat3(xyz, wdiv, zero3, zero3);
  Var<T> f = map_unary(xyzn, [](double u) { return lab_f(u); }, [](double u) { return lab_f_d(u); });
  const double assemble[9] = {0, 116.0 * kLabLScale, 0,
                              500.0 * kLabAbScale, -500.0 * kLabAbScale, 0,
                              0, 200.0 * kLabAbScale, -200.0 * kLabAbScale};
  const double off_out[3] = {-16.0 * kLabLScale, 0.5, 0.5};
  return apply_mat3(f, assemble, zero3, off_out);
}

template <typename T>
Var<T> lab_to_rgb_op(Var<T> x) {
  using namespace color_detail;
  const double zero3[3] = {0, 0, 0};
  // (L', a', b') -> (fx, fy, fz)
  const double disassemble[9] = {1.0 / (116.0 * kLabLScale), 1.0 / (500.0 * kLabAbScale), 0,
                                 1.0 / (116.0 * kLabLScale), 0, 0,
                                 1.0 / (116.0 * kLabLScale), 0, -1.0 / (200.0 * kLabAbScale)};
  const double off_in[3] = {16.0 * kLabLScale, -0.5, -0.5};
  Var<T> f = apply_mat3(x, disassemble, off_in, zero3);
  Var<T> xyzn = map_unary(f, [](double u) { return lab_f_inv(u); },
                          [](double u) { return lab_f_inv_d(u); });
  const double wmul[9] = {kWhiteX, 0, 0, 0, kWhiteY, 0, 0, 0, kWhiteZ};
  Var<T> xyz = apply_mat3(xyzn, wmul, zero3, zero3);
  Var<T> lin = apply_mat3(xyz, kXyzToRgbM, zero3, zero3);
  Var<T> srgb = map_unary(lin, [](double u) { return linear_to_srgb(u); },
                          [](double u) { return linear_to_srgb_d(u); });
  return clamp01(srgb);
}

}  // namespace tpc::ad
