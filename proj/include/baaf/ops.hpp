#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "baaf/tape.hpp"
#include "baaf/tensor.hpp"

namespace baaf {

enum class ElementwiseKind { add, sub, mul };
enum class Padding { same, valid };
enum class BnMode { train, eval };

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
};

inline constexpr double kLeakySlope = 0.01;

namespace detail {

// Strides of `b` laid over the index space of `a`, zero on broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& a, const Shape& b) {
  if (b.size() > a.size())
    throw ShapeError("cannot broadcast " + shape_str(b) + " to " + shape_str(a));
  Shape bp(a.size() - b.size(), 1);
  bp.insert(bp.end(), b.begin(), b.end());
  std::vector<std::size_t> st(a.size(), 0);
  std::size_t s = 1;
  for (std::size_t i = a.size(); i-- > 0;) {
    if (bp[i] == a[i]) {
      st[i] = bp[i] == 1 ? 0 : s;
    } else if (bp[i] == 1) {
      st[i] = 0;
    } else {
      throw ShapeError("shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
    }
    s *= bp[i];
  }
  return st;
}

// Calls f(ia, ib) for every flat index ia of `a` and its broadcast partner ib.
template <typename F>
void for_each_broadcast(const Shape& a, const std::vector<std::size_t>& bst, F&& f) {
  const std::size_t r = a.size();
  const std::size_t inner = a[r - 1];
  const std::size_t inner_st = bst[r - 1];
  const std::size_t outer = shape_numel(a) / inner;
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t ib = 0;
    for (std::size_t d = 0; d + 1 < r; ++d) ib += idx[d] * bst[d];
    for (std::size_t j = 0; j < inner; ++j, ++ia) f(ia, ib + j * inner_st);
    for (std::size_t d = r - 1; d-- > 0;) {
      if (++idx[d] < a[d]) break;
      idx[d] = 0;
    }
  }
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::size_t conv_out(std::size_t n, std::size_t k, std::size_t stride, Padding p) {
  if (p == Padding::same) return (n + stride - 1) / stride;
  return (n - k) / stride + 1;
}

template <typename T>
void im2col(const T* x, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* col) {
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((c * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = x + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T(0) : src[ix];
          }
        }
      }
}

template <typename T>
void col2im(const T* col, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* x) {
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((c * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          T* dst = x + (c * h + static_cast<std::size_t>(iy)) * w;
          const T* src = row + oy * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += src[ox];
          }
        }
      }
}

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r)
    throw ShapeError(std::string(op) + " expects a rank-" + std::to_string(r) + " tensor, got " +
                     shape_str(s));
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> elementwise(ElementwiseKind kind, Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  const auto& av = a.value();
  const auto& bv = b.value();
  const bool same = av.shape() == bv.shape();
  const auto bst = same ? std::vector<std::size_t>{} : detail::broadcast_strides(av.shape(), bv.shape());
  Tensor<T> out(av.shape());
  auto apply = [kind](T x, T y) {
    switch (kind) {
      case ElementwiseKind::add: return x + y;
      case ElementwiseKind::sub: return x - y;
      default: return x * y;
    }
  };
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(av[i], bv[i]);
  } else {
    detail::for_each_broadcast(av.shape(), bst, [&](std::size_t i, std::size_t j) { out[i] = apply(av[i], bv[j]); });
  }
  const OpKind op = kind == ElementwiseKind::add ? OpKind::add
                    : kind == ElementwiseKind::sub ? OpKind::sub
                                                   : OpKind::mul;
  const int ia = a.id, ib = b.id;
  return t.record(op, {ia, ib}, std::move(out), [kind, ia, ib, same, bst](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    const auto& av = tp.value(ia);
    const auto& bv = tp.value(ib);
    if (tp.requires_grad(ia)) {
      auto& ga = tp.grad(ia);
      if (kind == ElementwiseKind::mul) {
        if (same)
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        else
          detail::for_each_broadcast(av.shape(), bst, [&](std::size_t i, std::size_t j) { ga[i] += g[i] * bv[j]; });
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.grad(ib);
      const T sign = kind == ElementwiseKind::sub ? T(-1) : T(1);
      if (same) {
        if (kind == ElementwiseKind::mul)
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        else
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
      } else {
        if (kind == ElementwiseKind::mul)
          detail::for_each_broadcast(av.shape(), bst, [&](std::size_t i, std::size_t j) { gb[j] += g[i] * av[i]; });
        else
          detail::for_each_broadcast(av.shape(), bst, [&](std::size_t i, std::size_t j) { gb[j] += sign * g[i]; });
      }
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) { return elementwise(ElementwiseKind::add, a, b); }
template <typename T>
Var<T> sub(Var<T> a, Var<T> b) { return elementwise(ElementwiseKind::sub, a, b); }
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) { return elementwise(ElementwiseKind::mul, a, b); }

template <typename T>
Var<T> scale(Var<T> x, T s) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v *= s;
  const int ix = x.id;
  return x.tape->record(OpKind::scale, {ix}, std::move(out), [ix, s](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
  });
}

// ---------------------------------------------------------------- activations

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = v > T(0) ? v : T(0);
  const int ix = x.id;
  return x.tape->record(OpKind::relu, {ix}, std::move(out), [ix](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    const auto& xv = tp.value(ix);
    auto& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T(0)) gx[i] += g[i];
  });
}

template <typename T>
Var<T> leaky_relu(Var<T> x, T slope = T(kLeakySlope)) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = v >= T(0) ? v : slope * v;
  const int ix = x.id;
  return x.tape->record(OpKind::leaky_relu, {ix}, std::move(out), [ix, slope](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    const auto& xv = tp.value(ix);
    auto& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += xv[i] >= T(0) ? g[i] : slope * g[i];
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = detail::stable_sigmoid(v);
  const int ix = x.id;
  return x.tape->record(OpKind::sigmoid, {ix}, std::move(out), [ix](Tape<T>& tp, int self) {
    const auto& n = tp.node(self);
    auto& gx = tp.grad(ix);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const T s = n.value[i];
      gx[i] += n.grad[i] * s * (T(1) - s);
    }
  });
}

// ---------------------------------------------------------------- dense

/// y = x W^T (+ bias). x is [c_in] or [N x c_in]; W is [c_out x c_in].
template <typename T>
Var<T> dense(Var<T> x, Var<T> w, std::optional<Var<T>> bias = std::nullopt) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  detail::require_rank(wv.shape(), 2, "dense weight");
  if (xv.rank() != 1 && xv.rank() != 2)
    throw ShapeError("dense input must be [c_in] or [N x c_in], got " + shape_str(xv.shape()));
  const std::size_t cout = wv.dim(0), cin = wv.dim(1);
  const std::size_t n = xv.rank() == 1 ? 1 : xv.dim(0);
  const std::size_t xin = xv.rank() == 1 ? xv.dim(0) : xv.dim(1);
  if (xin != cin)
    throw ShapeError("dense dimension mismatch: input " + shape_str(xv.shape()) + " vs weight " +
                     shape_str(wv.shape()));
  if (bias && (bias->value().size() != cout))
    throw ShapeError("dense bias " + shape_str(bias->value().shape()) + " does not match c_out " +
                     std::to_string(cout));
  Tensor<T> out(xv.rank() == 1 ? Shape{cout} : Shape{n, cout});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t o = 0; o < cout; ++o) {
      T acc = bias ? bias->value()[o] : T(0);
      for (std::size_t i = 0; i < cin; ++i) acc += wv[o * cin + i] * xv[r * cin + i];
      out[r * cout + o] = acc;
    }
  const int ix = x.id, iw = w.id, ib = bias ? bias->id : -1;
  std::vector<int> parents{ix, iw};
  if (ib >= 0) parents.push_back(ib);
  return x.tape->record(OpKind::dense, parents, std::move(out), [=](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    const auto& xv = tp.value(ix);
    const auto& wv = tp.value(iw);
    if (tp.requires_grad(ix)) {
      auto& gx = tp.grad(ix);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < cout; ++o)
          for (std::size_t i = 0; i < cin; ++i) gx[r * cin + i] += g[r * cout + o] * wv[o * cin + i];
    }
    if (tp.requires_grad(iw)) {
      auto& gw = tp.grad(iw);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < cout; ++o)
          for (std::size_t i = 0; i < cin; ++i) gw[o * cin + i] += g[r * cout + o] * xv[r * cin + i];
    }
    if (ib >= 0 && tp.requires_grad(ib)) {
      auto& gb = tp.grad(ib);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < cout; ++o) gb[o] += g[r * cout + o];
    }
  });
}

// ---------------------------------------------------------------- conv2d

/// Cross-correlation over N x C_in x H x W with a C_out x C_in x k x k kernel.
/// `same` pads with zeros so the output is ceil(H / stride).
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, std::optional<Var<T>> bias, std::size_t stride = 1,
              Padding padding = Padding::same) {
  const auto& xv = x.value();
  const auto& kv = kernel.value();
  detail::require_rank(xv.shape(), 4, "conv2d input");
  detail::require_rank(kv.shape(), 4, "conv2d kernel");
  const std::size_t n = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t cout = kv.dim(0), k = kv.dim(2);
  if ((k != 1 && k != 3) || kv.dim(3) != k || (stride != 1 && stride != 2))
    throw std::invalid_argument("conv2d supports 1x1 or 3x3 kernels with stride 1 or 2, got kernel " +
                                shape_str(kv.shape()) + " stride " + std::to_string(stride));
  if (kv.dim(1) != cin)
    throw ShapeError("conv2d channel mismatch: input " + shape_str(xv.shape()) + " vs kernel " +
                     shape_str(kv.shape()));
  if (padding == Padding::valid && (h < k || w < k))
    throw ShapeError("conv2d valid padding needs spatial size >= kernel, got " + shape_str(xv.shape()));
  if (bias && bias->value().size() != cout)
    throw ShapeError("conv2d bias " + shape_str(bias->value().shape()) + " does not match c_out " +
                     std::to_string(cout));
  const std::size_t pad = padding == Padding::same ? k / 2 : 0;
  const std::size_t ho = detail::conv_out(h, k, stride, padding);
  const std::size_t wo = detail::conv_out(w, k, stride, padding);
  const std::size_t kk = cin * k * k, hw = ho * wo;
  const bool direct = k == 1 && stride == 1;

  using Mat = detail::RowMat<T>;
  Eigen::Map<const Mat> wm(kv.data(), cout, kk);
  Tensor<T> out(Shape{n, cout, ho, wo});
  std::vector<T> col(direct ? 0 : kk * hw);
  for (std::size_t b = 0; b < n; ++b) {
    const T* xb = xv.data() + b * cin * h * w;
    if (!direct) detail::im2col(xb, cin, h, w, k, stride, pad, ho, wo, col.data());
    Eigen::Map<const Mat> cm(direct ? xb : col.data(), kk, hw);
    Eigen::Map<Mat> om(out.data() + b * cout * hw, cout, hw);
    om.noalias() = wm * cm;
    if (bias)
      for (std::size_t o = 0; o < cout; ++o) om.row(o).array() += bias->value()[o];
  }

  const int ix = x.id, ik = kernel.id, ib = bias ? bias->id : -1;
  std::vector<int> parents{ix, ik};
  if (ib >= 0) parents.push_back(ib);
  return x.tape->record(OpKind::conv2d, parents, std::move(out), [=](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    const auto& xv = tp.value(ix);
    const auto& kv = tp.value(ik);
    const bool need_x = tp.requires_grad(ix), need_k = tp.requires_grad(ik);
    Eigen::Map<const Mat> wm(kv.data(), cout, kk);
    std::vector<T> col(direct ? 0 : kk * hw);
    std::vector<T> dcol(direct ? 0 : kk * hw);
    Mat dw = Mat::Zero(cout, kk);
    for (std::size_t b = 0; b < n; ++b) {
      Eigen::Map<const Mat> gm(g.data() + b * cout * hw, cout, hw);
      const T* xb = xv.data() + b * cin * h * w;
      if (need_k) {
        if (!direct) detail::im2col(xb, cin, h, w, k, stride, pad, ho, wo, col.data());
        Eigen::Map<const Mat> cm(direct ? xb : col.data(), kk, hw);
        dw.noalias() += gm * cm.transpose();
      }
      if (need_x) {
        T* gxb = tp.grad(ix).data() + b * cin * h * w;
        if (direct) {
          Eigen::Map<Mat> gx(gxb, cin, hw);
          gx.noalias() += wm.transpose() * gm;
        } else {
          Eigen::Map<Mat> dc(dcol.data(), kk, hw);
          dc.noalias() = wm.transpose() * gm;
          detail::col2im(dcol.data(), cin, h, w, k, stride, pad, ho, wo, gxb);
        }
      }
    }
    if (need_k) {
      auto& gk = tp.grad(ik);
      for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += dw.data()[i];
    }
    if (ib >= 0 && tp.requires_grad(ib)) {
      auto& gb = tp.grad(ib);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < cout; ++o) {
          const T* gr = g.data() + (b * cout + o) * hw;
          T acc = 0;
          for (std::size_t i = 0; i < hw; ++i) acc += gr[i];
          gb[o] += acc;
        }
    }
  });
}

// ---------------------------------------------------------------- pooling / resampling

/// 2x2 max-pool, stride 2. Odd trailing rows/columns form partial windows.
/// Gradient goes to the first maximal element in row-major window order.
template <typename T>
Var<T> maxpool2(Var<T> x) {
  const auto& xv = x.value();
  detail::require_rank(xv.shape(), 4, "maxpool2");
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h < 2 || w < 2) throw ShapeError("maxpool2 needs H,W >= 2, got " + shape_str(xv.shape()));
  const std::size_t ho = (h + 1) / 2, wo = (w + 1) / 2;
  Tensor<T> out(Shape{n, c, ho, wo});
  std::vector<std::size_t> arg(out.size());
  std::size_t o = 0;
  for (std::size_t p = 0; p < n * c; ++p) {
    const std::size_t base = p * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox, ++o) {
        std::size_t best = base + 2 * oy * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t y = 2 * oy + dy, xx = 2 * ox + dx;
            if (y >= h || xx >= w) continue;
            const std::size_t i = base + y * w + xx;
            if (xv[i] > xv[best]) best = i;
          }
        out[o] = xv[best];
        arg[o] = best;
      }
  }
  const int ix = x.id;
  return x.tape->record(OpKind::maxpool2, {ix}, std::move(out), [ix, arg = std::move(arg)](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
  });
}

template <typename T>
Var<T> upsample_nearest2(Var<T> x) {
  const auto& xv = x.value();
  detail::require_rank(xv.shape(), 4, "upsample_nearest2");
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor<T> out(Shape{n, c, 2 * h, 2 * w});
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y) {
      const T* src = xv.data() + (p * h + y / 2) * w;
      T* dst = out.data() + (p * 2 * h + y) * 2 * w;
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[xx] = src[xx / 2];
    }
  const int ix = x.id;
  return x.tape->record(OpKind::upsample2, {ix}, std::move(out), [=](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad(ix);
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t y = 0; y < 2 * h; ++y) {
        const T* src = g.data() + (p * 2 * h + y) * 2 * w;
        T* dst = gx.data() + (p * h + y / 2) * w;
        for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[xx / 2] += src[xx];
      }
  });
}

// ---------------------------------------------------------------- channel plumbing

/// Concatenation along axis 1. Works for any rank >= 2 with matching other axes.
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() < 2 || av.rank() != bv.rank())
    throw ShapeError("concat_channels rank mismatch: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  for (std::size_t d = 0; d < av.rank(); ++d)
    if (d != 1 && av.dim(d) != bv.dim(d))
      throw ShapeError("concat_channels spatial mismatch: " + shape_str(av.shape()) + " vs " +
                       shape_str(bv.shape()));
  const std::size_t n = av.dim(0), c1 = av.dim(1), c2 = bv.dim(1);
  const std::size_t inner = av.size() / (n * c1);
  Shape s = av.shape();
  s[1] = c1 + c2;
  Tensor<T> out(s);
  for (std::size_t b = 0; b < n; ++b) {
    std::copy_n(av.data() + b * c1 * inner, c1 * inner, out.data() + b * (c1 + c2) * inner);
    std::copy_n(bv.data() + b * c2 * inner, c2 * inner, out.data() + (b * (c1 + c2) + c1) * inner);
  }
  const int ia = a.id, ib = b.id;
  return a.tape->record(OpKind::concat, {ia, ib}, std::move(out), [=](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    if (tp.requires_grad(ia)) {
      auto& ga = tp.grad(ia);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < c1 * inner; ++i) ga[b * c1 * inner + i] += g[b * (c1 + c2) * inner + i];
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.grad(ib);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < c2 * inner; ++i)
          gb[b * c2 * inner + i] += g[(b * (c1 + c2) + c1) * inner + i];
    }
  });
}

/// Channels [begin, end) along axis 1.
template <typename T>
Var<T> slice_channels(Var<T> x, std::size_t begin, std::size_t end) {
  const auto& xv = x.value();
  if (xv.rank() < 2 || begin >= end || end > xv.dim(1))
    throw ShapeError("slice_channels [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of range for " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1), inner = xv.size() / (n * c), cs = end - begin;
  Shape s = xv.shape();
  s[1] = cs;
  Tensor<T> out(s);
  for (std::size_t b = 0; b < n; ++b)
    std::copy_n(xv.data() + (b * c + begin) * inner, cs * inner, out.data() + b * cs * inner);
  const int ix = x.id;
  return x.tape->record(OpKind::slice, {ix}, std::move(out), [=](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad(ix);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < cs * inner; ++i) gx[(b * c + begin) * inner + i] += g[b * cs * inner + i];
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape s) {
  Tensor<T> out = x.value().reshaped(std::move(s));
  const int ix = x.id;
  return x.tape->record(OpKind::reshape, {ix}, std::move(out), [ix](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// Per-channel spatial mean: N x C x H x W -> N x C x 1 x 1.
template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  const auto& xv = x.value();
  detail::require_rank(xv.shape(), 4, "global_avg_pool");
  const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor<T> out(Shape{n, c, 1, 1});
  for (std::size_t p = 0; p < n * c; ++p) {
    T acc = 0;
    const T* src = xv.data() + p * hw;
    for (std::size_t i = 0; i < hw; ++i) acc += src[i];
    out[p] = acc / static_cast<T>(hw);
  }
  const int ix = x.id;
  return x.tape->record(OpKind::gap, {ix}, std::move(out), [=](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad(ix);
    for (std::size_t p = 0; p < n * c; ++p) {
      const T share = g[p] / static_cast<T>(hw);
      T* dst = gx.data() + p * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] += share;
    }
  });
}

// ---------------------------------------------------------------- batch norm

/// Batch normalization over N,H,W per channel. Train mode normalizes with the
/// biased batch variance and updates the running statistics in place.
template <typename T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean, Tensor<T>& running_var,
                 BnMode mode, BatchNormOptions opt = {}) {
  const auto& xv = x.value();
  detail::require_rank(xv.shape(), 4, "batchnorm");
  const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  const std::size_t m = n * hw;
  if (gamma.value().size() != c || beta.value().size() != c || running_mean.size() != c ||
      running_var.size() != c)
    throw ShapeError("batchnorm parameters do not match channel count of " + shape_str(xv.shape()));
  if (mode == BnMode::train && m < 2)
    throw ShapeError("batchnorm train mode needs N*H*W >= 2 per channel, got " + shape_str(xv.shape()));

  std::vector<T> mean(c), invstd(c);
  if (mode == BnMode::train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0, ss = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* src = xv.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += src[i];
      }
      const double mu = s / static_cast<double>(m);
      for (std::size_t b = 0; b < n; ++b) {
        const T* src = xv.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = src[i] - mu;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(m);
      mean[ch] = static_cast<T>(mu);
      invstd[ch] = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
      running_mean[ch] = static_cast<T>(opt.momentum * running_mean[ch] + (1 - opt.momentum) * mu);
      running_var[ch] = static_cast<T>(opt.momentum * running_var[ch] + (1 - opt.momentum) * var);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean[ch];
      invstd[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[ch]) + opt.eps));
    }
  }

  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> out(xv.shape());
  Tensor<T> xhat(xv.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = (xv[off + i] - mean[ch]) * invstd[ch];
        xhat[off + i] = xh;
        out[off + i] = gv[ch] * xh + bv[ch];
      }
    }

  const int ix = x.id, ig = gamma.id, ibeta = beta.id;
  const bool train = mode == BnMode::train;
  return x.tape->record(
      OpKind::batchnorm, {ix, ig, ibeta}, std::move(out),
      [=, xhat = std::move(xhat), invstd = std::move(invstd)](Tape<T>& tp, int self) {
        const auto& g = tp.node(self).grad;
        const auto& gv = tp.value(ig);
        std::vector<T> sum_g(c, T(0)), sum_gx(c, T(0));
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              sum_g[ch] += g[off + i];
              sum_gx[ch] += g[off + i] * xhat[off + i];
            }
          }
        if (tp.requires_grad(ig)) {
          auto& gg = tp.grad(ig);
          for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
        }
        if (tp.requires_grad(ibeta)) {
          auto& gb = tp.grad(ibeta);
          for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
        }
        if (tp.requires_grad(ix)) {
          auto& gx = tp.grad(ix);
          const T mm = static_cast<T>(m);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t off = (b * c + ch) * hw;
              const T k = gv[ch] * invstd[ch];
              if (train) {
                for (std::size_t i = 0; i < hw; ++i)
                  gx[off + i] += k * (g[off + i] - sum_g[ch] / mm - xhat[off + i] * sum_gx[ch] / mm);
              } else {
                for (std::size_t i = 0; i < hw; ++i) gx[off + i] += k * g[off + i];
              }
            }
        }
      });
}

// ---------------------------------------------------------------- softmax pair

/// x is [N x 2C]; columns [0, C) are K and [C, 2C) are V. Output holds
/// e^K/(e^K+e^V) in the first half and e^V/(e^K+e^V) in the second.
template <typename T>
Var<T> pair_softmax(Var<T> x) {
  const auto& xv = x.value();
  detail::require_rank(xv.shape(), 2, "pair_softmax");
  if (xv.dim(1) % 2 != 0) throw ShapeError("pair_softmax needs an even width, got " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1) / 2;
  Tensor<T> out(xv.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < c; ++i) {
      const T kk = xv[b * 2 * c + i], vv = xv[b * 2 * c + c + i];
      const T mx = std::max(kk, vv);
      const T ek = std::exp(kk - mx), ev = std::exp(vv - mx);
      out[b * 2 * c + i] = ek / (ek + ev);
      out[b * 2 * c + c + i] = ev / (ek + ev);
    }
  const int ix = x.id;
  return x.tape->record(OpKind::pair_softmax, {ix}, std::move(out), [=](Tape<T>& tp, int self) {
    const auto& nd = tp.node(self);
    auto& gx = tp.grad(ix);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < c; ++i) {
        const std::size_t pk = b * 2 * c + i, pv = pk + c;
        const T phi = nd.value[pk], gam = nd.value[pv];
        // d phi/dK = phi*gam, d phi/dV = -phi*gam; gamma mirrors
        const T d = phi * gam * (nd.grad[pk] - nd.grad[pv]);
        gx[pk] += d;
        gx[pv] -= d;
      }
  });
}

// ---------------------------------------------------------------- reductions / loss

template <typename T>
Var<T> sum(Var<T> x) {
  const auto& xv = x.value();
  double acc = 0;
  for (auto v : xv.storage()) acc += v;
  const int ix = x.id;
  return x.tape->record(OpKind::sum, {ix}, Tensor<T>::scalar(static_cast<T>(acc)), [ix](Tape<T>& tp, int self) {
    const T g = tp.node(self).grad[0];
    auto& gx = tp.grad(ix);
    for (auto& v : gx.storage()) v += g;
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const auto& xv = x.value();
  double acc = 0;
  for (auto v : xv.storage()) acc += v;
  const std::size_t m = xv.size();
  const int ix = x.id;
  return x.tape->record(OpKind::mean, {ix}, Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(m))),
                        [ix, m](Tape<T>& tp, int self) {
                          const T g = tp.node(self).grad[0] / static_cast<T>(m);
                          auto& gx = tp.grad(ix);
                          for (auto& v : gx.storage()) v += g;
                        });
}

inline constexpr double kBceClamp = 1e-7;

/// -mean(y ln p + (1-y) ln(1-p)) with p clamped to [1e-7, 1-1e-7].
template <typename T>
Var<T> bce_loss(Var<T> pred, Var<T> target) {
  const auto& pv = pred.value();
  const auto& yv = target.value();
  if (pv.shape() != yv.shape())
    throw ShapeError("bce_loss shape mismatch: " + shape_str(pv.shape()) + " vs " + shape_str(yv.shape()));
  double acc = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double p = std::clamp(static_cast<double>(pv[i]), kBceClamp, 1.0 - kBceClamp);
    const double y = yv[i];
    acc += y * std::log(p) + (1 - y) * std::log(1 - p);
  }
  const std::size_t m = pv.size();
  const int ip = pred.id, iy = target.id;
  return pred.tape->record(OpKind::bce, {ip, iy}, Tensor<T>::scalar(static_cast<T>(-acc / static_cast<double>(m))),
                           [ip, iy, m](Tape<T>& tp, int self) {
                             const double g = tp.node(self).grad[0] / static_cast<double>(m);
                             const auto& pv = tp.value(ip);
                             const auto& yv = tp.value(iy);
                             if (tp.requires_grad(ip)) {
                               auto& gp = tp.grad(ip);
                               for (std::size_t i = 0; i < m; ++i) {
                                 const double p = std::clamp(static_cast<double>(pv[i]), kBceClamp, 1.0 - kBceClamp);
                                 const double y = yv[i];
                                 gp[i] += static_cast<T>(g * (-y / p + (1 - y) / (1 - p)));
                               }
                             }
                             if (tp.requires_grad(iy)) {
                               auto& gy = tp.grad(iy);
                               for (std::size_t i = 0; i < m; ++i) {
                                 const double p = std::clamp(static_cast<double>(pv[i]), kBceClamp, 1.0 - kBceClamp);
                                 gy[i] += static_cast<T>(g * (-std::log(p) + std::log(1 - p)));
                               }
                             }
                           });
}

}  // namespace baaf
