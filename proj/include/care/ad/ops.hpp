#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "care/ad/graph.hpp"
#include "care/ad/kernels.hpp"
#include "care/ad/tensor.hpp"
#include "care/error.hpp"

namespace care::ad {

namespace detail {

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a,
                                     const Shape& b) {
  throw UsageError(op + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a,
                                     const std::string& why) {
  throw UsageError(op + ": shape " + shape_str(a) + " " + why);
}

inline void require_rank(const std::string& op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    shape_error(op, s, "has rank " + std::to_string(s.size()) + ", expected " +
                           std::to_string(rank));
  }
}

template <typename T, typename F, typename DF>
Var<T> unary(Var<T> a, F f, DF df) {
  const BasicTensor<T>& x = a.value();
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.graph->record(std::move(y), {a},
                         [a, df](Graph<T>& g, const BasicTensor<T>& gy) {
                           const BasicTensor<T>& x = g.value(a.id);
                           BasicTensor<T> gx(x.shape());
                           for (std::size_t i = 0; i < x.size(); ++i)
                             gx[i] = gy[i] * df(x[i]);
                           g.accumulate(a, std::move(gx));
                         });
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    detail::shape_error("matmul", sa, sb);
  }
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  BasicTensor<T> c({m, n});
  kernels::gemm_nn(a.value().data(), b.value().data(), c.data(), m, k, n, false);
  return a.graph->record(
      std::move(c), {a, b}, [a, b, m, k, n](Graph<T>& g, const BasicTensor<T>& gc) {
        if (a.requires_grad()) {
          BasicTensor<T> ga({m, k});
          kernels::gemm_nt(gc.data(), g.value(b.id).data(), ga.data(), m, n, k, false);
          g.accumulate(a, std::move(ga));
        }
        if (b.requires_grad()) {
          BasicTensor<T> gb({k, n});
          kernels::gemm_tn(g.value(a.id).data(), gc.data(), gb.data(), k, m, n, false);
          g.accumulate(b, std::move(gb));
        }
      });
}

// Elementwise add. `b` may also be a bias whose shape equals a's shape
// without the leading axis; it is then added to every leading slice.
template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool same = sa == sb;
  const bool bias = !same && sa.size() >= 2 && Shape(sa.begin() + 1, sa.end()) == sb;
  if (!same && !bias) detail::shape_error("add", sa, sb);
  BasicTensor<T> y = a.value();
  const BasicTensor<T>& bv = b.value();
  const std::size_t inner = bv.size();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i % inner];
  return a.graph->record(std::move(y), {a, b},
                         [a, b, inner, bias](Graph<T>& g, const BasicTensor<T>& gy) {
                           if (a.requires_grad()) g.accumulate(a, gy);
                           if (!b.requires_grad()) return;
                           if (!bias) {
                             g.accumulate(b, gy);
                             return;
                           }
                           std::vector<double> acc(inner, 0.0);
                           for (std::size_t i = 0; i < gy.size(); ++i) acc[i % inner] += gy[i];
                           BasicTensor<T> gb(g.value(b.id).shape());
                           for (std::size_t i = 0; i < inner; ++i) gb[i] = static_cast<T>(acc[i]);
                           g.accumulate(b, std::move(gb));
                         });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) detail::shape_error("sub", a.shape(), b.shape());
  BasicTensor<T> y = a.value();
  const BasicTensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return a.graph->record(std::move(y), {a, b}, [a, b](Graph<T>& g, const BasicTensor<T>& gy) {
    if (a.requires_grad()) g.accumulate(a, gy);
    if (b.requires_grad()) {
      BasicTensor<T> gb = gy;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = -gb[i];
      g.accumulate(b, std::move(gb));
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) detail::shape_error("mul", a.shape(), b.shape());
  BasicTensor<T> y = a.value();
  const BasicTensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return a.graph->record(std::move(y), {a, b}, [a, b](Graph<T>& g, const BasicTensor<T>& gy) {
    if (a.requires_grad()) {
      const BasicTensor<T>& bv = g.value(b.id);
      BasicTensor<T> ga(gy.shape());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = gy[i] * bv[i];
      g.accumulate(a, std::move(ga));
    }
    if (b.requires_grad()) {
      const BasicTensor<T>& av = g.value(a.id);
      BasicTensor<T> gb(gy.shape());
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = gy[i] * av[i];
      g.accumulate(b, std::move(gb));
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, double s) {
  BasicTensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<T>(y[i] * s);
  return a.graph->record(std::move(y), {a}, [a, s](Graph<T>& g, const BasicTensor<T>& gy) {
    BasicTensor<T> ga = gy;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = static_cast<T>(ga[i] * s);
    g.accumulate(a, std::move(ga));
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  BasicTensor<T> y = a.value().reshaped(std::move(shape));
  return a.graph->record(std::move(y), {a}, [a](Graph<T>& g, const BasicTensor<T>& gy) {
    g.accumulate(a, gy.reshaped(g.value(a.id).shape()));
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) detail::shape_error("concat", s0, "has no axis " + std::to_string(axis));
  Shape out = s0;
  out[axis] = 0;
  for (const Var<T>& p : parts) {
    const Shape& sp = p.shape();
    if (sp.size() != s0.size()) detail::shape_error("concat", s0, sp);
    for (std::size_t d = 0; d < sp.size(); ++d) {
      if (d != axis && sp[d] != s0[d]) detail::shape_error("concat", s0, sp);
    }
    out[axis] += sp[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  BasicTensor<T> y(out);
  const std::size_t row = out[axis] * inner;
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const Var<T>& p : parts) {
    offsets.push_back(offset);
    const std::size_t w = p.shape()[axis] * inner;
    const T* src = p.value().data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(src + o * w, src + (o + 1) * w, y.data() + o * row + offset);
    }
    offset += w;
  }
  return parts[0].graph->record(
      std::move(y), parts,
      [parts, offsets, outer, inner, row, axis](Graph<T>& g, const BasicTensor<T>& gy) {
        for (std::size_t i = 0; i < parts.size(); ++i) {
          if (!parts[i].requires_grad()) continue;
          const Shape& sp = g.value(parts[i].id).shape();
          const std::size_t w = sp[axis] * inner;
          BasicTensor<T> gp(sp);
          for (std::size_t o = 0; o < outer; ++o) {
            const T* src = gy.data() + o * row + offsets[i];
            std::copy(src, src + w, gp.data() + o * w);
          }
          g.accumulate(parts[i], std::move(gp));
        }
      });
}

// Half-open range [begin, end) along one axis.
template <typename T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& sa = a.shape();
  if (axis >= sa.size() || begin >= end || end > sa[axis]) {
    detail::shape_error("slice", sa,
                        "cannot take [" + std::to_string(begin) + "," +
                            std::to_string(end) + ") on axis " + std::to_string(axis));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= sa[d];
  for (std::size_t d = axis + 1; d < sa.size(); ++d) inner *= sa[d];
  Shape out = sa;
  out[axis] = end - begin;
  const std::size_t src_row = sa[axis] * inner;
  const std::size_t w = (end - begin) * inner;
  BasicTensor<T> y(out);
  const T* src = a.value().data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy(src + o * src_row + begin * inner, src + o * src_row + begin * inner + w,
              y.data() + o * w);
  }
  return a.graph->record(
      std::move(y), {a}, [a, outer, inner, src_row, w, begin](Graph<T>& g, const BasicTensor<T>& gy) {
        BasicTensor<T> ga(g.value(a.id).shape());
        for (std::size_t o = 0; o < outer; ++o) {
          std::copy(gy.data() + o * w, gy.data() + (o + 1) * w,
                    ga.data() + o * src_row + begin * inner);
        }
        g.accumulate(a, std::move(ga));
      });
}

template <typename T>
Var<T> sum(Var<T> a) {
  double acc = 0.0;
  for (T v : a.value().values()) acc += static_cast<double>(v);
  return a.graph->record(BasicTensor<T>::scalar(static_cast<T>(acc)), {a},
                         [a](Graph<T>& g, const BasicTensor<T>& gy) {
                           g.accumulate(a, BasicTensor<T>(g.value(a.id).shape(), gy[0]));
                         });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const double n = static_cast<double>(a.value().size());
  double acc = 0.0;
  for (T v : a.value().values()) acc += static_cast<double>(v);
  return a.graph->record(BasicTensor<T>::scalar(static_cast<T>(acc / n)), {a},
                         [a, n](Graph<T>& g, const BasicTensor<T>& gy) {
                           g.accumulate(a, BasicTensor<T>(g.value(a.id).shape(),
                                                          static_cast<T>(gy[0] / n)));
                         });
}

template <typename T>
Var<T> relu(Var<T> a) {
  if (a.graph->tracing_branches()) {
    for (T v : a.value().values()) a.graph->note_branch(v > T{0});
  }
  // NaN passes through so non-finite activations are not silently zeroed.
  return detail::unary(a, [](T x) { return x <= T{0} ? T{0} : x; },
                       [](T x) { return x > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  const BasicTensor<T>& x = a.value();
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
  BasicTensor<T> saved = y;
  return a.graph->record(std::move(y), {a},
                         [a, saved = std::move(saved)](Graph<T>& g, const BasicTensor<T>& gy) {
                           BasicTensor<T> gx(saved.shape());
                           for (std::size_t i = 0; i < saved.size(); ++i)
                             gx[i] = gy[i] * (T{1} - saved[i] * saved[i]);
                           g.accumulate(a, std::move(gx));
                         });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  auto sig = [](T x) {
    return x >= T{0} ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
  };
  return detail::unary(a, sig, [sig](T x) {
    const T s = sig(x);
    return s * (T{1} - s);
  });
}

template <typename T>
Var<T> exp(Var<T> a) {
  return detail::unary(a, [](T x) { return std::exp(x); }, [](T x) { return std::exp(x); });
}

template <typename T>
Var<T> log(Var<T> a) {
  for (T v : a.value().values()) {
    if (!(v > T{0})) throw NumericError("log: non-positive input " + std::to_string(v));
  }
  return detail::unary(a, [](T x) { return std::log(x); }, [](T x) { return T{1} / x; });
}

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  detail::require_rank("softmax_rows", a.shape(), 2);
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  const BasicTensor<T>& x = a.value();
  BasicTensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(static_cast<double>(xr[c]) - mx);
    for (std::size_t c = 0; c < cols; ++c)
      y.at(r, c) = static_cast<T>(std::exp(static_cast<double>(xr[c]) - mx) / z);
  }
  BasicTensor<T> saved = y;
  return a.graph->record(std::move(y), {a},
                         [a, saved = std::move(saved), rows, cols](Graph<T>& g,
                                                                   const BasicTensor<T>& gy) {
                           BasicTensor<T> gx(saved.shape());
                           for (std::size_t r = 0; r < rows; ++r) {
                             double dot = 0.0;
                             for (std::size_t c = 0; c < cols; ++c)
                               dot += static_cast<double>(gy.at(r, c)) * saved.at(r, c);
                             for (std::size_t c = 0; c < cols; ++c)
                               gx.at(r, c) = static_cast<T>(saved.at(r, c) * (gy.at(r, c) - dot));
                           }
                           g.accumulate(a, std::move(gx));
                         });
}

inline constexpr double kNormEpsilon = 1e-12;

// y = x / (||x|| + eps), row by row.
template <typename T>
Var<T> l2_normalize_rows(Var<T> a) {
  detail::require_rank("l2_normalize_rows", a.shape(), 2);
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  const BasicTensor<T>& x = a.value();
  BasicTensor<T> y(x.shape());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ss += static_cast<double>(x.at(r, c)) * x.at(r, c);
    norms[r] = std::sqrt(ss);
    for (std::size_t c = 0; c < cols; ++c)
      y.at(r, c) = static_cast<T>(x.at(r, c) / (norms[r] + kNormEpsilon));
  }
  return a.graph->record(
      std::move(y), {a}, [a, norms, rows, cols](Graph<T>& g, const BasicTensor<T>& gy) {
        const BasicTensor<T>& x = g.value(a.id);
        BasicTensor<T> gx(x.shape());
        for (std::size_t r = 0; r < rows; ++r) {
          const double n = norms[r];
          const double d = n + kNormEpsilon;
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c)
            dot += static_cast<double>(gy.at(r, c)) * x.at(r, c);
          const double k = n > 0.0 ? dot / (n * d * d) : 0.0;
          for (std::size_t c = 0; c < cols; ++c)
            gx.at(r, c) = static_cast<T>(gy.at(r, c) / d - x.at(r, c) * k);
        }
        g.accumulate(a, std::move(gx));
      });
}

// x [B,C,H,W], w [O,C,k,k], b [O] -> [B,O,H',W'] (square kernel).
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, std::size_t stride, std::size_t pad) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4 || sw[1] != sx[1] || sw[2] != sw[3] ||
      b.shape() != Shape{sw[0]} || stride == 0 || sx[2] + 2 * pad < sw[2] ||
      sx[3] + 2 * pad < sw[3]) {
    detail::shape_error("conv2d", sx, sw);
  }
  const std::size_t batch = sx[0], out_c = sw[0];
  const kernels::ConvGeometry geo{sx[1], sx[2], sx[3], sw[2], stride, pad};
  const std::size_t oh = geo.out_h(), ow = geo.out_w(), hw = oh * ow;
  const std::size_t in_size = sx[1] * sx[2] * sx[3];
  BasicTensor<T> y({batch, out_c, oh, ow});
  std::vector<T> cols(geo.patch() * hw);
  const T* bias = b.value().data();
  for (std::size_t n = 0; n < batch; ++n) {
    kernels::im2col(x.value().data() + n * in_size, geo, cols.data());
    T* out = y.data() + n * out_c * hw;
    for (std::size_t o = 0; o < out_c; ++o) std::fill(out + o * hw, out + (o + 1) * hw, bias[o]);
    kernels::gemm_nn(w.value().data(), cols.data(), out, out_c, geo.patch(), hw, true);
  }
  return x.graph->record(
      std::move(y), {x, w, b},
      [x, w, b, geo, batch, out_c, hw, in_size](Graph<T>& g, const BasicTensor<T>& gy) {
        std::vector<T> cols(geo.patch() * hw);
        BasicTensor<T> gw(g.value(w.id).shape());
        std::vector<double> gb(out_c, 0.0);
        BasicTensor<T> gx;
        if (x.requires_grad()) gx = BasicTensor<T>(g.value(x.id).shape());
        std::vector<T> gcols(geo.patch() * hw);
        for (std::size_t n = 0; n < batch; ++n) {
          const T* go = gy.data() + n * out_c * hw;
          for (std::size_t o = 0; o < out_c; ++o) {
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += go[o * hw + i];
            gb[o] += acc;
          }
          if (w.requires_grad()) {
            kernels::im2col(g.value(x.id).data() + n * in_size, geo, cols.data());
            kernels::gemm_nt(go, cols.data(), gw.data(), out_c, hw, geo.patch(), true);
          }
          if (x.requires_grad()) {
            kernels::gemm_tn(g.value(w.id).data(), go, gcols.data(), geo.patch(), out_c, hw,
                             false);
            kernels::col2im(gcols.data(), geo, gx.data() + n * in_size);
          }
        }
        if (w.requires_grad()) g.accumulate(w, std::move(gw));
        if (b.requires_grad()) {
          BasicTensor<T> gbt({out_c});
          for (std::size_t o = 0; o < out_c; ++o) gbt[o] = static_cast<T>(gb[o]);
          g.accumulate(b, std::move(gbt));
        }
        if (x.requires_grad()) g.accumulate(x, std::move(gx));
      });
}

// Max over k x k windows; ties resolve to the first maximum in scan order.
template <typename T>
Var<T> maxpool2d(Var<T> x, std::size_t k, std::size_t stride) {
  const Shape& sx = x.shape();
  if (sx.size() != 4 || k == 0 || stride == 0 || sx[2] < k || sx[3] < k) {
    detail::shape_error("maxpool2d", sx, "cannot pool with window " + std::to_string(k));
  }
  const std::size_t planes = sx[0] * sx[1], h = sx[2], w = sx[3];
  const std::size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  BasicTensor<T> y({sx[0], sx[1], oh, ow});
  std::vector<std::size_t> argmax(y.size());
  const T* src = x.value().data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = p * h * w + (oy * stride) * w + ox * stride;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t idx = p * h * w + (oy * stride + ky) * w + ox * stride + kx;
            if (src[idx] > src[best] || std::isnan(src[idx])) best = idx;
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        y[o] = src[best];
        argmax[o] = best;
        if (x.graph->tracing_branches()) x.graph->note_branch(best);
      }
    }
  }
  return x.graph->record(std::move(y), {x},
                         [x, argmax = std::move(argmax)](Graph<T>& g, const BasicTensor<T>& gy) {
                           BasicTensor<T> gx(g.value(x.id).shape());
                           for (std::size_t o = 0; o < gy.size(); ++o) gx[argmax[o]] += gy[o];
                           g.accumulate(x, std::move(gx));
                         });
}

// Mean over non-overlapping k x k windows; H and W must be multiples of k.
template <typename T>
Var<T> avg_pool2d(Var<T> x, std::size_t k) {
  const Shape& sx = x.shape();
  if (sx.size() != 4 || k == 0 || sx[2] % k != 0 || sx[3] % k != 0) {
    detail::shape_error("avg_pool2d", sx, "is not divisible by window " + std::to_string(k));
  }
  const std::size_t planes = sx[0] * sx[1], h = sx[2], w = sx[3];
  const std::size_t oh = h / k, ow = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  BasicTensor<T> y({sx[0], sx[1], oh, ow});
  const T* src = x.value().data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx)
            acc += src[p * h * w + (oy * k + ky) * w + ox * k + kx];
        y[(p * oh + oy) * ow + ox] = static_cast<T>(acc * inv);
      }
    }
  }
  return x.graph->record(
      std::move(y), {x}, [x, planes, h, w, oh, ow, k, inv](Graph<T>& g, const BasicTensor<T>& gy) {
        BasicTensor<T> gx(g.value(x.id).shape());
        for (std::size_t p = 0; p < planes; ++p)
          for (std::size_t yy = 0; yy < h; ++yy)
            for (std::size_t xx = 0; xx < w; ++xx)
              gx[p * h * w + yy * w + xx] =
                  static_cast<T>(gy[(p * oh + yy / k) * ow + xx / k] * inv);
        g.accumulate(x, std::move(gx));
      });
}

// [B,C,H,W] -> [B,C]
template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  detail::require_rank("global_avg_pool", x.shape(), 4);
  const Shape& sx = x.shape();
  const std::size_t planes = sx[0] * sx[1], hw = sx[2] * sx[3];
  const double inv = 1.0 / static_cast<double>(hw);
  BasicTensor<T> y({sx[0], sx[1]});
  const T* src = x.value().data();
  for (std::size_t p = 0; p < planes; ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += src[p * hw + i];
    y[p] = static_cast<T>(acc * inv);
  }
  return x.graph->record(std::move(y), {x},
                         [x, planes, hw, inv](Graph<T>& g, const BasicTensor<T>& gy) {
                           BasicTensor<T> gx(g.value(x.id).shape());
                           for (std::size_t p = 0; p < planes; ++p) {
                             const T v = static_cast<T>(gy[p] * inv);
                             std::fill(gx.data() + p * hw, gx.data() + (p + 1) * hw, v);
                           }
                           g.accumulate(x, std::move(gx));
                         });
}

}  // namespace care::ad
