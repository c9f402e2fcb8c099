#pragma once

// Differentiable dense kernels. Every forward op has a matching *_backward
// that maps an output cotangent to input (and parameter) cotangents, and a
// *_vjp wrapper that bundles the two for gradient checking.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "sra/tensor.hpp"

namespace sra {

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // (out_dim, in_dim)
  Tensor<T> bias;    // (out_dim)

  static LinearParams zeros(std::size_t in_dim, std::size_t out_dim) {
    return {Tensor<T>({out_dim, in_dim}), Tensor<T>({out_dim})};
  }

  std::size_t in_dim() const { return weight.dim(1); }
  std::size_t out_dim() const { return weight.dim(0); }
  std::size_t parameter_count() const { return weight.size() + bias.size(); }
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;   // (dim)
  Tensor<T> shift;  // (dim)
  T epsilon = T(1e-5);

  static LayerNormParams identity(std::size_t dim, T epsilon = T(1e-5)) {
    return {Tensor<T>({dim}, T{1}), Tensor<T>({dim}, T{0}), epsilon};
  }

  std::size_t dim() const { return gain.size(); }
  std::size_t parameter_count() const { return gain.size() + shift.size(); }
};

namespace detail {

inline void check_linear_shapes(std::size_t x_inner, std::size_t in_dim, std::size_t bias_len,
                                std::size_t out_dim) {
  if (x_inner != in_dim) {
    throw ShapeError("linear: input dim " + std::to_string(x_inner) +
                     " does not match weight in_dim " + std::to_string(in_dim));
  }
  if (bias_len != out_dim) {
    throw ShapeError("linear: bias dim " + std::to_string(bias_len) +
                     " does not match weight out_dim " + std::to_string(out_dim));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// linear

/// y = W x + b for x of shape (in) or row-wise for (B,in).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& p) {
  if (x.rank() != 1 && x.rank() != 2) throw ShapeError("linear: input must be rank 1 or 2");
  if (p.weight.rank() != 2) throw ShapeError("linear: weight must be rank 2");
  const std::size_t in = p.in_dim();
  const std::size_t out = p.out_dim();
  const std::size_t rows = x.rank() == 1 ? 1 : x.dim(0);
  detail::check_linear_shapes(x.dims().back(), in, p.bias.size(), out);

  Tensor<T> y(x.rank() == 1 ? Dims{out} : Dims{rows, out});
  const T* w = p.weight.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * in;
    T* yr = y.data().data() + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      const T* wo = w + o * in;
      T acc = p.bias[o];
      for (std::size_t i = 0; i < in; ++i) acc += wo[i] * xr[i];
      yr[o] = acc;
    }
  }
  return y;
}

/// Accumulates dW, db into `grads`; returns dx.
template <typename T>
Tensor<T> linear_backward(const Tensor<T>& x, const LinearParams<T>& p, const Tensor<T>& dy,
                          LinearParams<T>& grads) {
  const std::size_t in = p.in_dim();
  const std::size_t out = p.out_dim();
  const std::size_t rows = x.rank() == 1 ? 1 : x.dim(0);
  if (dy.size() != rows * out) throw ShapeError("linear_backward: cotangent shape mismatch");

  Tensor<T> dx(x.dims());
  const T* w = p.weight.data().data();
  T* gw = grads.weight.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * in;
    const T* dyr = dy.data().data() + r * out;
    T* dxr = dx.data().data() + r * in;
    for (std::size_t o = 0; o < out; ++o) {
      const T g = dyr[o];
      if (g == T{0}) continue;
      grads.bias[o] += g;
      const T* wo = w + o * in;
      T* gwo = gw + o * in;
      for (std::size_t i = 0; i < in; ++i) {
        gwo[i] += g * xr[i];
        dxr[i] += g * wo[i];
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// per-position linear (1x1 convolution) over a (C,h,w) map

template <typename T>
Tensor<T> pointwise_linear(const Tensor<T>& x, const LinearParams<T>& p) {
  if (x.rank() != 3) throw ShapeError("pointwise_linear: input must be (C,h,w)");
  const std::size_t in = p.in_dim();
  const std::size_t out = p.out_dim();
  detail::check_linear_shapes(x.dim(0), in, p.bias.size(), out);
  const std::size_t positions = x.dim(1) * x.dim(2);

  Tensor<T> y({out, x.dim(1), x.dim(2)});
  for (std::size_t o = 0; o < out; ++o) {
    T* yo = y.data().data() + o * positions;
    std::fill(yo, yo + positions, p.bias[o]);
    for (std::size_t i = 0; i < in; ++i) {
      const T wv = p.weight(o, i);
      const T* xi = x.data().data() + i * positions;
      for (std::size_t q = 0; q < positions; ++q) yo[q] += wv * xi[q];
    }
  }
  return y;
}

template <typename T>
Tensor<T> pointwise_linear_backward(const Tensor<T>& x, const LinearParams<T>& p,
                                    const Tensor<T>& dy, LinearParams<T>& grads) {
  const std::size_t in = p.in_dim();
  const std::size_t out = p.out_dim();
  const std::size_t positions = x.dim(1) * x.dim(2);
  if (dy.size() != out * positions) {
    throw ShapeError("pointwise_linear_backward: cotangent shape mismatch");
  }
  Tensor<T> dx(x.dims());
  for (std::size_t o = 0; o < out; ++o) {
    const T* dyo = dy.data().data() + o * positions;
    T bsum{0};
    for (std::size_t q = 0; q < positions; ++q) bsum += dyo[q];
    grads.bias[o] += bsum;
    for (std::size_t i = 0; i < in; ++i) {
      const T* xi = x.data().data() + i * positions;
      T* dxi = dx.data().data() + i * positions;
      const T wv = p.weight(o, i);
      T gw{0};
      for (std::size_t q = 0; q < positions; ++q) {
        gw += dyo[q] * xi[q];
        dxi[q] += wv * dyo[q];
      }
      grads.weight(o, i) += gw;
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// layer normalization over the last dimension

template <typename T>
struct LayerNormCache {
  Tensor<T> normalized;    // (x - mean) / sqrt(var + eps), same dims as x
  std::vector<T> inv_std;  // one per row
};

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormParams<T>& p,
                     LayerNormCache<T>* cache = nullptr) {
  if (x.rank() != 1 && x.rank() != 2) throw ShapeError("layer_norm: input must be rank 1 or 2");
  const std::size_t dim = x.dims().back();
  if (dim != p.dim() || p.shift.size() != dim) {
    throw ShapeError("layer_norm: input dim " + std::to_string(dim) + " vs params dim " +
                     std::to_string(p.dim()));
  }
  const std::size_t rows = x.size() / dim;
  Tensor<T> y(x.dims());
  if (cache) {
    cache->normalized = Tensor<T>(x.dims());
    cache->inv_std.assign(rows, T{0});
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * dim;
    T mean{0};
    for (std::size_t i = 0; i < dim; ++i) mean += xr[i];
    mean /= static_cast<T>(dim);
    T var{0};
    for (std::size_t i = 0; i < dim; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(dim);
    const T inv = T{1} / std::sqrt(var + p.epsilon);
    T* yr = y.data().data() + r * dim;
    for (std::size_t i = 0; i < dim; ++i) {
      const T n = (xr[i] - mean) * inv;
      if (cache) cache->normalized[r * dim + i] = n;
      yr[i] = p.gain[i] * n + p.shift[i];
    }
    if (cache) cache->inv_std[r] = inv;
  }
  return y;
}

/// Accumulates dgain/dshift into `grads`; returns dx.
template <typename T>
Tensor<T> layer_norm_backward(const LayerNormCache<T>& cache, const LayerNormParams<T>& p,
                              const Tensor<T>& dy, LayerNormParams<T>& grads) {
  const std::size_t dim = p.dim();
  const std::size_t rows = cache.inv_std.size();
  if (dy.size() != rows * dim) throw ShapeError("layer_norm_backward: cotangent shape mismatch");
  Tensor<T> dx(cache.normalized.dims());
  std::vector<T> dn(dim);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* nr = cache.normalized.data().data() + r * dim;
    const T* dyr = dy.data().data() + r * dim;
    T mean_dn{0};
    T mean_dn_n{0};
    for (std::size_t i = 0; i < dim; ++i) {
      grads.gain[i] += dyr[i] * nr[i];
      grads.shift[i] += dyr[i];
      dn[i] = dyr[i] * p.gain[i];
      mean_dn += dn[i];
      mean_dn_n += dn[i] * nr[i];
    }
    mean_dn /= static_cast<T>(dim);
    mean_dn_n /= static_cast<T>(dim);
    T* dxr = dx.data().data() + r * dim;
    for (std::size_t i = 0; i < dim; ++i) {
      dxr[i] = cache.inv_std[r] * (dn[i] - mean_dn - nr[i] * mean_dn_n);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// relu

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.storage()) v = std::max(v, T{0});
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T>::require_same_dims(x, dy, "relu_backward");
  Tensor<T> dx(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T{0} ? dy[i] : T{0};
  return dx;
}

// ---------------------------------------------------------------------------
// amplified spatial softmax: each (h,w) slice of (N,h,w) becomes a distribution

template <typename T>
Tensor<T> softmax_spatial(const Tensor<T>& logits, T gamma) {
  if (logits.rank() != 3) throw ShapeError("softmax_spatial: logits must be (N,h,w)");
  if (!(gamma > T{0})) throw ConfigError("softmax_spatial: gamma must be positive");
  const std::size_t slices = logits.dim(0);
  const std::size_t area = logits.dim(1) * logits.dim(2);
  Tensor<T> out(logits.dims());
  for (std::size_t n = 0; n < slices; ++n) {
    const T* l = logits.data().data() + n * area;
    T* o = out.data().data() + n * area;
    T z = -std::numeric_limits<T>::infinity();
    for (std::size_t q = 0; q < area; ++q) z = std::max(z, gamma * l[q]);
    T sum{0};
    for (std::size_t q = 0; q < area; ++q) {
      o[q] = std::exp(gamma * l[q] - z);
      sum += o[q];
    }
    for (std::size_t q = 0; q < area; ++q) o[q] /= sum;
  }
  return out;
}

/// dlogits = gamma * m * (dm - <m, dm>) per slice.
template <typename T>
Tensor<T> softmax_spatial_backward(const Tensor<T>& masks, const Tensor<T>& dmasks, T gamma) {
  Tensor<T>::require_same_dims(masks, dmasks, "softmax_spatial_backward");
  const std::size_t slices = masks.dim(0);
  const std::size_t area = masks.dim(1) * masks.dim(2);
  Tensor<T> dl(masks.dims());
  for (std::size_t n = 0; n < slices; ++n) {
    const T* m = masks.data().data() + n * area;
    const T* g = dmasks.data().data() + n * area;
    T inner{0};
    for (std::size_t q = 0; q < area; ++q) inner += m[q] * g[q];
    T* d = dl.data().data() + n * area;
    for (std::size_t q = 0; q < area; ++q) d[q] = gamma * m[q] * (g[q] - inner);
  }
  return dl;
}

// ---------------------------------------------------------------------------
// bilinear sampling; pixel (j,k) sits at continuous coordinate (j,k)

template <typename T>
struct BilinearTaps {
  std::size_t offset[4];  // j*W + k of the four neighbours
  T weight[4];
  T ly, lx;  // fractional offsets, used by the lerp-form evaluation
};

// Lerp form keeps constant fields exact; weights are only used by the backward.
template <typename T>
T bilinear_eval(const BilinearTaps<T>& t, const T* f) {
  const T a = f[t.offset[0]];
  const T b = f[t.offset[1]];
  const T c = f[t.offset[2]];
  const T d = f[t.offset[3]];
  const T top = a + t.lx * (b - a);
  const T bottom = c + t.lx * (d - c);
  return top + t.ly * (bottom - top);
}

template <typename T>
BilinearTaps<T> bilinear_taps(std::size_t height, std::size_t width, T y, T x) {
  const T ymax = static_cast<T>(height - 1);
  const T xmax = static_cast<T>(width - 1);
  y = std::clamp(y, T{0}, ymax);
  x = std::clamp(x, T{0}, xmax);
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, height - 1);
  const std::size_t x1 = std::min(x0 + 1, width - 1);
  const T ly = y - static_cast<T>(y0);
  const T lx = x - static_cast<T>(x0);
  const T hy = T{1} - ly;
  const T hx = T{1} - lx;
  return {{y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1},
          {hy * hx, hy * lx, ly * hx, ly * lx},
          ly,
          lx};
}

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& F, T y, T x) {
  if (F.rank() != 3) throw ShapeError("bilinear_sample: feature map must be (C,H,W)");
  const std::size_t channels = F.dim(0);
  const std::size_t plane = F.dim(1) * F.dim(2);
  const auto taps = bilinear_taps(F.dim(1), F.dim(2), y, x);
  Tensor<T> out({channels});
  for (std::size_t c = 0; c < channels; ++c) {
    const T* fc = F.data().data() + c * plane;
    out[c] = bilinear_eval(taps, fc);
  }
  return out;
}

/// Scatters dout (C) into dF (C,H,W) with the sampling weights.
template <typename T>
void bilinear_sample_backward(T y, T x, const Tensor<T>& dout, Tensor<T>& dF) {
  const std::size_t channels = dF.dim(0);
  const std::size_t plane = dF.dim(1) * dF.dim(2);
  const auto taps = bilinear_taps(dF.dim(1), dF.dim(2), y, x);
  for (std::size_t c = 0; c < channels; ++c) {
    T* gc = dF.data().data() + c * plane;
    for (int t = 0; t < 4; ++t) gc[taps.offset[t]] += taps.weight[t] * dout[c];
  }
}

// ---------------------------------------------------------------------------
// VJP records

template <typename T>
using Cotangents = std::vector<Tensor<T>>;

/// A forward op's saved state plus its pullback. Cotangents come back in the
/// op's input order (inputs first, then parameters).
template <typename T>
struct VjpRecord {
  std::string op;
  std::function<Cotangents<T>(const Tensor<T>&)> pullback;

  Cotangents<T> operator()(const Tensor<T>& cotangent) const { return pullback(cotangent); }
};

template <typename T>
struct Traced {
  Tensor<T> value;
  VjpRecord<T> vjp;
};

template <typename T>
Traced<T> linear_vjp(const Tensor<T>& x, const LinearParams<T>& p) {
  return {linear(x, p), {"linear", [x, p](const Tensor<T>& dy) {
                           auto g = LinearParams<T>::zeros(p.in_dim(), p.out_dim());
                           auto dx = linear_backward(x, p, dy, g);
                           return Cotangents<T>{std::move(dx), std::move(g.weight),
                                                std::move(g.bias)};
                         }}};
}

template <typename T>
Traced<T> pointwise_linear_vjp(const Tensor<T>& x, const LinearParams<T>& p) {
  return {pointwise_linear(x, p), {"pointwise_linear", [x, p](const Tensor<T>& dy) {
                                     auto g = LinearParams<T>::zeros(p.in_dim(), p.out_dim());
                                     auto dx = pointwise_linear_backward(x, p, dy, g);
                                     return Cotangents<T>{std::move(dx), std::move(g.weight),
                                                          std::move(g.bias)};
                                   }}};
}

template <typename T>
Traced<T> layer_norm_vjp(const Tensor<T>& x, const LayerNormParams<T>& p) {
  LayerNormCache<T> cache;
  auto y = layer_norm(x, p, &cache);
  return {std::move(y), {"layer_norm", [cache = std::move(cache), p](const Tensor<T>& dy) {
                           auto g = LayerNormParams<T>{Tensor<T>({p.dim()}), Tensor<T>({p.dim()}),
                                                       p.epsilon};
                           auto dx = layer_norm_backward(cache, p, dy, g);
                           return Cotangents<T>{std::move(dx), std::move(g.gain),
                                                std::move(g.shift)};
                         }}};
}

template <typename T>
Traced<T> relu_vjp(const Tensor<T>& x) {
  return {relu(x),
          {"relu", [x](const Tensor<T>& dy) { return Cotangents<T>{relu_backward(x, dy)}; }}};
}

template <typename T>
Traced<T> softmax_spatial_vjp(const Tensor<T>& logits, T gamma) {
  auto m = softmax_spatial(logits, gamma);
  return {m, {"softmax_spatial", [m, gamma](const Tensor<T>& dy) {
                return Cotangents<T>{softmax_spatial_backward(m, dy, gamma)};
              }}};
}

template <typename T>
Traced<T> bilinear_sample_vjp(const Tensor<T>& F, T y, T x) {
  return {bilinear_sample(F, y, x), {"bilinear_sample", [dims = F.dims(), y, x](const Tensor<T>& dy) {
                                       Tensor<T> dF(dims);
                                       bilinear_sample_backward(y, x, dy, dF);
                                       return Cotangents<T>{std::move(dF)};
                                     }}};
}

}  // namespace sra
