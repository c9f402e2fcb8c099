#pragma once

// Reference extractors: quantized RoI Pooling and RoI Align. Both return a
// (out_h, out_w, C) grid feature.

#include <algorithm>
#include <cmath>
#include <limits>

#include "sra/sampler.hpp"

namespace sra {

inline constexpr GridSize kBaselineGrid{7, 7};

namespace detail {

template <typename T>
Tensor<T> chw_to_hwc(const Tensor<T>& x) {
  const std::size_t C = x.dim(0);
  const std::size_t H = x.dim(1);
  const std::size_t W = x.dim(2);
  Tensor<T> out({H, W, C});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t j = 0; j < H; ++j) {
      for (std::size_t k = 0; k < W; ++k) out(j, k, c) = x(c, j, k);
    }
  }
  return out;
}

template <typename T>
Tensor<T> hwc_to_chw(const Tensor<T>& x) {
  const std::size_t H = x.dim(0);
  const std::size_t W = x.dim(1);
  const std::size_t C = x.dim(2);
  Tensor<T> out({C, H, W});
  for (std::size_t j = 0; j < H; ++j) {
    for (std::size_t k = 0; k < W; ++k) {
      for (std::size_t c = 0; c < C; ++c) out(c, j, k) = x(j, k, c);
    }
  }
  return out;
}

inline long round_half_away(double v) { return std::lround(v); }

}  // namespace detail

/// Quantized max pooling: the box is snapped to integer pixels, split into
/// out.h x out.w bins (floor/ceil edges), and each bin takes the max over its
/// pixels. Bins that end up empty read the pixel nearest their centre.
template <typename T>
Tensor<T> roi_pool(const Tensor<T>& F, const RoIBox& box, GridSize out = kBaselineGrid) {
  if (F.rank() != 3) throw ShapeError("roi_pool: feature map must be (C,H,W)");
  box.require_valid();
  const long C = static_cast<long>(F.dim(0));
  const long H = static_cast<long>(F.dim(1));
  const long W = static_cast<long>(F.dim(2));
  const long xs = detail::round_half_away(box.x0);
  const long ys = detail::round_half_away(box.y0);
  const long xe = detail::round_half_away(box.x1);
  const long ye = detail::round_half_away(box.y1);
  const double roi_h = static_cast<double>(std::max(ye - ys + 1, 1L));
  const double roi_w = static_cast<double>(std::max(xe - xs + 1, 1L));
  const double bin_h = roi_h / static_cast<double>(out.h);
  const double bin_w = roi_w / static_cast<double>(out.w);

  Tensor<T> result({out.h, out.w, F.dim(0)});
  for (std::size_t j = 0; j < out.h; ++j) {
    long hs = ys + static_cast<long>(std::floor(static_cast<double>(j) * bin_h));
    long he = ys + static_cast<long>(std::ceil(static_cast<double>(j + 1) * bin_h));
    const long hc = std::clamp(
        ys + static_cast<long>(std::floor((static_cast<double>(j) + 0.5) * bin_h)), 0L, H - 1);
    hs = std::clamp(hs, 0L, H);
    he = std::clamp(he, 0L, H);
    for (std::size_t k = 0; k < out.w; ++k) {
      long ws = xs + static_cast<long>(std::floor(static_cast<double>(k) * bin_w));
      long we = xs + static_cast<long>(std::ceil(static_cast<double>(k + 1) * bin_w));
      const long wc = std::clamp(
          xs + static_cast<long>(std::floor((static_cast<double>(k) + 0.5) * bin_w)), 0L, W - 1);
      ws = std::clamp(ws, 0L, W);
      we = std::clamp(we, 0L, W);
      const bool empty = he <= hs || we <= ws;
      for (long c = 0; c < C; ++c) {
        T best;
        if (empty) {
          best = F(static_cast<std::size_t>(c), static_cast<std::size_t>(hc),
                   static_cast<std::size_t>(wc));
        } else {
          best = -std::numeric_limits<T>::infinity();
          for (long y = hs; y < he; ++y) {
            for (long x = ws; x < we; ++x) {
              best = std::max(best, F(static_cast<std::size_t>(c), static_cast<std::size_t>(y),
                                      static_cast<std::size_t>(x)));
            }
          }
        }
        result(j, k, static_cast<std::size_t>(c)) = best;
      }
    }
  }
  return result;
}

/// RoI Align with 2x2 bilinear samples per bin at the bin's quarter points;
/// the same kernel as block_average_pool, laid out (h,w,C).
template <typename T>
Tensor<T> roi_align(const Tensor<T>& F, const RoIBox& box, GridSize out = kBaselineGrid) {
  return detail::chw_to_hwc(block_average_pool(F, box, out));
}

template <typename T>
void roi_align_backward(const RoIBox& box, GridSize out, const Tensor<T>& dout, Tensor<T>& dF) {
  block_average_pool_backward(box, out, detail::hwc_to_chw(dout), dF);
}

template <typename T>
Traced<T> roi_align_vjp(const Tensor<T>& F, const RoIBox& box, GridSize out = kBaselineGrid) {
  return {roi_align(F, box, out), {"roi_align", [dims = F.dims(), box, out](const Tensor<T>& dy) {
                                     Tensor<T> dF(dims);
                                     roi_align_backward(box, out, dy, dF);
                                     return Cotangents<T>{std::move(dF)};
                                   }}};
}

}  // namespace sra
