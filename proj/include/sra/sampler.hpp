#pragma once

// Dynamic Feature Sampler: a per-RoI grid under an area budget plus block
// averaging of bilinear samples.

#include <cmath>
#include <cstddef>
#include <string>

#include "sra/numerics.hpp"

namespace sra {

/// Continuous box in feature-map coordinates; (x0,y0) top-left, (x1,y1) bottom-right.
struct RoIBox {
  double x0 = 0, y0 = 0, x1 = 1, y1 = 1;

  double width() const noexcept { return x1 - x0; }
  double height() const noexcept { return y1 - y0; }
  double center_x() const noexcept { return 0.5 * (x0 + x1); }
  double center_y() const noexcept { return 0.5 * (y0 + y1); }

  bool valid() const noexcept {
    return std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) && std::isfinite(y1) &&
           x1 > x0 && y1 > y0;
  }

  void require_valid() const {
    if (!valid()) {
      throw ShapeError("invalid RoI box (" + std::to_string(x0) + "," + std::to_string(y0) +
                       ")-(" + std::to_string(x1) + "," + std::to_string(y1) + ")");
    }
  }

  friend bool operator==(const RoIBox&, const RoIBox&) = default;
};

struct GridSize {
  std::size_t h = 1;
  std::size_t w = 1;

  std::size_t area() const noexcept { return h * w; }
  friend bool operator==(const GridSize&, const GridSize&) = default;
};

/// Grid (h,w) with h*w <= budget whose ratio h/w is closest to the box's
/// height/width. Ties go to the larger area, then the larger h.
inline GridSize dynamic_grid_size(const RoIBox& box, std::size_t budget) {
  box.require_valid();
  if (budget < 1) throw ConfigError("dynamic_grid_size: budget M must be >= 1");
  const double ratio = box.height() / box.width();

  GridSize best{1, 1};
  double best_err = std::abs(1.0 - ratio);
  auto consider = [&](std::size_t h, std::size_t w) {
    const double err = std::abs(static_cast<double>(h) / static_cast<double>(w) - ratio);
    const std::size_t area = h * w;
    if (err < best_err || (err == best_err && (area > best.area() ||
                                               (area == best.area() && h > best.h)))) {
      best = {h, w};
      best_err = err;
    }
  };

  // For fixed h the error is unimodal in w with its minimum near h/ratio,
  // so the two integers bracketing h/ratio (clipped to [1, budget/h]) suffice.
  for (std::size_t h = 1; h <= budget; ++h) {
    const std::size_t w_max = budget / h;
    const double ideal = static_cast<double>(h) / ratio;
    std::size_t lo = 1;
    if (ideal >= static_cast<double>(w_max)) {
      lo = w_max;
    } else if (ideal > 1.0) {
      lo = static_cast<std::size_t>(std::floor(ideal));
    }
    consider(h, lo);
    if (lo + 1 <= w_max) consider(h, lo + 1);
  }
  return best;
}

namespace detail {

/// Sample positions inside block b of n equal blocks spanning [lo, lo+extent):
/// the 1/4 and 3/4 points.
inline void block_sample_coords(double lo, double extent, std::size_t n, std::size_t b,
                                double out[2]) {
  const double size = extent / static_cast<double>(n);
  const double start = lo + static_cast<double>(b) * size;
  out[0] = start + 0.25 * size;
  out[1] = start + 0.75 * size;
}

}  // namespace detail

/// Divides the box into h x w blocks; each output is the mean of 2x2 bilinear
/// samples at the quarter points of its block. Output (C,h,w).
template <typename T>
Tensor<T> block_average_pool(const Tensor<T>& F, const RoIBox& box, GridSize grid) {
  if (F.rank() != 3) throw ShapeError("block_average_pool: feature map must be (C,H,W)");
  box.require_valid();
  if (grid.h == 0 || grid.w == 0) throw ShapeError("block_average_pool: empty grid");
  const std::size_t channels = F.dim(0);
  const std::size_t height = F.dim(1);
  const std::size_t width = F.dim(2);
  const std::size_t plane = height * width;
  const std::size_t cells = grid.area();

  Tensor<T> out({channels, grid.h, grid.w});
  double ys[2];
  double xs[2];
  for (std::size_t j = 0; j < grid.h; ++j) {
    detail::block_sample_coords(box.y0, box.height(), grid.h, j, ys);
    for (std::size_t k = 0; k < grid.w; ++k) {
      detail::block_sample_coords(box.x0, box.width(), grid.w, k, xs);
      BilinearTaps<T> taps[4];
      for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
          taps[a * 2 + b] =
              bilinear_taps(height, width, static_cast<T>(ys[a]), static_cast<T>(xs[b]));
        }
      }
      for (std::size_t c = 0; c < channels; ++c) {
        const T* fc = F.data().data() + c * plane;
        const T acc = (bilinear_eval(taps[0], fc) + bilinear_eval(taps[1], fc)) +
                      (bilinear_eval(taps[2], fc) + bilinear_eval(taps[3], fc));
        out.data()[c * cells + j * grid.w + k] = acc * T(0.25);
      }
    }
  }
  return out;
}

/// Scatters dout (C,h,w) into dF (C,H,W).
template <typename T>
void block_average_pool_backward(const RoIBox& box, GridSize grid, const Tensor<T>& dout,
                                 Tensor<T>& dF) {
  const std::size_t channels = dF.dim(0);
  const std::size_t height = dF.dim(1);
  const std::size_t width = dF.dim(2);
  const std::size_t plane = height * width;
  const std::size_t cells = grid.area();
  if (dout.size() != channels * cells) {
    throw ShapeError("block_average_pool_backward: cotangent shape mismatch");
  }
  double ys[2];
  double xs[2];
  for (std::size_t j = 0; j < grid.h; ++j) {
    detail::block_sample_coords(box.y0, box.height(), grid.h, j, ys);
    for (std::size_t k = 0; k < grid.w; ++k) {
      detail::block_sample_coords(box.x0, box.width(), grid.w, k, xs);
      for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
          const auto tp =
              bilinear_taps(height, width, static_cast<T>(ys[a]), static_cast<T>(xs[b]));
          for (std::size_t c = 0; c < channels; ++c) {
            const T g = T(0.25) * dout.data()[c * cells + j * grid.w + k];
            T* gc = dF.data().data() + c * plane;
            for (int t = 0; t < 4; ++t) gc[tp.offset[t]] += tp.weight[t] * g;
          }
        }
      }
    }
  }
}

template <typename T>
Traced<T> block_average_pool_vjp(const Tensor<T>& F, const RoIBox& box, GridSize grid) {
  return {block_average_pool(F, box, grid),
          {"block_average_pool", [dims = F.dims(), box, grid](const Tensor<T>& dy) {
             Tensor<T> dF(dims);
             block_average_pool_backward(box, grid, dy, dF);
             return Cotangents<T>{std::move(dF)};
           }}};
}

}  // namespace sra
