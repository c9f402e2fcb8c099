#pragma once

// Positional inputs for the mask regressor: the centre-position embedding and
// the Area Embedding, plus the 1x1 projection to P channels.

#include <cstdint>
#include <string>
#include <string_view>

#include "sra/numerics.hpp"
#include "sra/sampler.hpp"

namespace sra {

enum class EmbeddingMode { none, position, area };

inline std::string_view to_string(EmbeddingMode m) {
  switch (m) {
    case EmbeddingMode::none: return "none";
    case EmbeddingMode::position: return "position";
    case EmbeddingMode::area: return "area";
  }
  return "?";
}

inline EmbeddingMode parse_embedding_mode(std::string_view s) {
  if (s == "none") return EmbeddingMode::none;
  if (s == "position") return EmbeddingMode::position;
  if (s == "area") return EmbeddingMode::area;
  throw ConfigError("unknown embedding mode '" + std::string(s) + "'");
}

/// Depth of the raw embedding before projection (0 for none).
inline std::size_t raw_embedding_depth(EmbeddingMode mode, std::size_t m_axis) {
  switch (mode) {
    case EmbeddingMode::none: return 0;
    case EmbeddingMode::position: return 2;
    case EmbeddingMode::area: return 2 * m_axis;
  }
  return 0;
}

/// (2,h,w): p(0,j,k) = (j+1)/h*2-1, p(1,j,k) = (k+1)/w*2-1 with 0-based j,k.
/// Values lie in (2/h-1, 1]; the range is deliberately left asymmetric.
template <typename T>
Tensor<T> position_embedding_raw(GridSize g) {
  if (g.h == 0 || g.w == 0) throw ShapeError("position_embedding_raw: empty grid");
  Tensor<T> out({2, g.h, g.w});
  for (std::size_t j = 0; j < g.h; ++j) {
    for (std::size_t k = 0; k < g.w; ++k) {
      out(0, j, k) = static_cast<T>(j + 1) / static_cast<T>(g.h) * T{2} - T{1};
      out(1, j, k) = static_cast<T>(k + 1) / static_cast<T>(g.w) * T{2} - T{1};
    }
  }
  return out;
}

/// Linear upsampling of onehot(index; length) to `target` entries, aligning
/// source cell centres (b+0.5)/length with target centres (t+0.5)/target and
/// clamping at the edges. `index` is 0-based.
///
/// Weights are formed as integer ratios over 2*target so that reflecting the
/// index reflects the result bit-exactly.
template <typename T>
std::vector<T> upsample_onehot(std::size_t index, std::size_t length, std::size_t target) {
  if (index >= length) throw ShapeError("upsample_onehot: index out of range");
  std::vector<T> out(target, T{0});
  const auto len = static_cast<std::int64_t>(length);
  const auto denom = static_cast<std::int64_t>(2 * target);
  for (std::size_t t = 0; t < target; ++t) {
    // continuous source index = ((2t+1)*length - target) / (2*target)
    const std::int64_t num = static_cast<std::int64_t>(2 * t + 1) * len -
                             static_cast<std::int64_t>(target);
    std::int64_t lo;
    std::int64_t rem;
    if (num <= 0) {
      lo = 0;
      rem = 0;
    } else {
      lo = num / denom;
      rem = num % denom;
    }
    if (lo >= len - 1) {
      lo = len - 1;
      rem = 0;
    }
    const auto idx = static_cast<std::int64_t>(index);
    if (lo == idx) {
      out[t] = static_cast<T>(denom - rem) / static_cast<T>(denom);
    } else if (lo + 1 == idx && rem != 0) {
      out[t] = static_cast<T>(rem) / static_cast<T>(denom);
    }
  }
  return out;
}

/// (2*m_axis,h,w): vertical block rows [0,m_axis) encode j, horizontal rows
/// [m_axis,2*m_axis) encode k.
template <typename T>
Tensor<T> area_embedding_raw(GridSize g, std::size_t m_axis) {
  if (g.h == 0 || g.w == 0) throw ShapeError("area_embedding_raw: empty grid");
  if (g.h > m_axis || g.w > m_axis) {
    throw ConfigError("area_embedding_raw: grid " + std::to_string(g.h) + "x" +
                      std::to_string(g.w) + " exceeds embedding length " +
                      std::to_string(m_axis));
  }
  Tensor<T> out({2 * m_axis, g.h, g.w});
  for (std::size_t j = 0; j < g.h; ++j) {
    const auto v = upsample_onehot<T>(j, g.h, m_axis);
    for (std::size_t t = 0; t < m_axis; ++t) {
      if (v[t] == T{0}) continue;
      for (std::size_t k = 0; k < g.w; ++k) out(t, j, k) = v[t];
    }
  }
  for (std::size_t k = 0; k < g.w; ++k) {
    const auto v = upsample_onehot<T>(k, g.w, m_axis);
    for (std::size_t t = 0; t < m_axis; ++t) {
      if (v[t] == T{0}) continue;
      for (std::size_t j = 0; j < g.h; ++j) out(m_axis + t, j, k) = v[t];
    }
  }
  return out;
}

/// Raw embedding for the configured mode; empty tensor-less result for none.
template <typename T>
Tensor<T> raw_embedding(EmbeddingMode mode, GridSize g, std::size_t m_axis) {
  switch (mode) {
    case EmbeddingMode::position: return position_embedding_raw<T>(g);
    case EmbeddingMode::area: return area_embedding_raw<T>(g, m_axis);
    case EmbeddingMode::none: break;
  }
  throw ConfigError("raw_embedding: embedding mode is none");
}

/// The 1x1 convolution from the raw embedding depth to P channels.
template <typename T>
struct EmbeddingProjection {
  LinearParams<T> conv;
};

template <typename T>
Tensor<T> project_embedding(const Tensor<T>& raw, const EmbeddingProjection<T>& proj) {
  if (raw.rank() != 3 || raw.dim(0) != proj.conv.in_dim()) {
    throw ShapeError("project_embedding: raw depth " +
                     (raw.rank() ? std::to_string(raw.dim(0)) : std::string("?")) +
                     " vs projection in_dim " + std::to_string(proj.conv.in_dim()));
  }
  return pointwise_linear(raw, proj.conv);
}

}  // namespace sra
