#pragma once

// Semantic RoI Align: pool a dynamic grid from the RoI, regress N semantic
// masks from (descriptor, semantic feature, position) at every grid cell,
// and emit one feature row per mask as the mask-weighted sum of the pooled map.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "sra/embeddings.hpp"
#include "sra/numerics.hpp"
#include "sra/rng.hpp"
#include "sra/sampler.hpp"
#include "sra/tjson.hpp"

namespace sra {

enum class DescriptorMode { concatenation, maximum, average };

inline std::string_view to_string(DescriptorMode m) {
  switch (m) {
    case DescriptorMode::concatenation: return "concatenation";
    case DescriptorMode::maximum: return "maximum";
    case DescriptorMode::average: return "average";
  }
  return "?";
}

inline DescriptorMode parse_descriptor_mode(std::string_view s) {
  if (s == "concatenation" || s == "concat") return DescriptorMode::concatenation;
  if (s == "maximum" || s == "max") return DescriptorMode::maximum;
  if (s == "average" || s == "avg") return DescriptorMode::average;
  throw ConfigError("unknown descriptor mode '" + std::string(s) + "'");
}

/// Grid used by the fixed-size sampler ablation.
inline constexpr GridSize kFixedAblationGrid{8, 8};

struct SraConfig {
  std::size_t N = 49;       // masks (= output rows)
  std::size_t M = 128;      // sampler area budget, also the Area Embedding length
  std::size_t K = 256;      // descriptor / semantic feature width
  std::size_t P = 32;       // projected embedding channels
  std::size_t hidden = 128;  // mask-regressor trunk width
  double gamma = 50.0;
  DescriptorMode descriptor_mode = DescriptorMode::average;
  EmbeddingMode embedding_mode = EmbeddingMode::area;
  std::optional<GridSize> fixed_grid;
  bool independent_heads = false;  // N disjoint regressors instead of one shared trunk
  double norm_epsilon = 1e-5;

  void validate() const {
    if (N < 1 || K < 1 || hidden < 1 || M < 1) throw ConfigError("N, K, M, hidden must be >= 1");
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma must be positive");
    if (embedding_mode != EmbeddingMode::none && P < 1) {
      throw ConfigError("P must be >= 1 when an embedding is enabled");
    }
    if (!(norm_epsilon > 0.0)) throw ConfigError("norm epsilon must be positive");
    if (fixed_grid && (fixed_grid->h == 0 || fixed_grid->w == 0)) {
      throw ConfigError("fixed grid must be non-empty");
    }
    if (descriptor_mode == DescriptorMode::concatenation && !fixed_grid) {
      throw ConfigError(
          "concatenation descriptor needs a fixed grid; it cannot follow the dynamic sampler");
    }
    if (embedding_mode == EmbeddingMode::area && fixed_grid &&
        (fixed_grid->h > M || fixed_grid->w > M)) {
      throw ConfigError("fixed grid exceeds the Area Embedding length M");
    }
  }

  std::size_t embedding_channels() const {
    return embedding_mode == EmbeddingMode::none ? 0 : P;
  }
  std::size_t trunk_input_dim() const { return 2 * K + embedding_channels(); }
  std::size_t descriptor_input_dim(std::size_t channels) const {
    if (descriptor_mode == DescriptorMode::concatenation) {
      return channels * fixed_grid.value_or(GridSize{}).area();
    }
    return channels;
  }

  GridSize grid_for(const RoIBox& box) const {
    return fixed_grid ? *fixed_grid : dynamic_grid_size(box, M);
  }
};

inline nlohmann::json to_json(const SraConfig& c) {
  nlohmann::json j{{"N", c.N},
                   {"M", c.M},
                   {"K", c.K},
                   {"P", c.P},
                   {"hidden", c.hidden},
                   {"gamma", c.gamma},
                   {"descriptor_mode", std::string(to_string(c.descriptor_mode))},
                   {"embedding_mode", std::string(to_string(c.embedding_mode))},
                   {"independent_heads", c.independent_heads},
                   {"norm_epsilon", c.norm_epsilon}};
  j["fixed_grid"] = c.fixed_grid ? nlohmann::json{c.fixed_grid->h, c.fixed_grid->w}
                                 : nlohmann::json(nullptr);
  return j;
}

inline SraConfig sra_config_from_json(const nlohmann::json& j) {
  SraConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "N") c.N = v.get<std::size_t>();
    else if (key == "M") c.M = v.get<std::size_t>();
    else if (key == "K") c.K = v.get<std::size_t>();
    else if (key == "P") c.P = v.get<std::size_t>();
    else if (key == "hidden") c.hidden = v.get<std::size_t>();
    else if (key == "gamma") c.gamma = v.get<double>();
    else if (key == "descriptor_mode") c.descriptor_mode = parse_descriptor_mode(v.get<std::string>());
    else if (key == "embedding_mode") c.embedding_mode = parse_embedding_mode(v.get<std::string>());
    else if (key == "independent_heads") c.independent_heads = v.get<bool>();
    else if (key == "norm_epsilon") c.norm_epsilon = v.get<double>();
    else if (key == "fixed_grid") {
      if (v.is_null()) c.fixed_grid.reset();
      else c.fixed_grid = GridSize{v.at(0).get<std::size_t>(), v.at(1).get<std::size_t>()};
    } else {
      throw ConfigError("unknown SRA config key '" + key + "'");
    }
  }
  return c;
}

/// One sub-mask regressor: Norm-ReLU-Linear twice.
template <typename T>
struct MaskRegressor {
  LayerNormParams<T> trunk_norm;
  LinearParams<T> trunk_linear;
  LayerNormParams<T> head_norm;
  LinearParams<T> head_linear;
};

template <typename T>
struct SraParams {
  LinearParams<T> psi;
  LinearParams<T> semantic_conv;
  std::optional<EmbeddingProjection<T>> embed_proj;
  std::vector<MaskRegressor<T>> regressors;  // 1 shared (N outputs) or N independent (1 output)

  /// Visits every learnable tensor with a stable name.
  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    visit(*this, fn);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  /// Same structure, all tensors zero (gradient accumulators, momentum buffers).
  SraParams zeros_like() const {
    SraParams z = *this;
    z.for_each_tensor([](const std::string&, Tensor<T>& t) { t.fill(T{0}); });
    return z;
  }

 private:
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn& fn) {
    fn(std::string("psi.weight"), self.psi.weight);
    fn(std::string("psi.bias"), self.psi.bias);
    fn(std::string("semantic_conv.weight"), self.semantic_conv.weight);
    fn(std::string("semantic_conv.bias"), self.semantic_conv.bias);
    if (self.embed_proj) {
      fn(std::string("embed_proj.weight"), self.embed_proj->conv.weight);
      fn(std::string("embed_proj.bias"), self.embed_proj->conv.bias);
    }
    for (std::size_t r = 0; r < self.regressors.size(); ++r) {
      auto& reg = self.regressors[r];
      const std::string p = "regressor." + std::to_string(r) + ".";
      fn(p + "trunk_norm.gain", reg.trunk_norm.gain);
      fn(p + "trunk_norm.shift", reg.trunk_norm.shift);
      fn(p + "trunk_linear.weight", reg.trunk_linear.weight);
      fn(p + "trunk_linear.bias", reg.trunk_linear.bias);
      fn(p + "head_norm.gain", reg.head_norm.gain);
      fn(p + "head_norm.shift", reg.head_norm.shift);
      fn(p + "head_linear.weight", reg.head_linear.weight);
      fn(p + "head_linear.bias", reg.head_linear.bias);
    }
  }
};

namespace detail {

template <typename T>
LinearParams<T> fan_in_linear(std::size_t in, std::size_t out, Rng& rng) {
  auto p = LinearParams<T>::zeros(in, out);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (auto& v : p.weight.storage()) v = static_cast<T>(uniform(rng, -bound, bound));
  return p;
}

}  // namespace detail

/// Seeded init: weights ~ U(+-1/sqrt(fan_in)), biases 0, norm gain 1 / shift 0.
template <typename T>
SraParams<T> init_sra_params(const SraConfig& config, std::size_t channels, std::uint64_t seed) {
  config.validate();
  Rng rng = make_rng(seed, "sra.init");
  const T eps = static_cast<T>(config.norm_epsilon);
  SraParams<T> p;
  p.psi = detail::fan_in_linear<T>(config.descriptor_input_dim(channels), config.K, rng);
  p.semantic_conv = detail::fan_in_linear<T>(channels, config.K, rng);
  if (config.embedding_mode != EmbeddingMode::none) {
    p.embed_proj = EmbeddingProjection<T>{detail::fan_in_linear<T>(
        raw_embedding_depth(config.embedding_mode, config.M), config.P, rng)};
  }
  const std::size_t heads = config.independent_heads ? config.N : 1;
  const std::size_t outputs = config.independent_heads ? 1 : config.N;
  const std::size_t z = config.trunk_input_dim();
  for (std::size_t r = 0; r < heads; ++r) {
    MaskRegressor<T> reg;
    reg.trunk_norm = LayerNormParams<T>::identity(z, eps);
    reg.trunk_linear = detail::fan_in_linear<T>(z, config.hidden, rng);
    reg.head_norm = LayerNormParams<T>::identity(config.hidden, eps);
    reg.head_linear = detail::fan_in_linear<T>(config.hidden, outputs, rng);
    p.regressors.push_back(std::move(reg));
  }
  return p;
}

/// Closed-form learnable parameter count for `channels` input channels:
///
///   psi            K * D_in + K        (D_in = C, or C*h*w for concatenation)
///   semantic_conv  K * C + K
///   embed_proj     P * D_raw + P       (D_raw = 2 or 2M; absent for none)
///   per regressor  2Z + (Z*H + H) + 2H + (H*O + O)
///                  with Z = 2K (+P), H = hidden, O = N (shared) or 1 (x N regressors)
inline std::size_t parameter_count(const SraConfig& config, std::size_t channels) {
  config.validate();
  const std::size_t K = config.K;
  std::size_t total = K * config.descriptor_input_dim(channels) + K;
  total += K * channels + K;
  if (config.embedding_mode != EmbeddingMode::none) {
    total += config.P * raw_embedding_depth(config.embedding_mode, config.M) + config.P;
  }
  const std::size_t Z = config.trunk_input_dim();
  const std::size_t H = config.hidden;
  const std::size_t heads = config.independent_heads ? config.N : 1;
  const std::size_t O = config.independent_heads ? 1 : config.N;
  total += heads * (2 * Z + (Z * H + H) + 2 * H + (H * O + O));
  return total;
}

// ---------------------------------------------------------------------------
// component ops

/// Descriptor input statistic: flatten / per-channel max / per-channel mean.
/// For maximum mode `argmax` receives the winning position per channel.
template <typename T>
Tensor<T> descriptor_statistic(const Tensor<T>& f, DescriptorMode mode,
                               std::vector<std::size_t>* argmax = nullptr) {
  if (f.rank() != 3) throw ShapeError("roi_descriptor: pooled features must be (C,h,w)");
  const std::size_t channels = f.dim(0);
  const std::size_t area = f.dim(1) * f.dim(2);
  switch (mode) {
    case DescriptorMode::concatenation: return f.reshaped({f.size()});
    case DescriptorMode::maximum: {
      Tensor<T> stat({channels});
      if (argmax) argmax->assign(channels, 0);
      for (std::size_t c = 0; c < channels; ++c) {
        const T* fc = f.data().data() + c * area;
        std::size_t best = 0;
        for (std::size_t q = 1; q < area; ++q) {
          if (fc[q] > fc[best]) best = q;
        }
        stat[c] = fc[best];
        if (argmax) (*argmax)[c] = best;
      }
      return stat;
    }
    case DescriptorMode::average: {
      Tensor<T> stat({channels});
      for (std::size_t c = 0; c < channels; ++c) {
        const T* fc = f.data().data() + c * area;
        T s{0};
        for (std::size_t q = 0; q < area; ++q) s += fc[q];
        stat[c] = s / static_cast<T>(area);
      }
      return stat;
    }
  }
  throw ConfigError("unknown descriptor mode");
}

/// d = psi(statistic(f)), a K-vector summarising the whole RoI.
template <typename T>
Tensor<T> roi_descriptor(const Tensor<T>& f, DescriptorMode mode, const LinearParams<T>& psi) {
  return linear(descriptor_statistic(f, mode), psi);
}

/// s = 1x1 conv of the pooled features, (K,h,w).
template <typename T>
Tensor<T> semantic_feature_map(const Tensor<T>& f, const LinearParams<T>& conv) {
  return pointwise_linear(f, conv);
}

namespace detail {

template <typename T>
struct RegressorCache {
  LayerNormCache<T> norm1;
  Tensor<T> normed1;  // pre-relu
  Tensor<T> act1;
  Tensor<T> hidden;
  LayerNormCache<T> norm2;
  Tensor<T> normed2;
  Tensor<T> act2;
};

/// Rows z_q = [d, s(:,q), p(:,q)] for every grid position q, shape (hw, Z).
template <typename T>
Tensor<T> regressor_inputs(const Tensor<T>& d, const Tensor<T>& s, const Tensor<T>* p) {
  if (s.rank() != 3) throw ShapeError("mask_logits: semantic map must be (K,h,w)");
  const std::size_t K = d.size();
  const std::size_t Ks = s.dim(0);
  const std::size_t area = s.dim(1) * s.dim(2);
  const std::size_t P = p ? p->dim(0) : 0;
  if (p && (p->rank() != 3 || p->dim(1) != s.dim(1) || p->dim(2) != s.dim(2))) {
    throw ShapeError("mask_logits: embedding grid " + dims_to_string(p->dims()) +
                     " does not match semantic map " + dims_to_string(s.dims()));
  }
  const std::size_t Z = K + Ks + P;
  Tensor<T> z({area, Z});
  for (std::size_t q = 0; q < area; ++q) {
    T* row = z.data().data() + q * Z;
    for (std::size_t i = 0; i < K; ++i) row[i] = d[i];
    for (std::size_t i = 0; i < Ks; ++i) row[K + i] = s[i * area + q];
    for (std::size_t i = 0; i < P; ++i) row[K + Ks + i] = (*p)[i * area + q];
  }
  return z;
}

template <typename T>
Tensor<T> regressor_forward(const Tensor<T>& z, const MaskRegressor<T>& reg,
                            RegressorCache<T>* cache) {
  if (z.dim(1) != reg.trunk_norm.dim()) {
    throw ShapeError("mask_logits: regressor input dim " + std::to_string(z.dim(1)) +
                     " vs trunk dim " + std::to_string(reg.trunk_norm.dim()));
  }
  LayerNormCache<T> c1;
  LayerNormCache<T> c2;
  Tensor<T> n1 = layer_norm(z, reg.trunk_norm, cache ? &c1 : nullptr);
  Tensor<T> a1 = relu(n1);
  Tensor<T> h = linear(a1, reg.trunk_linear);
  Tensor<T> n2 = layer_norm(h, reg.head_norm, cache ? &c2 : nullptr);
  Tensor<T> a2 = relu(n2);
  Tensor<T> out = linear(a2, reg.head_linear);
  if (cache) {
    *cache = {std::move(c1), std::move(n1), std::move(a1), std::move(h),
              std::move(c2), std::move(n2), std::move(a2)};
  }
  return out;
}

/// Returns dz (hw, Z); accumulates parameter grads.
template <typename T>
Tensor<T> regressor_backward(const RegressorCache<T>& cache, const MaskRegressor<T>& reg,
                             const Tensor<T>& dout, MaskRegressor<T>& grads) {
  Tensor<T> da2 = linear_backward(cache.act2, reg.head_linear, dout, grads.head_linear);
  Tensor<T> dn2 = relu_backward(cache.normed2, da2);
  Tensor<T> dh = layer_norm_backward(cache.norm2, reg.head_norm, dn2, grads.head_norm);
  Tensor<T> da1 = linear_backward(cache.act1, reg.trunk_linear, dh, grads.trunk_linear);
  Tensor<T> dn1 = relu_backward(cache.normed1, da1);
  return layer_norm_backward(cache.norm1, reg.trunk_norm, dn1, grads.trunk_norm);
}

}  // namespace detail

/// Per-position mask logits (N,h,w) from descriptor d, semantic map s and the
/// optional projected embedding p.
template <typename T>
Tensor<T> mask_logits(const Tensor<T>& d, const Tensor<T>& s,
                      const std::type_identity_t<Tensor<T>>* p,
                      const SraParams<T>& params, std::size_t N,
                      std::vector<detail::RegressorCache<T>>* caches = nullptr,
                      Tensor<T>* z_out = nullptr) {
  Tensor<T> z = detail::regressor_inputs(d, s, p);
  const std::size_t area = z.dim(0);
  const std::size_t h = s.dim(1);
  const std::size_t w = s.dim(2);
  Tensor<T> logits({N, h, w});
  if (caches) caches->assign(params.regressors.size(), {});
  std::size_t col0 = 0;
  for (std::size_t r = 0; r < params.regressors.size(); ++r) {
    const auto out = detail::regressor_forward(z, params.regressors[r],
                                               caches ? &(*caches)[r] : nullptr);
    const std::size_t outs = out.dim(1);
    if (col0 + outs > N) throw ShapeError("mask_logits: regressors emit more than N outputs");
    for (std::size_t q = 0; q < area; ++q) {
      for (std::size_t o = 0; o < outs; ++o) logits[(col0 + o) * area + q] = out(q, o);
    }
    col0 += outs;
  }
  if (col0 != N) throw ShapeError("mask_logits: regressors emit " + std::to_string(col0) +
                                  " outputs, expected N=" + std::to_string(N));
  if (z_out) *z_out = std::move(z);
  return logits;
}

template <typename T>
Tensor<T> masks_from_logits(const Tensor<T>& logits, T gamma) {
  return softmax_spatial(logits, gamma);
}

/// y(n,c) = sum_q f(c,q) m(n,q).
template <typename T>
Tensor<T> sample_roi_feature(const Tensor<T>& f, const Tensor<T>& masks) {
  if (f.rank() != 3 || masks.rank() != 3 || f.dim(1) != masks.dim(1) ||
      f.dim(2) != masks.dim(2)) {
    throw ShapeError("sample_roi_feature: features " + dims_to_string(f.dims()) +
                     " vs masks " + dims_to_string(masks.dims()));
  }
  const std::size_t C = f.dim(0);
  const std::size_t N = masks.dim(0);
  const std::size_t area = f.dim(1) * f.dim(2);
  Tensor<T> y({N, C});
  for (std::size_t n = 0; n < N; ++n) {
    const T* m = masks.data().data() + n * area;
    for (std::size_t c = 0; c < C; ++c) {
      const T* fc = f.data().data() + c * area;
      T acc{0};
      for (std::size_t q = 0; q < area; ++q) acc += fc[q] * m[q];
      y(n, c) = acc;
    }
  }
  return y;
}

/// Cotangents of y w.r.t. (f, masks).
template <typename T>
void sample_roi_feature_backward(const Tensor<T>& f, const Tensor<T>& masks, const Tensor<T>& dy,
                                 Tensor<T>* df, Tensor<T>* dmasks) {
  const std::size_t C = f.dim(0);
  const std::size_t N = masks.dim(0);
  const std::size_t area = f.dim(1) * f.dim(2);
  if (dy.size() != N * C) throw ShapeError("sample_roi_feature_backward: cotangent mismatch");
  if (df) *df = Tensor<T>(f.dims());
  if (dmasks) *dmasks = Tensor<T>(masks.dims());
  for (std::size_t n = 0; n < N; ++n) {
    const T* m = masks.data().data() + n * area;
    for (std::size_t c = 0; c < C; ++c) {
      const T g = dy(n, c);
      if (g == T{0}) continue;
      const T* fc = f.data().data() + c * area;
      if (df) {
        T* dfc = df->data().data() + c * area;
        for (std::size_t q = 0; q < area; ++q) dfc[q] += g * m[q];
      }
      if (dmasks) {
        T* dm = dmasks->data().data() + n * area;
        for (std::size_t q = 0; q < area; ++q) dm[q] += g * fc[q];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// full extractor

/// Forward activations kept for the backward pass.
template <typename T>
struct SraForwardState {
  bool recorded = false;
  RoIBox box;
  GridSize grid;
  Dims feature_map_dims;  // empty when started from a pooled map
  Tensor<T> pooled;     // f, (C,h,w)
  Tensor<T> statistic;  // descriptor input
  std::vector<std::size_t> argmax;
  Tensor<T> descriptor;  // d, (K)
  Tensor<T> semantic;    // s, (K,h,w)
  std::optional<Tensor<T>> raw_embedding;
  std::optional<Tensor<T>> embedding;  // p, (P,h,w)
  Tensor<T> regressor_input;           // (hw, Z)
  std::vector<detail::RegressorCache<T>> regressor_caches;
  Tensor<T> logits;  // (N,h,w)
  Tensor<T> masks;   // (N,h,w)
  Tensor<T> feature;  // y, (N,C)
};

template <typename T>
struct SraOutput {
  Tensor<T> feature;  // (N,C)
  Tensor<T> masks;    // (N,h,w)
  GridSize grid;
};

/// Everything downstream of the sampler, starting from a pooled map f (C,h,w).
template <typename T>
SraForwardState<T> sra_forward_pooled(Tensor<T> f, const SraParams<T>& params,
                                      const SraConfig& config, bool record = true) {
  config.validate();
  if (f.rank() != 3) throw ShapeError("sra: pooled features must be (C,h,w)");
  SraForwardState<T> st;
  st.grid = GridSize{f.dim(1), f.dim(2)};
  st.pooled = std::move(f);
  const std::size_t channels = st.pooled.dim(0);
  if (params.psi.in_dim() != config.descriptor_input_dim(channels) ||
      (config.descriptor_mode == DescriptorMode::concatenation &&
       params.psi.in_dim() != st.pooled.size())) {
    throw ShapeError("sra: psi in_dim " + std::to_string(params.psi.in_dim()) +
                     " does not match descriptor input for pooled map " +
                     dims_to_string(st.pooled.dims()));
  }
  st.statistic = descriptor_statistic(st.pooled, config.descriptor_mode, &st.argmax);
  st.descriptor = linear(st.statistic, params.psi);
  st.semantic = semantic_feature_map(st.pooled, params.semantic_conv);
  const Tensor<T>* p = nullptr;
  if (config.embedding_mode != EmbeddingMode::none) {
    if (!params.embed_proj) throw ShapeError("sra: embedding enabled but no projection params");
    st.raw_embedding = raw_embedding<T>(config.embedding_mode, st.grid, config.M);
    st.embedding = project_embedding(*st.raw_embedding, *params.embed_proj);
    p = &*st.embedding;
  }
  st.logits = mask_logits(st.descriptor, st.semantic, p, params, config.N,
                          record ? &st.regressor_caches : nullptr,
                          record ? &st.regressor_input : nullptr);
  st.masks = masks_from_logits(st.logits, static_cast<T>(config.gamma));
  st.feature = sample_roi_feature(st.pooled, st.masks);
  st.recorded = record;
  return st;
}

/// Full extractor forward: sampler grid, block pooling, then the mask path.
template <typename T>
SraForwardState<T> sra_forward(const Tensor<T>& F, const RoIBox& box, const SraParams<T>& params,
                               const SraConfig& config, bool record = true) {
  config.validate();
  if (F.rank() != 3) throw ShapeError("sra: feature map must be (C,H,W)");
  box.require_valid();
  const GridSize grid = config.grid_for(box);
  auto st = sra_forward_pooled(block_average_pool(F, box, grid), params, config, record);
  st.box = box;
  st.feature_map_dims = F.dims();
  return st;
}

template <typename T>
SraOutput<T> sra_extract(const Tensor<T>& F, const RoIBox& box, const SraParams<T>& params,
                         const SraConfig& config) {
  auto st = sra_forward(F, box, params, config, false);
  return {std::move(st.feature), std::move(st.masks), st.grid};
}

struct SraBackwardOptions {
  bool input_gradient = true;  // also produce dF
  bool detach_masks = false;   // treat masks as constants (diagnostics only)
};

template <typename T>
struct SraGradients {
  SraParams<T> params;
  std::optional<Tensor<T>> feature_map;  // dF, (C,H,W)
  Tensor<T> pooled;                       // df, (C,h,w)
};

template <typename T>
SraGradients<T> sra_backward(const Tensor<T>& cotangent, const SraForwardState<T>& st,
                             const SraParams<T>& params, const SraConfig& config,
                             const SraBackwardOptions& options = {}) {
  if (!st.recorded) throw UsageError("sra_backward: forward state was not recorded");
  if (cotangent.dims() != st.feature.dims()) {
    throw ShapeError("sra_backward: cotangent " + dims_to_string(cotangent.dims()) +
                     " vs feature " + dims_to_string(st.feature.dims()));
  }
  SraGradients<T> g{params.zeros_like(), std::nullopt, {}};
  Tensor<T> df;
  Tensor<T> dmasks;
  sample_roi_feature_backward(st.pooled, st.masks, cotangent, &df,
                              options.detach_masks ? nullptr : &dmasks);

  if (!options.detach_masks) {
    const Tensor<T> dlogits =
        softmax_spatial_backward(st.masks, dmasks, static_cast<T>(config.gamma));
    const std::size_t area = st.grid.area();
    const std::size_t Z = st.regressor_input.dim(1);
    Tensor<T> dz({area, Z});
    std::size_t col0 = 0;
    for (std::size_t r = 0; r < params.regressors.size(); ++r) {
      const auto& reg = params.regressors[r];
      const std::size_t outs = reg.head_linear.out_dim();
      Tensor<T> dout({area, outs});
      for (std::size_t q = 0; q < area; ++q) {
        for (std::size_t o = 0; o < outs; ++o) dout(q, o) = dlogits[(col0 + o) * area + q];
      }
      col0 += outs;
      const Tensor<T> dzr =
          detail::regressor_backward(st.regressor_caches[r], reg, dout, g.params.regressors[r]);
      dz += dzr;
    }

    // split dz rows back into d, s, p
    const std::size_t K = st.descriptor.size();
    const std::size_t Ks = st.semantic.dim(0);
    const std::size_t P = st.embedding ? st.embedding->dim(0) : 0;
    Tensor<T> dd({K});
    Tensor<T> ds(st.semantic.dims());
    std::optional<Tensor<T>> dp;
    if (P) dp.emplace(st.embedding->dims());
    for (std::size_t q = 0; q < area; ++q) {
      const T* row = dz.data().data() + q * Z;
      for (std::size_t i = 0; i < K; ++i) dd[i] += row[i];
      for (std::size_t i = 0; i < Ks; ++i) ds[i * area + q] = row[K + i];
      for (std::size_t i = 0; i < P; ++i) (*dp)[i * area + q] = row[K + Ks + i];
    }

    if (dp) {
      // raw embedding is constant; only the projection learns
      pointwise_linear_backward(*st.raw_embedding, params.embed_proj->conv, *dp,
                                g.params.embed_proj->conv);
    }
    df += pointwise_linear_backward(st.pooled, params.semantic_conv, ds, g.params.semantic_conv);

    const Tensor<T> dstat = linear_backward(st.statistic, params.psi, dd, g.params.psi);
    const std::size_t C = st.pooled.dim(0);
    switch (config.descriptor_mode) {
      case DescriptorMode::concatenation:
        for (std::size_t i = 0; i < df.size(); ++i) df[i] += dstat[i];
        break;
      case DescriptorMode::maximum:
        for (std::size_t c = 0; c < C; ++c) df[c * area + st.argmax[c]] += dstat[c];
        break;
      case DescriptorMode::average: {
        const T inv = T{1} / static_cast<T>(area);
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t q = 0; q < area; ++q) df[c * area + q] += dstat[c] * inv;
        }
        break;
      }
    }
  }

  if (options.input_gradient && !st.feature_map_dims.empty()) {
    Tensor<T> dF(st.feature_map_dims);
    block_average_pool_backward(st.box, st.grid, df, dF);
    g.feature_map = std::move(dF);
  }
  g.pooled = std::move(df);
  return g;
}

// ---------------------------------------------------------------------------
// checkpoints

inline constexpr std::string_view kCheckpointFormat = "sra-checkpoint/v1";

template <typename T>
nlohmann::json checkpoint_to_json(const SraParams<T>& params, const SraConfig& config,
                                  std::size_t channels) {
  nlohmann::json tensors = nlohmann::json::array();
  params.for_each_tensor([&](const std::string& name, const Tensor<T>& t) {
    auto entry = to_tjson(t);
    entry["name"] = name;
    tensors.push_back(std::move(entry));
  });
  return {{"format", kCheckpointFormat},
          {"channels", channels},
          {"config", to_json(config)},
          {"tensors", std::move(tensors)}};
}

template <typename T>
struct Checkpoint {
  SraConfig config;
  std::size_t channels = 0;
  SraParams<T> params;
};

template <typename T>
Checkpoint<T> checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != kCheckpointFormat) {
    throw UsageError("checkpoint: expected format tag " + std::string(kCheckpointFormat));
  }
  Checkpoint<T> ck;
  ck.config = sra_config_from_json(j.at("config"));
  ck.channels = j.at("channels").get<std::size_t>();
  ck.params = init_sra_params<T>(ck.config, ck.channels, 0);
  std::size_t matched = 0;
  const auto& tensors = j.at("tensors");
  ck.params.for_each_tensor([&](const std::string& name, Tensor<T>& t) {
    for (const auto& entry : tensors) {
      if (entry.at("name").get<std::string>() != name) continue;
      auto loaded = from_tjson<T>(entry);
      if (loaded.dims() != t.dims()) {
        throw ShapeError("checkpoint tensor " + name + " has dims " +
                         dims_to_string(loaded.dims()) + ", expected " + dims_to_string(t.dims()));
      }
      t = std::move(loaded);
      ++matched;
      return;
    }
    throw ShapeError("checkpoint is missing tensor " + name);
  });
  if (matched != tensors.size()) throw ShapeError("checkpoint has unexpected extra tensors");
  return ck;
}

}  // namespace sra
