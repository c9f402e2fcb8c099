#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "sra/harness/extractors.hpp"
#include "sra/harness/synthetic.hpp"

namespace sra::harness {

// ---------------------------------------------------------------------------
// transformation families

enum class FamilyKind { identity, rotation, reflection, scale_pan };

inline std::string_view to_string(FamilyKind k) {
  switch (k) {
    case FamilyKind::identity: return "identity";
    case FamilyKind::rotation: return "rotation";
    case FamilyKind::reflection: return "reflection";
    case FamilyKind::scale_pan: return "scale_pan";
  }
  return "?";
}

inline FamilyKind parse_family(std::string_view s) {
  if (s == "identity") return FamilyKind::identity;
  if (s == "rotation") return FamilyKind::rotation;
  if (s == "reflection") return FamilyKind::reflection;
  if (s == "scale_pan" || s == "scale-pan") return FamilyKind::scale_pan;
  throw ConfigError("unknown transform family '" + std::string(s) + "'");
}

struct TransformFamily {
  FamilyKind kind = FamilyKind::identity;
  double max_rotation_deg = 45.0;  // rotation ~ U(-max, max)
  double min_scale = 0.8;          // scale ~ U(min, max)
  double max_scale = 1.25;
  double max_pan = 0.1;  // pan ~ U(-max, max) of the box side

  Pose sample(Rng& rng) const {
    Pose d;
    switch (kind) {
      case FamilyKind::identity: break;
      case FamilyKind::rotation:
        d.rotation_deg = max_rotation_deg > 0 ? uniform(rng, -max_rotation_deg, max_rotation_deg) : 0.0;
        break;
      case FamilyKind::reflection: d.reflected = true; break;
      case FamilyKind::scale_pan:
        d.scale = uniform(rng, min_scale, max_scale);
        d.pan_x = uniform(rng, -max_pan, max_pan);
        d.pan_y = uniform(rng, -max_pan, max_pan);
        break;
    }
    return d;
  }
};

inline TransformFamily family(FamilyKind k) {
  TransformFamily f;
  f.kind = k;
  return f;
}

// ---------------------------------------------------------------------------
// invariance

struct InvarianceReport {
  std::string extractor;
  std::string family;
  std::size_t samples = 0;
  double mean_cosine = 0.0;
  double min_cosine = 1.0;
  double max_cosine = -1.0;
};

/// Mean cosine between flattened features before and after a random
/// transform from `fam`, cycling over the dataset.
inline InvarianceReport invariance_eval(const Extractor& e, const std::vector<SyntheticInstance>& data,
                                        const TransformFamily& fam, std::size_t n_samples,
                                        std::uint64_t seed) {
  if (data.empty()) throw UsageError("invariance_eval: empty dataset");
  if (n_samples == 0) throw UsageError("invariance_eval: n_samples must be >= 1");
  InvarianceReport r{std::string(to_string(e.kind)), std::string(to_string(fam.kind)), n_samples};
  Rng rng = make_rng(seed, "invariance.deltas");
  double sum = 0.0;
  for (std::size_t i = 0; i < n_samples; ++i) {
    const auto& inst = data[i % data.size()];
    const Pose delta = fam.sample(rng);
    const auto moved = apply_transform(inst, delta);
    const auto a = extract(e, inst.feature_map, inst.box);
    const auto b = extract(e, moved.feature_map, moved.box);
    const double c = cosine_similarity(a.data(), b.data());
    sum += c;
    r.min_cosine = std::min(r.min_cosine, c);
    r.max_cosine = std::max(r.max_cosine, c);
  }
  r.mean_cosine = sum / static_cast<double>(n_samples);
  return r;
}

// ---------------------------------------------------------------------------
// mask diversity

struct DiversityReport {
  Tensor<double> similarity;  // (N,N) mean pairwise cosine, diagonal 1
  double threshold = 0.3;
  double fraction_below = 0.0;  // over off-diagonal entries of the mean matrix
  std::size_t samples = 0;
};

/// Accumulates the pairwise cosine matrix of flattened mask slices over a set
/// of (N,h,w) mask tensors.
inline DiversityReport diversity_from_masks(const std::vector<Tensor<double>>& masks, double threshold = 0.3) {
  if (masks.empty()) throw UsageError("mask diversity: no mask sets");
  const std::size_t N = masks.front().dim(0);
  if (N < 2) throw ConfigError("mask diversity needs N >= 2");
  DiversityReport r;
  r.threshold = threshold;
  r.samples = masks.size();
  r.similarity = Tensor<double>({N, N});
  for (const auto& m : masks) {
    if (m.rank() != 3 || m.dim(0) != N) throw ShapeError("mask diversity: inconsistent mask sets");
    const std::size_t area = m.dim(1) * m.dim(2);
    for (std::size_t a = 0; a < N; ++a) {
      const std::span<const double> sa(m.data().data() + a * area, area);
      for (std::size_t b = a + 1; b < N; ++b) {
        const double c = cosine_similarity(sa, std::span<const double>(m.data().data() + b * area, area));
        r.similarity(a, b) += c;
        r.similarity(b, a) += c;
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(masks.size());
  std::size_t below = 0;
  for (std::size_t a = 0; a < N; ++a) {
    for (std::size_t b = 0; b < N; ++b) {
      if (a == b) {
        r.similarity(a, b) = 1.0;
        continue;
      }
      r.similarity(a, b) *= inv;
      if (r.similarity(a, b) < threshold) ++below;
    }
  }
  r.fraction_below = static_cast<double>(below) / static_cast<double>(N * (N - 1));
  return r;
}

inline DiversityReport mask_diversity(const SraParams<double>& params, const SraConfig& config,
                                      const std::vector<SyntheticInstance>& data, std::size_t n_samples,
                                      double threshold = 0.3) {
  if (data.empty()) throw UsageError("mask_diversity: empty dataset");
  if (config.N < 2) throw ConfigError("mask diversity needs N >= 2");
  std::vector<Tensor<double>> masks;
  masks.reserve(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const auto& inst = data[i % data.size()];
    masks.push_back(sra_extract(inst.feature_map, inst.box, params, config).masks);
  }
  return diversity_from_masks(masks, threshold);
}

// ---------------------------------------------------------------------------
// analytic cost

/// Multiply-add counts for one SRA forward. Position-wise terms scale with
/// the grid area; `descriptor` (the psi projection) does not.
struct FlopsBreakdown {
  std::uint64_t pool = 0;                  // 4 bilinear samples x 4 taps per cell and channel
  std::uint64_t descriptor_statistic = 0;  // reduction of f to the descriptor input
  std::uint64_t descriptor = 0;            // psi
  std::uint64_t semantic = 0;
  std::uint64_t embedding = 0;
  std::uint64_t regressor = 0;  // both linear layers
  std::uint64_t norms = 0;      // 2 passes per normalized element
  std::uint64_t softmax = 0;
  std::uint64_t weighted_sum = 0;  // y = sum f m

  std::uint64_t total() const {
    return pool + descriptor_statistic + descriptor + semantic + embedding + regressor + norms +
           softmax + weighted_sum;
  }
  std::uint64_t per_rois(std::uint64_t rois = 300) const { return rois * total(); }
};

inline FlopsBreakdown flops_estimate(const SraConfig& config, std::size_t channels, GridSize grid) {
  config.validate();
  using u64 = std::uint64_t;
  const u64 C = channels, hw = grid.area(), K = config.K, N = config.N, H = config.hidden;
  const u64 Z = config.trunk_input_dim();
  const u64 raw = raw_embedding_depth(config.embedding_mode, config.M);
  const u64 P = config.embedding_channels();
  FlopsBreakdown f;
  f.pool = 16 * C * hw;
  if (config.descriptor_mode == DescriptorMode::concatenation) {
    f.descriptor = C * hw * K;
  } else {
    f.descriptor_statistic = C * hw;
    f.descriptor = C * K;
  }
  f.semantic = hw * C * K;
  f.embedding = hw * raw * P;
  const u64 heads = config.independent_heads ? N : 1;
  const u64 outs = config.independent_heads ? 1 : N;
  f.regressor = heads * hw * (Z * H + H * outs);
  f.norms = heads * 2 * hw * (Z + H);
  f.softmax = N * hw;
  f.weighted_sum = N * C * hw;
  return f;
}

inline nlohmann::json to_json(const FlopsBreakdown& f) {
  return {{"pool", f.pool},           {"descriptor_statistic", f.descriptor_statistic},
          {"descriptor", f.descriptor}, {"semantic", f.semantic},
          {"embedding", f.embedding}, {"regressor", f.regressor},
          {"norms", f.norms},         {"softmax", f.softmax},
          {"weighted_sum", f.weighted_sum}, {"total", f.total()},
          {"per_300_rois", f.per_rois(300)}};
}

}  // namespace sra::harness
