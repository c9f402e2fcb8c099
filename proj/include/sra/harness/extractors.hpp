#pragma once

#include <optional>
#include <string_view>
#include <vector>

#include "sra/baselines.hpp"
#include "sra/sra.hpp"

namespace sra::harness {

enum class ExtractorKind { sra, roi_align, roi_pool };

inline std::string_view to_string(ExtractorKind k) {
  switch (k) {
    case ExtractorKind::sra: return "sra";
    case ExtractorKind::roi_align: return "roi_align";
    case ExtractorKind::roi_pool: return "roi_pool";
  }
  return "?";
}

inline ExtractorKind parse_extractor_kind(std::string_view s) {
  if (s == "sra") return ExtractorKind::sra;
  if (s == "roi_align") return ExtractorKind::roi_align;
  if (s == "roi_pool") return ExtractorKind::roi_pool;
  throw ConfigError("unknown extractor '" + std::string(s) + "' (sra|roi_align|roi_pool)");
}

/// A frozen RoI feature extractor. Baselines ignore `config` and `params`.
struct Extractor {
  ExtractorKind kind = ExtractorKind::roi_align;
  SraConfig config;
  std::optional<SraParams<double>> params;
  GridSize baseline_grid = kBaselineGrid;

  static Extractor sra(SraConfig config, SraParams<double> params) {
    return {ExtractorKind::sra, std::move(config), std::move(params), kBaselineGrid};
  }
  static Extractor baseline(ExtractorKind kind, GridSize grid = kBaselineGrid) {
    if (kind == ExtractorKind::sra) throw UsageError("Extractor::baseline: kind must be a baseline");
    return {kind, SraConfig{}, std::nullopt, grid};
  }

  std::size_t feature_length(std::size_t channels) const {
    return kind == ExtractorKind::sra ? config.N * channels : baseline_grid.area() * channels;
  }
};

/// The flattened RoI feature: y (N,C) for SRA, (h,w,C) grids for the baselines.
inline Tensor<double> extract(const Extractor& e, const Tensor<double>& F, const RoIBox& box) {
  switch (e.kind) {
    case ExtractorKind::sra:
      if (!e.params) throw UsageError("extract: SRA extractor has no parameters");
      return sra_extract(F, box, *e.params, e.config).feature;
    case ExtractorKind::roi_align: return roi_align(F, box, e.baseline_grid);
    case ExtractorKind::roi_pool: return roi_pool(F, box, e.baseline_grid);
  }
  throw UsageError("extract: unknown extractor");
}

}  // namespace sra::harness
