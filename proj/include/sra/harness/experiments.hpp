#pragma once

// The SRA-vs-RoI-Align comparison shared by the CLI and the acceptance run:
// one dataset per seed, both heads trained on the same split, then accuracy
// on the rotated test split, rotation invariance and mask diversity.

#include <chrono>
#include <optional>
#include <vector>

#include <json.hpp>

#include "sra/harness/evaluation.hpp"
#include "sra/harness/training.hpp"

namespace sra::harness {

struct ToyExperimentConfig {
  DatasetOptions dataset;
  double test_fraction = 0.25;
  double test_rotation_deg = 180.0;  // test split rotation ~ U(-a, a)
  TrainConfig train;                 // kind is set per head
  TransformFamily invariance = [] {
    TransformFamily f;
    f.kind = FamilyKind::rotation;
    return f;
  }();
  std::size_t invariance_samples = 200;
  std::size_t diversity_samples = 100;
  double diversity_threshold = 0.3;

  TransformFamily test_family() const {
    TransformFamily f;
    f.kind = FamilyKind::rotation;
    f.max_rotation_deg = test_rotation_deg;
    return f;
  }
};

struct HeadResult {
  ExtractorKind kind = ExtractorKind::sra;
  std::vector<EpochStats> curve;
  double test_accuracy = 0.0;
  InvarianceReport invariance;
  std::optional<DiversityReport> diversity;
  double seconds = 0.0;
  TrainState state;
};

struct ToyComparison {
  std::uint64_t seed = 0;
  HeadResult sra;
  HeadResult roi_align;
  double margin() const { return sra.test_accuracy - roi_align.test_accuracy; }
};

inline std::vector<SyntheticInstance> held_out(const ToySplit& s) {
  return {s.dataset.instances.begin() + static_cast<long>(s.train.size()), s.dataset.instances.end()};
}

inline HeadResult train_head(const ToyExperimentConfig& cfg, const ToySplit& split, ExtractorKind kind,
                             std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainConfig tc = cfg.train;
  tc.kind = kind;
  tc.seed = derive_seed(seed, "toy.train");
  auto tr = train_toy(tc, split.train, split.test);
  HeadResult h;
  h.kind = kind;
  h.curve = tr.curve;
  h.test_accuracy = tr.curve.empty() ? 0.0 : tr.curve.back().test_accuracy;
  const auto extractor = tr.state.extractor(tc);
  const auto reference = held_out(split);
  h.invariance = invariance_eval(extractor, reference, cfg.invariance, cfg.invariance_samples,
                                 derive_seed(seed, "toy.invariance"));
  if (kind == ExtractorKind::sra && tc.sra.N >= 2) {
    h.diversity = mask_diversity(*tr.state.sra, tc.sra, reference, cfg.diversity_samples, cfg.diversity_threshold);
  }
  h.state = std::move(tr.state);
  h.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return h;
}

inline ToyComparison run_toy_comparison(const ToyExperimentConfig& cfg, std::uint64_t seed) {
  const auto split = make_toy_split(cfg.dataset, cfg.test_fraction, cfg.test_family(), seed);
  ToyComparison c;
  c.seed = seed;
  c.sra = train_head(cfg, split, ExtractorKind::sra, seed);
  c.roi_align = train_head(cfg, split, ExtractorKind::roi_align, seed);
  return c;
}

// ---------------------------------------------------------------------------
// report fragments

inline nlohmann::json to_json(const EpochStats& e) {
  return {{"epoch", e.epoch},
          {"train_loss", e.train_loss},
          {"train_accuracy", e.train_accuracy},
          {"test_loss", e.test_loss},
          {"test_accuracy", e.test_accuracy}};
}

inline nlohmann::json to_json(const InvarianceReport& r) {
  return {{"extractor", r.extractor},       {"family", r.family},         {"samples", r.samples},
          {"mean_cosine", r.mean_cosine}, {"min_cosine", r.min_cosine}, {"max_cosine", r.max_cosine}};
}

inline nlohmann::json to_json(const DiversityReport& r) {
  nlohmann::json m = nlohmann::json::array();
  for (std::size_t a = 0; a < r.similarity.dim(0); ++a) {
    std::vector<double> row(r.similarity.dim(1));
    for (std::size_t b = 0; b < row.size(); ++b) row[b] = r.similarity(a, b);
    m.push_back(row);
  }
  return {{"threshold", r.threshold}, {"fraction_below", r.fraction_below}, {"samples", r.samples},
          {"similarity", m}};
}

inline nlohmann::json to_json(const HeadResult& h) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& e : h.curve) curve.push_back(to_json(e));
  nlohmann::json j{{"extractor", to_string(h.kind)}, {"test_accuracy", h.test_accuracy},
                   {"invariance", to_json(h.invariance)}, {"seconds", h.seconds}, {"curve", curve}};
  if (h.diversity) j["diversity"] = to_json(*h.diversity);
  return j;
}

inline nlohmann::json to_json(const ToyComparison& c) {
  return {{"seed", c.seed}, {"margin", c.margin()}, {"sra", to_json(c.sra)}, {"roi_align", to_json(c.roi_align)}};
}

}  // namespace sra::harness
