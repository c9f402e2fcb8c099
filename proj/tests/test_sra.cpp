#include <algorithm>
#include <numeric>

#include <gtest/gtest.h>

#include "sra/sra.hpp"
#include "sra/testing/oracles.hpp"

namespace sra {
namespace {

using namespace sra::testing;
using Td = Tensor<double>;

SraConfig tiny_config(EmbeddingMode embed = EmbeddingMode::none,
                      DescriptorMode desc = DescriptorMode::average) {
  SraConfig c;
  c.N = 5;
  c.K = 6;
  c.P = 3;
  c.hidden = 7;
  c.M = 24;
  c.embedding_mode = embed;
  c.descriptor_mode = desc;
  if (desc == DescriptorMode::concatenation) c.fixed_grid = GridSize{3, 4};
  return c;
}

void zero_regressors(SraParams<double>& p) {
  for (auto& reg : p.regressors) {
    reg.trunk_linear.weight.fill(0);
    reg.trunk_linear.bias.fill(0);
    reg.head_linear.weight.fill(0);
    reg.head_linear.bias.fill(0);
  }
}

// ---------------------------------------------------------------------------
// roi_descriptor / semantic_feature_map

TEST(RoiDescriptor, AverageOfConstantChannels) {
  Td f({2, 3, 3});
  for (std::size_t q = 0; q < 9; ++q) {
    f[q] = 1.5;
    f[9 + q] = -2.0;
  }
  Rng rng(1);
  const auto psi = random_linear(2, 4, rng);
  EXPECT_LT(max_abs_diff(roi_descriptor(f, DescriptorMode::average, psi),
                         linear(Td::vector({1.5, -2.0}), psi)),
            1e-14);
}

TEST(RoiDescriptor, MaximumEqualsAverageOnSinglePosition) {
  Rng rng(2);
  const auto f = random_tensor({4, 1, 1}, rng);
  const auto psi = random_linear(4, 3, rng);
  EXPECT_EQ(roi_descriptor(f, DescriptorMode::maximum, psi),
            roi_descriptor(f, DescriptorMode::average, psi));
}

TEST(RoiDescriptor, AverageMatchesNaiveLoop) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = random_tensor({5, 4, 6}, rng);
    const auto psi = random_linear(5, 8, rng);
    EXPECT_LT(max_abs_diff(roi_descriptor(f, DescriptorMode::average, psi),
                           naive_average_descriptor(f, psi)),
              1e-12);
  }
}

TEST(RoiDescriptor, ConcatenationNeedsFixedGrid) {
  SraConfig c = tiny_config();
  c.descriptor_mode = DescriptorMode::concatenation;
  c.fixed_grid.reset();
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(init_sra_params<double>(c, 4, 0), ConfigError);
  c.fixed_grid = kFixedAblationGrid;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.descriptor_input_dim(4), 4u * 64u);
}

TEST(SemanticFeatureMap, IdentityZeroAndOracle) {
  Rng rng(4);
  const auto f = random_tensor({3, 2, 5}, rng);
  LinearParams<double> ident{Td::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}), Td({3})};
  EXPECT_EQ(semantic_feature_map(f, ident), f);

  LinearParams<double> zero{Td({2, 3}), Td::vector({0.25, -4})};
  const auto s = semantic_feature_map(f, zero);
  for (std::size_t q = 0; q < 10; ++q) {
    EXPECT_EQ(s[q], 0.25);
    EXPECT_EQ(s[10 + q], -4.0);
  }
  const auto conv = random_linear(3, 6, rng);
  EXPECT_LT(max_abs_diff(semantic_feature_map(f, conv), naive_pointwise(f, conv)), 1e-12);
  EXPECT_THROW(semantic_feature_map(f, random_linear(4, 6, rng)), ShapeError);
}

// ---------------------------------------------------------------------------
// mask_logits / masks_from_logits

TEST(MaskLogits, ZeroWeightsGiveZeroLogits) {
  const auto c = tiny_config();
  auto params = init_sra_params<double>(c, 4, 5);
  zero_regressors(params);
  Rng rng(5);
  const auto d = random_tensor({c.K}, rng);
  const auto s = random_tensor({c.K, 3, 4}, rng);
  const auto logits = mask_logits(d, s, nullptr, params, c.N);
  for (double v : logits.storage()) EXPECT_EQ(v, 0.0);
}

TEST(MaskLogits, SpatialPermutationPermutesLogits) {
  const auto c = tiny_config();
  const auto params = random_sra_params(c, 4, 6);
  Rng rng(6);
  const auto d = random_tensor({c.K}, rng);
  const auto s = random_tensor({c.K, 3, 4}, rng);
  std::vector<std::size_t> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Td sp(s.dims());
  for (std::size_t k = 0; k < c.K; ++k) {
    for (std::size_t q = 0; q < 12; ++q) sp[k * 12 + perm[q]] = s[k * 12 + q];
  }
  const auto a = mask_logits(d, s, nullptr, params, c.N);
  const auto b = mask_logits(d, sp, nullptr, params, c.N);
  for (std::size_t n = 0; n < c.N; ++n) {
    for (std::size_t q = 0; q < 12; ++q) EXPECT_EQ(b[n * 12 + perm[q]], a[n * 12 + q]);
  }
}

TEST(MaskLogits, MatchesPositionLoopOracle) {
  for (bool independent : {false, true}) {
    for (auto embed : {EmbeddingMode::none, EmbeddingMode::position}) {
      auto c = tiny_config(embed);
      c.independent_heads = independent;
      const auto params = random_sra_params(c, 4, 7);
      Rng rng(7);
      const auto d = random_tensor({c.K}, rng);
      const auto s = random_tensor({c.K, 3, 4}, rng);
      const auto p = random_tensor({c.P, 3, 4}, rng);
      const Td* pp = embed == EmbeddingMode::none ? nullptr : &p;
      EXPECT_LT(max_abs_diff(mask_logits(d, s, pp, params, c.N),
                             naive_mask_logits(d, s, pp, params, c.N)),
                1e-10);
    }
  }
}

TEST(MasksFromLogits, ZeroLogitsAreUniform) {
  const auto m = masks_from_logits(Td({3, 2, 5}), 50.0);
  for (double v : m.storage()) EXPECT_NEAR(v, 0.1, 1e-15);
}

TEST(MasksFromLogits, VanishingGammaIsUniform) {
  Rng rng(8);
  const auto m = masks_from_logits(random_tensor({4, 3, 3}, rng, -5, 5), 1e-9);
  for (double v : m.storage()) EXPECT_LT(std::abs(v - 1.0 / 9.0), 1e-6);
}

TEST(MasksFromLogits, DominantLogitTakesAlmostAllMass) {
  // margin 0.5 at gamma 50: weight >= 1 / (1 + (hw-1) e^-25)
  Td l({1, 4, 4});
  l[5] = 0.5;
  const auto m = masks_from_logits(l, 50.0);
  EXPECT_GT(m[5], 0.999);
  EXPECT_NEAR(m[5], 1.0 / (1.0 + 15.0 * std::exp(-25.0)), 1e-15);
}

TEST(MasksFromLogits, GammaLogitProductInvariance) {
  Rng rng(9);
  const auto l = random_tensor({3, 4, 4}, rng);
  for (double c : {0.1, 3.0, 40.0}) {
    auto scaled = l;
    scaled *= 1.0 / c;
    EXPECT_LT(max_abs_diff(masks_from_logits(l, 50.0), masks_from_logits(scaled, 50.0 * c)),
              1e-12);
  }
}

// ---------------------------------------------------------------------------
// sample_roi_feature

TEST(SampleRoiFeature, DeltaMaskPicksPixel) {
  Rng rng(10);
  const auto f = random_tensor({4, 3, 3}, rng);
  Td m({2, 3, 3});
  m(0, 1, 2) = 1.0;
  m(1, 0, 0) = 1.0;
  const auto y = sample_roi_feature(f, m);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(y(0, c), f(c, 1, 2));
    EXPECT_EQ(y(1, c), f(c, 0, 0));
  }
}

TEST(SampleRoiFeature, UniformMasksGiveSpatialMean) {
  Rng rng(11);
  const auto f = random_tensor({3, 2, 4}, rng);
  const Td m({5, 2, 4}, 1.0 / 8.0);
  const auto y = sample_roi_feature(f, m);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0;
    for (std::size_t q = 0; q < 8; ++q) mean += f[c * 8 + q];
    mean /= 8;
    for (std::size_t n = 0; n < 5; ++n) EXPECT_NEAR(y(n, c), mean, 1e-15);
  }
}

TEST(SampleRoiFeature, MatchesTripleLoop) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = random_tensor({6, 3, 5}, rng);
    const auto m = random_masks(4, 3, 5, rng);
    EXPECT_LT(max_abs_diff(sample_roi_feature(f, m), naive_sample_roi_feature(f, m)), 1e-12);
  }
  EXPECT_THROW(sample_roi_feature(random_tensor({2, 3, 3}, rng), random_masks(2, 3, 4, rng)),
               ShapeError);
}

// ---------------------------------------------------------------------------
// sra_extract

TEST(SraExtract, ZeroRegressorsGiveSpatialMeanRows) {
  const auto c = tiny_config(EmbeddingMode::area);
  auto params = init_sra_params<double>(c, 3, 13);
  zero_regressors(params);
  Rng rng(13);
  const auto F = random_tensor({3, 20, 20}, rng);
  const RoIBox box{2.3, 4.1, 15.2, 11.7};
  const auto out = sra_extract(F, box, params, c);
  const auto f = block_average_pool(F, box, out.grid);
  const std::size_t area = out.grid.area();
  for (std::size_t c2 = 0; c2 < 3; ++c2) {
    double mean = 0;
    for (std::size_t q = 0; q < area; ++q) mean += f[c2 * area + q];
    mean /= static_cast<double>(area);
    for (std::size_t n = 0; n < c.N; ++n) EXPECT_NEAR(out.feature(n, c2), mean, 1e-14);
  }
}

TEST(SraExtract, TilePermutationLeavesFeatureUnchanged) {
  // box (-0.5,-0.5)-(2w-0.5, 2h-0.5) on a (h,w) grid puts each block's four
  // samples exactly on one 2x2 pixel tile, so permuting tiles permutes f.
  auto c = tiny_config(EmbeddingMode::none);
  c.fixed_grid = GridSize{3, 4};
  const auto params = random_sra_params(c, 4, 14);
  Rng rng(14);
  const auto F = random_tensor({4, 6, 8}, rng);
  const RoIBox box{-0.5, -0.5, 7.5, 5.5};
  std::vector<std::size_t> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  const auto base = sra_extract(F, box, params, c);
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    Td G(F.dims());
    for (std::size_t tile = 0; tile < 12; ++tile) {
      const std::size_t sj = tile / 4, sk = tile % 4;
      const std::size_t dj = perm[tile] / 4, dk = perm[tile] % 4;
      for (std::size_t ch = 0; ch < 4; ++ch) {
        for (std::size_t a = 0; a < 2; ++a) {
          for (std::size_t b = 0; b < 2; ++b) {
            G(ch, 2 * dj + a, 2 * dk + b) = F(ch, 2 * sj + a, 2 * sk + b);
          }
        }
      }
    }
    const auto moved = sra_extract(G, box, params, c);
    EXPECT_LT(max_abs_diff(moved.feature, base.feature), 1e-9);
    for (std::size_t n = 0; n < c.N; ++n) {
      for (std::size_t q = 0; q < 12; ++q) {
        EXPECT_NEAR(moved.masks[n * 12 + perm[q]], base.masks[n * 12 + q], 1e-12);
      }
    }
  }
}

TEST(SraExtract, MatchesRecompositionFromComponents) {
  for (auto embed : {EmbeddingMode::none, EmbeddingMode::position, EmbeddingMode::area}) {
    for (auto desc : {DescriptorMode::average, DescriptorMode::maximum,
                      DescriptorMode::concatenation}) {
      const auto c = tiny_config(embed, desc);
      const auto params = random_sra_params(c, 3, 15);
      Rng rng(15);
      const auto F = random_tensor({3, 16, 16}, rng);
      const RoIBox box{1.2, 0.7, 13.9, 8.8};
      const auto out = sra_extract(F, box, params, c);

      const GridSize g = c.fixed_grid ? *c.fixed_grid : brute_force_grid_size(box, c.M);
      ASSERT_EQ(out.grid, g);
      const auto f = block_average_pool(F, box, g);
      const auto d = roi_descriptor(f, desc, params.psi);
      const auto s = naive_pointwise(f, params.semantic_conv);
      std::optional<Td> p;
      if (embed == EmbeddingMode::position) {
        p = naive_pointwise(position_embedding_raw<double>(g), params.embed_proj->conv);
      } else if (embed == EmbeddingMode::area) {
        p = naive_pointwise(area_embedding_raw<double>(g, c.M), params.embed_proj->conv);
      }
      const auto logits = naive_mask_logits(d, s, p ? &*p : nullptr, params, c.N);
      const auto m = softmax_spatial(logits, c.gamma);
      const auto y = naive_sample_roi_feature(f, m);
      EXPECT_LT(max_abs_diff(out.feature, y), 1e-10)
          << to_string(embed) << "/" << to_string(desc);
      EXPECT_LT(max_abs_diff(out.masks, m), 1e-10);
    }
  }
}

TEST(SraExtract, MasksNormalizedAndFeatureConvex) {
  Rng rng(16);
  const auto c = tiny_config(EmbeddingMode::area);
  for (int trial = 0; trial < 30; ++trial) {
    const auto params = random_sra_params(c, 3, 100 + trial);
    const auto F = random_tensor({3, 24, 24}, rng, -3, 3);
    const double x0 = uniform(rng, -2.0, 18.0);
    const double y0 = uniform(rng, -2.0, 18.0);
    const RoIBox box{x0, y0, x0 + uniform(rng, 0.5, 12.0), y0 + uniform(rng, 0.5, 12.0)};
    const auto out = sra_extract(F, box, params, c);
    const auto f = block_average_pool(F, box, out.grid);
    const std::size_t area = out.grid.area();
    for (std::size_t n = 0; n < c.N; ++n) {
      double s = 0;
      for (std::size_t q = 0; q < area; ++q) {
        ASSERT_GE(out.masks[n * area + q], 0.0);
        s += out.masks[n * area + q];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const auto first = f.data().begin() + static_cast<long>(ch * area);
      const double lo = *std::min_element(first, first + static_cast<long>(area));
      const double hi = *std::max_element(first, first + static_cast<long>(area));
      for (std::size_t n = 0; n < c.N; ++n) {
        EXPECT_GE(out.feature(n, ch), lo - 1e-12);
        EXPECT_LE(out.feature(n, ch), hi + 1e-12);
      }
    }
  }
}

TEST(SraExtract, DegenerateBoxIsProcessed) {
  const auto c = tiny_config(EmbeddingMode::area);
  const auto params = random_sra_params(c, 2, 17);
  Rng rng(17);
  const auto F = random_tensor({2, 8, 8}, rng);
  const auto out = sra_extract(F, RoIBox{3.0, 3.0, 3.2, 3.1}, params, c);
  EXPECT_TRUE(out.feature.all_finite());
}

// ---------------------------------------------------------------------------
// sra_backward

class PipelineGradient : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(PipelineGradient, MatchesFiniteDifferences) {
  const auto r = check_sra_pipeline(small_gradcheck_config(), 4, 8, GetParam());
  EXPECT_TRUE(r.passed) << r.describe();
}

INSTANTIATE_TEST_SUITE_P(Seeds, PipelineGradient, ::testing::Range<std::uint64_t>(0, 5));

TEST(SraBackward, EveryModeMatchesFiniteDifferences) {
  std::uint64_t seed = 40;
  for (bool independent : {false, true}) {
    for (auto embed : {EmbeddingMode::none, EmbeddingMode::position, EmbeddingMode::area}) {
      for (auto desc : {DescriptorMode::average, DescriptorMode::maximum,
                        DescriptorMode::concatenation}) {
        auto c = small_gradcheck_config();
        c.embedding_mode = embed;
        c.descriptor_mode = desc;
        c.independent_heads = independent;
        c.fixed_grid = desc == DescriptorMode::concatenation ? std::optional<GridSize>({3, 3})
                                                             : std::nullopt;
        const auto r = check_sra_pipeline(c, 3, 8, ++seed);
        EXPECT_TRUE(r.passed) << to_string(embed) << "/" << to_string(desc)
                              << " independent=" << independent << " " << r.describe();
      }
    }
  }
}

TEST(SraBackward, ZeroCotangentGivesZeroGradients) {
  const auto c = tiny_config(EmbeddingMode::area);
  const auto params = random_sra_params(c, 3, 18);
  Rng rng(18);
  const auto F = random_tensor({3, 12, 12}, rng);
  const auto st = sra_forward(F, RoIBox{1, 1, 10, 7}, params, c);
  const auto g = sra_backward(Td(st.feature.dims()), st, params, c);
  g.params.for_each_tensor([](const std::string& name, const Td& t) {
    for (double v : t.storage()) EXPECT_EQ(v, 0.0) << name;
  });
  for (double v : g.feature_map->storage()) EXPECT_EQ(v, 0.0);
}

TEST(SraBackward, DetachedMasksGiveMaskWeightsAsJacobian) {
  const auto c = tiny_config(EmbeddingMode::position);
  const auto params = random_sra_params(c, 3, 19);
  Rng rng(19);
  const auto F = random_tensor({3, 12, 12}, rng);
  const auto st = sra_forward(F, RoIBox{0.5, 2, 9, 11}, params, c);
  const std::size_t area = st.grid.area();
  SraBackwardOptions opt;
  opt.detach_masks = true;
  for (std::size_t n = 0; n < c.N; ++n) {
    for (std::size_t ch = 0; ch < 3; ++ch) {
      Td dy(st.feature.dims());
      dy(n, ch) = 1.0;
      const auto g = sra_backward(dy, st, params, c, opt);
      for (std::size_t c2 = 0; c2 < 3; ++c2) {
        for (std::size_t q = 0; q < area; ++q) {
          EXPECT_EQ(g.pooled[c2 * area + q], c2 == ch ? st.masks[n * area + q] : 0.0);
        }
      }
    }
  }
}

TEST(SraBackward, UnrecordedStateIsUsageError) {
  const auto c = tiny_config();
  const auto params = random_sra_params(c, 3, 20);
  Rng rng(20);
  const auto F = random_tensor({3, 8, 8}, rng);
  const auto st = sra_forward(F, RoIBox{1, 1, 6, 6}, params, c, /*record=*/false);
  EXPECT_THROW(sra_backward(Td(st.feature.dims()), st, params, c), UsageError);
  EXPECT_THROW(sra_backward(Td({1, 1}), SraForwardState<double>{}, params, c), UsageError);
}

// ---------------------------------------------------------------------------
// parameter accounting

TEST(ParameterCount, DefaultsFitTheBudget) {
  const std::size_t n = parameter_count(SraConfig{}, 256);
  EXPECT_GE(n, 150'000u);
  EXPECT_LE(n, 350'000u);
  EXPECT_EQ(n, 217'233u);
}

TEST(ParameterCount, HandSummedTinyConfig) {
  // psi 1*1+1, semantic 1*1+1, trunk norm 2*2, trunk linear 2*1+1,
  // head norm 2*1, head linear 1*1+1  ->  2+2+4+3+2+2 = 15
  SraConfig c;
  c.K = 1;
  c.P = 0;
  c.hidden = 1;
  c.N = 1;
  c.embedding_mode = EmbeddingMode::none;
  EXPECT_EQ(parameter_count(c, 1), 15u);
}

TEST(ParameterCount, DoublingNOnlyGrowsTheHead) {
  SraConfig c;
  const auto base = parameter_count(c, 256);
  c.N *= 2;
  EXPECT_EQ(parameter_count(c, 256) - base, 49u * (c.hidden + 1));
}

TEST(ParameterCount, ClosedFormMatchesAllocatedTensors) {
  for (bool independent : {false, true}) {
    for (auto embed : {EmbeddingMode::none, EmbeddingMode::position, EmbeddingMode::area}) {
      for (auto desc : {DescriptorMode::average, DescriptorMode::maximum,
                        DescriptorMode::concatenation}) {
        auto c = tiny_config(embed, desc);
        c.independent_heads = independent;
        EXPECT_EQ(parameter_count(c, 5), init_sra_params<double>(c, 5, 0).parameter_count());
      }
    }
  }
}

// ---------------------------------------------------------------------------
// config & checkpoints

TEST(SraConfig, JsonRoundTripAndUnknownKeys) {
  SraConfig c = tiny_config(EmbeddingMode::position, DescriptorMode::concatenation);
  c.independent_heads = true;
  c.gamma = 5.0;
  const auto back = sra_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(sra_config_from_json(nlohmann::json{{"bogus", 1}}), ConfigError);
}

TEST(Checkpoint, RoundTripRestoresParams) {
  const auto c = tiny_config(EmbeddingMode::area);
  const auto params = random_sra_params(c, 3, 21);
  const auto j = nlohmann::json::parse(checkpoint_to_json(params, c, 3).dump());
  const auto ck = checkpoint_from_json<double>(j);
  EXPECT_EQ(ck.channels, 3u);
  std::vector<Td> a, b;
  params.for_each_tensor([&](const std::string&, const Td& t) { a.push_back(t); });
  ck.params.for_each_tensor([&](const std::string&, const Td& t) { b.push_back(t); });
  EXPECT_EQ(a, b);

  auto bad = j;
  bad["format"] = "other";
  EXPECT_THROW(checkpoint_from_json<double>(bad), UsageError);
  bad = j;
  bad["tensors"].erase(0);
  EXPECT_THROW(checkpoint_from_json<double>(bad), ShapeError);
}

}  // namespace
}  // namespace sra
