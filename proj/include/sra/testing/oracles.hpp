#pragma once

// Independent reference implementations used by the test suites and the
// `oracles` CLI subcommand. Everything here is deliberately naive: explicit
// loops, no shared kernels with the library beyond the Tensor container.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sra/baselines.hpp"
#include "sra/embeddings.hpp"
#include "sra/gradcheck.hpp"
#include "sra/rng.hpp"
#include "sra/sampler.hpp"
#include "sra/sra.hpp"

namespace sra::testing {

/// Exhaustive argmin over every (h,w) with h*w <= budget.
inline GridSize brute_force_grid_size(const RoIBox& box, std::size_t budget) {
  const double ratio = (box.y1 - box.y0) / (box.x1 - box.x0);
  GridSize best{0, 0};
  double best_err = 0.0;
  for (std::size_t h = 1; h <= budget; ++h) {
    for (std::size_t w = 1; h * w <= budget; ++w) {
      const double err = std::abs(static_cast<double>(h) / static_cast<double>(w) - ratio);
      bool take = best.h == 0 || err < best_err;
      if (!take && err == best_err) {
        if (h * w != best.h * best.w) take = h * w > best.h * best.w;
        else take = h > best.h;
      }
      if (take) {
        best = {h, w};
        best_err = err;
      }
    }
  }
  return best;
}

inline Tensor<double> naive_matvec(const Tensor<double>& W, const Tensor<double>& b,
                                   const std::vector<double>& x) {
  Tensor<double> y({W.dim(0)});
  for (std::size_t o = 0; o < W.dim(0); ++o) {
    double s = b[o];
    for (std::size_t i = 0; i < W.dim(1); ++i) s += W(o, i) * x[i];
    y[o] = s;
  }
  return y;
}

/// Per-position matrix product for a (Cin,h,w) map.
inline Tensor<double> naive_pointwise(const Tensor<double>& x, const LinearParams<double>& p) {
  Tensor<double> y({p.weight.dim(0), x.dim(1), x.dim(2)});
  for (std::size_t j = 0; j < x.dim(1); ++j) {
    for (std::size_t k = 0; k < x.dim(2); ++k) {
      std::vector<double> col(x.dim(0));
      for (std::size_t c = 0; c < x.dim(0); ++c) col[c] = x(c, j, k);
      const auto out = naive_matvec(p.weight, p.bias, col);
      for (std::size_t o = 0; o < out.size(); ++o) y(o, j, k) = out[o];
    }
  }
  return y;
}

/// Triple loop: y(n,c) = sum_j sum_k f(c,j,k) m(n,j,k).
inline Tensor<double> naive_sample_roi_feature(const Tensor<double>& f, const Tensor<double>& m) {
  Tensor<double> y({m.dim(0), f.dim(0)});
  for (std::size_t n = 0; n < m.dim(0); ++n) {
    for (std::size_t c = 0; c < f.dim(0); ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < f.dim(1); ++j) {
        for (std::size_t k = 0; k < f.dim(2); ++k) s += f(c, j, k) * m(n, j, k);
      }
      y(n, c) = s;
    }
  }
  return y;
}

inline std::vector<double> naive_layer_norm(const std::vector<double>& x,
                                            const LayerNormParams<double>& p) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = p.gain[i] * (x[i] - mean) / std::sqrt(var + p.epsilon) + p.shift[i];
  }
  return out;
}

/// Loops grid positions and applies each regressor's two Norm-ReLU-Linear blocks.
inline Tensor<double> naive_mask_logits(const Tensor<double>& d, const Tensor<double>& s,
                                        const Tensor<double>* p, const SraParams<double>& params,
                                        std::size_t N) {
  Tensor<double> logits({N, s.dim(1), s.dim(2)});
  for (std::size_t j = 0; j < s.dim(1); ++j) {
    for (std::size_t k = 0; k < s.dim(2); ++k) {
      std::vector<double> z(d.storage());
      for (std::size_t c = 0; c < s.dim(0); ++c) z.push_back(s(c, j, k));
      if (p) {
        for (std::size_t c = 0; c < p->dim(0); ++c) z.push_back((*p)(c, j, k));
      }
      std::size_t n = 0;
      for (const auto& reg : params.regressors) {
        auto a = naive_layer_norm(z, reg.trunk_norm);
        for (auto& v : a) v = v > 0 ? v : 0;
        const auto h = naive_matvec(reg.trunk_linear.weight, reg.trunk_linear.bias, a);
        auto b = naive_layer_norm(h.storage(), reg.head_norm);
        for (auto& v : b) v = v > 0 ? v : 0;
        const auto out = naive_matvec(reg.head_linear.weight, reg.head_linear.bias, b);
        for (std::size_t o = 0; o < out.size(); ++o) logits(n++, j, k) = out[o];
      }
    }
  }
  return logits;
}

/// Per-channel mean computed with explicit loops, then psi.
inline Tensor<double> naive_average_descriptor(const Tensor<double>& f,
                                               const LinearParams<double>& psi) {
  std::vector<double> mean(f.dim(0), 0.0);
  for (std::size_t c = 0; c < f.dim(0); ++c) {
    for (std::size_t j = 0; j < f.dim(1); ++j) {
      for (std::size_t k = 0; k < f.dim(2); ++k) mean[c] += f(c, j, k);
    }
    mean[c] /= static_cast<double>(f.dim(1) * f.dim(2));
  }
  return naive_matvec(psi.weight, psi.bias, mean);
}

/// Quantized-bin max for boxes with integer corners inside the map, using
/// integer bin edges floor(j*L/n) .. ceil((j+1)*L/n).
inline Tensor<double> quantized_bin_max(const Tensor<double>& F, long x0, long y0, long x1,
                                        long y1, GridSize out) {
  const long L_h = y1 - y0 + 1;
  const long L_w = x1 - x0 + 1;
  const long nh = static_cast<long>(out.h);
  const long nw = static_cast<long>(out.w);
  Tensor<double> r({out.h, out.w, F.dim(0)});
  for (long j = 0; j < nh; ++j) {
    const long hs = y0 + (j * L_h) / nh;
    const long he = y0 + ((j + 1) * L_h + nh - 1) / nh;
    for (long k = 0; k < nw; ++k) {
      const long ws = x0 + (k * L_w) / nw;
      const long we = x0 + ((k + 1) * L_w + nw - 1) / nw;
      for (std::size_t c = 0; c < F.dim(0); ++c) {
        double best = -1e300;
        for (long y = hs; y < he; ++y) {
          for (long x = ws; x < we; ++x) {
            best = std::max(best, F(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)));
          }
        }
        r(static_cast<std::size_t>(j), static_cast<std::size_t>(k), c) = best;
      }
    }
  }
  return r;
}

inline Tensor<double> random_tensor(Dims dims, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(dims));
  for (auto& v : t.storage()) v = uniform(rng, lo, hi);
  return t;
}

inline LinearParams<double> random_linear(std::size_t in, std::size_t out, Rng& rng) {
  return {random_tensor({out, in}, rng), random_tensor({out}, rng)};
}

/// Random (N,h,w) masks, each slice a distribution.
inline Tensor<double> random_masks(std::size_t N, std::size_t h, std::size_t w, Rng& rng) {
  auto m = random_tensor({N, h, w}, rng, 0.0, 1.0);
  for (std::size_t n = 0; n < N; ++n) {
    double s = 0.0;
    for (std::size_t q = 0; q < h * w; ++q) s += m[n * h * w + q];
    for (std::size_t q = 0; q < h * w; ++q) m[n * h * w + q] /= s;
  }
  return m;
}

/// Parameters with randomised norm gains/shifts too, so tests exercise every path.
inline SraParams<double> random_sra_params(const SraConfig& config, std::size_t channels,
                                           std::uint64_t seed) {
  auto params = init_sra_params<double>(config, channels, seed);
  Rng rng = make_rng(seed, "testing.random_sra_params");
  params.for_each_tensor([&](const std::string& name, Tensor<double>& t) {
    if (name.find("norm.gain") != std::string::npos) {
      for (auto& v : t.storage()) v = uniform(rng, 0.5, 1.5);
    } else if (name.find("norm.shift") != std::string::npos ||
               name.find(".bias") != std::string::npos) {
      for (auto& v : t.storage()) v = uniform(rng, -0.2, 0.2);
    }
  });
  return params;
}

/// Small pipeline dims shared by the gradient checks.
inline SraConfig small_gradcheck_config() {
  SraConfig c;
  c.N = 3;
  c.K = 8;
  c.P = 4;
  c.hidden = 8;
  c.M = 9;
  c.gamma = 50.0;
  c.fixed_grid = GridSize{3, 3};
  c.embedding_mode = EmbeddingMode::position;
  c.descriptor_mode = DescriptorMode::average;
  return c;
}

/// Full-pipeline VJP check: inputs are [F, every parameter tensor...].
/// The logits are scaled down before the gamma=50 softmax by shrinking the
/// head weights, which keeps masks away from one-hot saturation where
/// finite differences lose all signal.
inline GradCheckReport check_sra_pipeline(const SraConfig& config, std::size_t channels,
                                          std::size_t map_size, std::uint64_t seed,
                                          double tolerance = 1e-4, double step = 1e-5) {
  Rng rng = make_rng(seed, "testing.pipeline");
  auto params = random_sra_params(config, channels, seed);
  for (auto& reg : params.regressors) reg.head_linear.weight *= 0.05;
  const auto F = random_tensor({channels, map_size, map_size}, rng);
  const double side = static_cast<double>(map_size - 1);
  const double x0 = uniform(rng, 0.0, side * 0.3);
  const double y0 = uniform(rng, 0.0, side * 0.3);
  const RoIBox box{x0, y0, x0 + uniform(rng, side * 0.4, side * 0.7),
                   y0 + uniform(rng, side * 0.4, side * 0.7)};

  std::vector<Tensor<double>> inputs{F};
  params.for_each_tensor([&](const std::string&, const Tensor<double>& t) { inputs.push_back(t); });

  DifferentiableOp<double> op = [&](const std::vector<Tensor<double>>& in) {
    auto p = params;
    std::size_t idx = 1;
    p.for_each_tensor([&](const std::string&, Tensor<double>& t) { t = in[idx++]; });
    auto st = std::make_shared<SraForwardState<double>>(sra_forward(in[0], box, p, config));
    Tensor<double> value = st->feature;
    return Traced<double>{std::move(value), {"sra", [st, p, config](const Tensor<double>& dy) {
                                               auto g = sra_backward(dy, *st, p, config);
                                               Cotangents<double> out{*g.feature_map};
                                               g.params.for_each_tensor(
                                                   [&](const std::string&, const Tensor<double>& t) {
                                                     out.push_back(t);
                                                   });
                                               return out;
                                             }}};
  };
  GradCheckOptions opt;
  opt.seed = seed;
  opt.tolerance = tolerance;
  opt.step = step;
  return check_vjp(op, inputs, opt);
}

struct OracleResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Runs every module-level derived oracle once with the given seed.
inline std::vector<OracleResult> run_all_oracles(std::uint64_t seed) {
  std::vector<OracleResult> results;
  auto record = [&](std::string name, bool ok, std::string detail = {}) {
    results.push_back({std::move(name), ok, std::move(detail)});
  };
  Rng rng = make_rng(seed, "oracles");

  {  // linear hand matrix-vector product
    LinearParams<double> p{Tensor<double>::matrix({{1, 2}, {3, 4}}), Tensor<double>::vector({0, 0})};
    const auto y = linear(Tensor<double>::vector({1, 1}), p);
    record("numerics.linear.hand_matvec", y[0] == 3.0 && y[1] == 7.0);
  }
  {  // softmax hand value
    Tensor<double> l({1, 2, 2}, std::vector<double>{std::log(2.0), 0, 0, 0});
    const auto m = softmax_spatial(l, 1.0);
    const double err = std::max({std::abs(m[0] - 0.4), std::abs(m[1] - 0.2),
                                 std::abs(m[2] - 0.2), std::abs(m[3] - 0.2)});
    record("numerics.softmax_spatial.hand", err < 1e-12, "max err " + std::to_string(err));
  }
  {  // VJP checks of the kernels
    GradCheckOptions opt;
    opt.seed = seed;
    auto lin = random_linear(3, 2, rng);
    auto r1 = check_vjp<double>(
        [](const std::vector<Tensor<double>>& in) {
          return linear_vjp(in[0], LinearParams<double>{in[1], in[2]});
        },
        {random_tensor({3}, rng), lin.weight, lin.bias}, opt);
    record("numerics.check_vjp.linear", r1.passed, r1.describe());
    auto r2 = check_vjp<double>(
        [](const std::vector<Tensor<double>>& in) { return softmax_spatial_vjp(in[0], 50.0); },
        {random_tensor({2, 3, 3}, rng, -0.05, 0.05)}, opt);
    record("numerics.check_vjp.softmax_gamma50", r2.passed, r2.describe());
  }
  {  // dynamic grid vs exhaustive search
    bool ok = true;
    std::string detail;
    for (std::size_t M : {1, 32, 64, 128, 256}) {
      for (int i = 0; i < 200 && ok; ++i) {
        const double w = std::exp(uniform(rng, std::log(0.5), std::log(500.0)));
        const double h = std::exp(uniform(rng, std::log(0.5), std::log(500.0)));
        const RoIBox box{0, 0, w, h};
        if (!(dynamic_grid_size(box, M) == brute_force_grid_size(box, M))) {
          ok = false;
          detail = "mismatch at M=" + std::to_string(M);
        }
      }
    }
    record("sampler.dynamic_grid_size.exhaustive", ok, detail);
  }
  {  // block_average_pool on the bilinear field x + 2y
    Tensor<double> F({1, 2, 2}, std::vector<double>{0, 1, 2, 3});
    const auto out = block_average_pool(F, RoIBox{0, 0, 1, 1}, GridSize{1, 1});
    record("sampler.block_average_pool.hand", std::abs(out[0] - 1.5) < 1e-12);
  }
  {  // area embedding h=2 -> 4
    const auto v = upsample_onehot<double>(0, 2, 4);
    record("embeddings.area.hand_linear",
           v == std::vector<double>{1.0, 0.75, 0.25, 0.0});
  }
  {  // projections vs per-position matmul
    const auto raw = random_tensor({5, 3, 4}, rng);
    const auto proj = random_linear(5, 6, rng);
    const double err = max_abs_diff(project_embedding(raw, EmbeddingProjection<double>{proj}),
                                    naive_pointwise(raw, proj));
    record("embeddings.project.naive", err < 1e-12, "max err " + std::to_string(err));
    const auto conv = random_linear(5, 7, rng);
    const double err2 = max_abs_diff(semantic_feature_map(raw, conv), naive_pointwise(raw, conv));
    record("sra.semantic_feature_map.naive", err2 < 1e-12, "max err " + std::to_string(err2));
  }
  {  // descriptor, mask logits, weighted sum
    const auto f = random_tensor({4, 3, 5}, rng);
    const auto psi = random_linear(4, 6, rng);
    const double e1 = max_abs_diff(roi_descriptor(f, DescriptorMode::average, psi),
                                   naive_average_descriptor(f, psi));
    record("sra.roi_descriptor.average_naive", e1 < 1e-12, "max err " + std::to_string(e1));

    SraConfig c = small_gradcheck_config();
    c.fixed_grid = GridSize{3, 5};
    const auto params = random_sra_params(c, 4, seed);
    const auto d = random_tensor({c.K}, rng);
    const auto s = random_tensor({c.K, 3, 5}, rng);
    const auto p = random_tensor({c.P, 3, 5}, rng);
    const double e2 = max_abs_diff(mask_logits(d, s, &p, params, c.N),
                                   naive_mask_logits(d, s, &p, params, c.N));
    record("sra.mask_logits.naive", e2 < 1e-10, "max err " + std::to_string(e2));

    const auto m = random_masks(6, 3, 5, rng);
    const double e3 = max_abs_diff(sample_roi_feature(f, m), naive_sample_roi_feature(f, m));
    record("sra.sample_roi_feature.triple_loop", e3 < 1e-12, "max err " + std::to_string(e3));
  }
  {  // full pipeline gradient
    const auto r = check_sra_pipeline(small_gradcheck_config(), 4, 8, seed);
    record("sra.backward.full_pipeline", r.passed, r.describe());
  }
  {  // roi_pool vs quantized bins
    const auto F = random_tensor({2, 8, 8}, rng);
    const auto ours = roi_pool(F, RoIBox{0, 0, 7, 7}, GridSize{2, 2});
    const auto ref = quantized_bin_max(F, 0, 0, 7, 7, GridSize{2, 2});
    record("baselines.roi_pool.quantized_bins", ours == ref);
  }
  {  // roi_align on a linear field equals the field at bin centres
    Tensor<double> F({1, 10, 10});
    for (std::size_t y = 0; y < 10; ++y) {
      for (std::size_t x = 0; x < 10; ++x) F(0, y, x) = static_cast<double>(x) + 2.0 * y;
    }
    const RoIBox box{1.3, 2.1, 7.7, 8.4};
    const auto out = roi_align(F, box, GridSize{3, 4});
    double err = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      for (std::size_t k = 0; k < 4; ++k) {
        const double cy = box.y0 + (j + 0.5) * box.height() / 3.0;
        const double cx = box.x0 + (k + 0.5) * box.width() / 4.0;
        err = std::max(err, std::abs(out(j, k, 0) - (cx + 2.0 * cy)));
      }
    }
    record("baselines.roi_align.linear_field", err < 1e-12, "max err " + std::to_string(err));
  }
  return results;
}

}  // namespace sra::testing
