#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "sra/harness/evaluation.hpp"
#include "sra/harness/extractors.hpp"
#include "sra/harness/synthetic.hpp"

namespace sra::harness {

/// Small enough to train on one core in about a minute per seed.
inline SraConfig toy_sra_config() {
  SraConfig c;
  c.N = 49;
  c.M = 64;
  c.K = 32;
  c.P = 16;
  c.hidden = 64;
  c.gamma = 50.0;
  return c;
}

struct TrainConfig {
  ExtractorKind kind = ExtractorKind::sra;
  SraConfig sra = toy_sra_config();
  GridSize baseline_grid = kBaselineGrid;
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  bool evaluate_test = true;  // per-epoch test accuracy

  void validate() const {
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be finite and >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
    if (kind == ExtractorKind::sra) sra.validate();
  }
};

/// Classifier input for one instance. For SRA this is the pooled map f, since
/// everything after the sampler is trained; baselines are frozen, so their
/// flattened feature is computed once.
struct Example {
  Tensor<double> input;
  std::size_t label = 0;
};

inline std::vector<Example> prepare_examples(const TrainConfig& cfg, const std::vector<SyntheticInstance>& data) {
  std::vector<Example> out;
  out.reserve(data.size());
  for (const auto& inst : data) {
    Tensor<double> x;
    switch (cfg.kind) {
      case ExtractorKind::sra:
        x = block_average_pool(inst.feature_map, inst.box, cfg.sra.grid_for(inst.box));
        break;
      case ExtractorKind::roi_align:
      case ExtractorKind::roi_pool: {
        const auto e = Extractor::baseline(cfg.kind, cfg.baseline_grid);
        const auto f = extract(e, inst.feature_map, inst.box);
        x = f.reshaped({f.size()});
        break;
      }
    }
    out.push_back({std::move(x), inst.label});
  }
  return out;
}

struct TrainState {
  std::optional<SraParams<double>> sra;
  LinearParams<double> classifier;
  // momentum buffers, same structure as the parameters
  std::optional<SraParams<double>> sra_velocity;
  LinearParams<double> classifier_velocity;
  std::size_t steps = 0;
  std::uint64_t seed = 0;

  Extractor extractor(const TrainConfig& cfg) const {
    if (cfg.kind == ExtractorKind::sra) return Extractor::sra(cfg.sra, *sra);
    return Extractor::baseline(cfg.kind, cfg.baseline_grid);
  }
};

inline TrainState init_train_state(const TrainConfig& cfg, std::size_t channels, std::size_t n_classes) {
  cfg.validate();
  TrainState s;
  s.seed = cfg.seed;
  std::size_t features = 0;
  if (cfg.kind == ExtractorKind::sra) {
    s.sra = init_sra_params<double>(cfg.sra, channels, derive_seed(cfg.seed, "train.sra"));
    s.sra_velocity = s.sra->zeros_like();
    features = cfg.sra.N * channels;
  } else {
    features = cfg.baseline_grid.area() * channels;
  }
  Rng rng = make_rng(cfg.seed, "train.classifier");
  s.classifier = sra::detail::fan_in_linear<double>(features, n_classes, rng);
  s.classifier_velocity = LinearParams<double>::zeros(features, n_classes);
  return s;
}

namespace detail {

inline std::vector<Tensor<double>*> tensor_list(SraParams<double>& p) {
  std::vector<Tensor<double>*> out;
  p.for_each_tensor([&](const std::string&, Tensor<double>& t) { out.push_back(&t); });
  return out;
}

/// v <- mu v + g + wd w ;  w <- w - lr v
inline void sgd_update(Tensor<double>& w, Tensor<double>& v, const Tensor<double>& g, double lr, double mu,
                       double wd) {
  for (std::size_t i = 0; i < w.size(); ++i) {
    v[i] = mu * v[i] + g[i] + wd * w[i];
    w[i] -= lr * v[i];
  }
}

struct ForwardResult {
  std::optional<SraForwardState<double>> sra_state;
  Tensor<double> feature;  // flattened
  Tensor<double> probs;
  double loss = 0.0;
  std::size_t predicted = 0;
};

inline ForwardResult classify(const TrainState& s, const TrainConfig& cfg, const Example& ex, bool record) {
  ForwardResult r;
  if (cfg.kind == ExtractorKind::sra) {
    r.sra_state = sra_forward_pooled(ex.input, *s.sra, cfg.sra, record);
    r.feature = r.sra_state->feature.reshaped({r.sra_state->feature.size()});
  } else {
    r.feature = ex.input;
  }
  const Tensor<double> logits = linear(r.feature, s.classifier);
  double mx = logits[0];
  for (double v : logits.storage()) mx = std::max(mx, v);
  r.probs = Tensor<double>(logits.dims());
  double z = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) z += (r.probs[k] = std::exp(logits[k] - mx));
  for (auto& p : r.probs.storage()) p /= z;
  r.loss = -(logits[ex.label] - mx - std::log(z));
  r.predicted = static_cast<std::size_t>(
      std::max_element(logits.storage().begin(), logits.storage().end()) - logits.storage().begin());
  return r;
}

}  // namespace detail

struct StepResult {
  double loss = 0.0;  // batch mean, measured before the update
  std::size_t correct = 0;
};

/// One SGD-with-momentum step on the mean cross-entropy of `batch`.
inline StepResult train_step(TrainState& s, const TrainConfig& cfg, const std::vector<const Example*>& batch) {
  if (batch.empty()) throw UsageError("train_step: empty batch");
  StepResult out;
  const double inv = 1.0 / static_cast<double>(batch.size());
  auto cls_grad = LinearParams<double>::zeros(s.classifier.in_dim(), s.classifier.out_dim());
  std::optional<SraParams<double>> sra_grad;
  if (s.sra) sra_grad = s.sra->zeros_like();

  for (const Example* ex : batch) {
    const auto fr = detail::classify(s, cfg, *ex, true);
    out.loss += fr.loss * inv;
    if (fr.predicted == ex->label) ++out.correct;
    Tensor<double> dlogits = fr.probs;
    dlogits[ex->label] -= 1.0;
    dlogits *= inv;
    const Tensor<double> dfeat = linear_backward(fr.feature, s.classifier, dlogits, cls_grad);
    if (fr.sra_state) {
      SraBackwardOptions opts;
      opts.input_gradient = false;
      auto g = sra_backward(dfeat.reshaped(fr.sra_state->feature.dims()), *fr.sra_state, *s.sra, cfg.sra, opts);
      auto acc = detail::tensor_list(*sra_grad);
      auto one = detail::tensor_list(g.params);
      for (std::size_t i = 0; i < acc.size(); ++i) *acc[i] += *one[i];
    }
  }
  if (!std::isfinite(out.loss)) {
    throw DivergenceError("training diverged: non-finite loss at step " + std::to_string(s.steps) +
                          " (lr=" + std::to_string(cfg.lr) + ")");
  }

  detail::sgd_update(s.classifier.weight, s.classifier_velocity.weight, cls_grad.weight, cfg.lr, cfg.momentum,
                     cfg.weight_decay);
  detail::sgd_update(s.classifier.bias, s.classifier_velocity.bias, cls_grad.bias, cfg.lr, cfg.momentum,
                     cfg.weight_decay);
  if (s.sra) {
    auto w = detail::tensor_list(*s.sra);
    auto v = detail::tensor_list(*s.sra_velocity);
    auto g = detail::tensor_list(*sra_grad);
    for (std::size_t i = 0; i < w.size(); ++i) detail::sgd_update(*w[i], *v[i], *g[i], cfg.lr, cfg.momentum, cfg.weight_decay);
  }
  ++s.steps;
  return out;
}

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

inline Evaluation evaluate(const TrainState& s, const TrainConfig& cfg, const std::vector<Example>& data) {
  if (data.empty()) return {};
  Evaluation e;
  std::size_t correct = 0;
  for (const auto& ex : data) {
    const auto fr = detail::classify(s, cfg, ex, false);
    e.loss += fr.loss;
    if (fr.predicted == ex.label) ++correct;
  }
  e.loss /= static_cast<double>(data.size());
  e.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return e;
}

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;      // mean over the epoch's batches
  double train_accuracy = 0.0;  // counted during the epoch
  double test_loss = 0.0;
  double test_accuracy = 0.0;
};

struct TrainResult {
  TrainState state;
  std::vector<EpochStats> curve;
};

inline std::size_t count_classes(const std::vector<SyntheticInstance>& a, const std::vector<SyntheticInstance>& b) {
  std::size_t n = 0;
  for (const auto* set : {&a, &b}) {
    for (const auto& inst : *set) n = std::max(n, inst.label + 1);
  }
  return n;
}

/// Trains the extractor (SRA only) and a linear classifier on `train`;
/// reports per-epoch accuracy on `test`. Deterministic for a fixed seed.
inline TrainResult train_toy(const TrainConfig& cfg, const std::vector<SyntheticInstance>& train,
                             const std::vector<SyntheticInstance>& test) {
  cfg.validate();
  if (train.empty()) throw UsageError("train_toy: empty training set");
  const std::size_t channels = train.front().feature_map.dim(0);
  TrainResult r{init_train_state(cfg, channels, std::max<std::size_t>(2, count_classes(train, test))), {}};
  const auto train_ex = prepare_examples(cfg, train);
  const auto test_ex = prepare_examples(cfg, test);

  std::vector<std::size_t> order(train_ex.size());
  std::vector<const Example*> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, "train.shuffle", epoch));
    std::shuffle(order.begin(), order.end(), rng);
    EpochStats st;
    st.epoch = epoch + 1;
    std::size_t correct = 0, batches = 0;
    for (std::size_t i = 0; i < order.size(); i += cfg.batch_size) {
      batch.clear();
      for (std::size_t j = i; j < std::min(order.size(), i + cfg.batch_size); ++j) batch.push_back(&train_ex[order[j]]);
      const auto sr = train_step(r.state, cfg, batch);
      st.train_loss += sr.loss;
      correct += sr.correct;
      ++batches;
    }
    st.train_loss /= static_cast<double>(batches);
    st.train_accuracy = static_cast<double>(correct) / static_cast<double>(train_ex.size());
    if (cfg.evaluate_test || epoch + 1 == cfg.epochs) {
      const auto ev = evaluate(r.state, cfg, test_ex);
      st.test_loss = ev.loss;
      st.test_accuracy = ev.accuracy;
    }
    r.curve.push_back(st);
  }
  return r;
}

// ---------------------------------------------------------------------------
// train / rotated-test split

struct ToySplit {
  Dataset dataset;  // all generated instances, unrotated
  std::vector<SyntheticInstance> train;
  std::vector<SyntheticInstance> test;  // held-out instances with a random rotation applied
};

/// The last `test_fraction` of the instances form the test split; each gets
/// a rotation delta from `test_family`. Round-robin labels keep both splits
/// balanced when the split point is a multiple of the class count.
/// Holds out the last `test_fraction` (rounded down to whole class rounds) and
/// re-poses each held-out instance with a draw from `test_family`.
inline ToySplit split_dataset(Dataset dataset, double test_fraction, const TransformFamily& test_family,
                              std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("split: test_fraction must lie in (0,1)");
  ToySplit s;
  s.dataset = std::move(dataset);
  const std::size_t n = s.dataset.instances.size();
  auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  n_test -= n_test % s.dataset.options.n_classes;
  if (n_test == 0 || n_test >= n) throw ConfigError("split: too few instances for a train/test split");
  const std::size_t n_train = n - n_test;
  s.train.assign(s.dataset.instances.begin(), s.dataset.instances.begin() + static_cast<long>(n_train));
  Rng rng = make_rng(seed, "split.test_transforms");
  for (std::size_t i = n_train; i < n; ++i) {
    s.test.push_back(apply_transform(s.dataset.instances[i], test_family.sample(rng)));
  }
  return s;
}

inline ToySplit make_toy_split(const DatasetOptions& options, double test_fraction,
                               const TransformFamily& test_family, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("split: test_fraction must lie in (0,1)");
  return split_dataset(generate_dataset(options, derive_seed(seed, "dataset")), test_fraction, test_family, seed);
}

}  // namespace sra::harness
