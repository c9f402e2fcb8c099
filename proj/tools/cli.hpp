#pragma once

// Command-line front end. `run` is kept in a header so tests can drive it
// in-process; tools/main.cpp only forwards argv.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sra/harness/experiments.hpp"
#include "sra/testing/harness_oracles.hpp"
#include "sra/testing/oracles.hpp"
#include "sra/tjson.hpp"

namespace sra::cli {

using nlohmann::json;

inline constexpr std::string_view kReportSchema = "sra-report/v1";

enum ExitCode : int { kSuccess = 0, kAcceptanceFailure = 1, kUsageError = 2 };

// ---------------------------------------------------------------------------
// run configuration: one flat map of dotted keys

/// Every key the CLI understands, with its default. Keys outside this map are
/// rejected, from files and from --set alike.
inline json default_run_config() {
  json flat = json::object();
  flat["seed"] = std::uint64_t{0};
  const json sra_defaults = to_json(SraConfig{});
  for (const auto& [k, v] : sra_defaults.items()) flat["sra." + k] = v;
  // training subcommands swap these sizes in for the sra.* ones
  const auto toy = harness::toy_sra_config();
  flat["toy.M"] = toy.M;
  flat["toy.K"] = toy.K;
  flat["toy.P"] = toy.P;
  flat["toy.hidden"] = toy.hidden;
  const json dataset_defaults = harness::to_json(harness::DatasetOptions{});
  for (const auto& [k, v] : dataset_defaults.items()) flat["dataset." + k] = v;
  flat["dataset.cache_dir"] = "";
  const harness::ToyExperimentConfig exp;
  flat["split.test_fraction"] = exp.test_fraction;
  flat["split.test_rotation_deg"] = exp.test_rotation_deg;
  flat["train.epochs"] = exp.train.epochs;
  flat["train.batch_size"] = exp.train.batch_size;
  flat["train.lr"] = exp.train.lr;
  flat["train.momentum"] = exp.train.momentum;
  flat["train.weight_decay"] = exp.train.weight_decay;
  flat["train.seeds"] = std::size_t{3};
  flat["ablate.seeds"] = std::size_t{1};
  flat["eval.invariance_samples"] = exp.invariance_samples;
  flat["eval.diversity_samples"] = exp.diversity_samples;
  flat["eval.diversity_threshold"] = exp.diversity_threshold;
  flat["eval.max_rotation_deg"] = exp.invariance.max_rotation_deg;
  flat["eval.min_scale"] = exp.invariance.min_scale;
  flat["eval.max_scale"] = exp.invariance.max_scale;
  flat["eval.max_pan"] = exp.invariance.max_pan;
  flat["accept.min_margin"] = 0.0;
  flat["accept.expected_margin"] = 0.02;
  flat["accept.diversity_target"] = 0.5;
  const auto g = testing::small_gradcheck_config();
  flat["gradcheck.N"] = g.N;
  flat["gradcheck.K"] = g.K;
  flat["gradcheck.P"] = g.P;
  flat["gradcheck.M"] = g.M;
  flat["gradcheck.hidden"] = g.hidden;
  flat["gradcheck.gamma"] = g.gamma;
  flat["gradcheck.grid"] = "3x3";
  flat["gradcheck.embedding_mode"] = std::string(to_string(EmbeddingMode::area));
  flat["gradcheck.descriptor_mode"] = std::string(to_string(g.descriptor_mode));
  flat["gradcheck.channels"] = std::size_t{4};
  flat["gradcheck.map_size"] = std::size_t{8};
  flat["gradcheck.seeds"] = std::size_t{20};
  flat["gradcheck.step"] = 1e-5;
  flat["gradcheck.tolerance"] = 1e-4;
  flat["bench.channels"] = std::size_t{256};
  flat["bench.map_size"] = std::size_t{64};
  flat["bench.rois"] = std::size_t{50};
  return flat;
}

struct UsageFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// "8x8" -> [8,8]; "", "none", null -> null.
inline json parse_grid_value(const json& v, const std::string& key) {
  if (v.is_null()) return nullptr;
  if (v.is_array() && v.size() == 2 && v[0].is_number_unsigned() && v[1].is_number_unsigned()) return v;
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s.empty() || s == "none" || s == "dynamic") return nullptr;
    std::size_t h = 0, w = 0;
    char x = 0;
    std::istringstream in(s);
    if (in >> h >> x >> w && (x == 'x' || x == 'X') && in.peek() == EOF && h > 0 && w > 0) return json{h, w};
  }
  throw UsageFailure("key '" + key + "': expected a grid like 8x8 or none, got " + v.dump());
}

inline json coerce(const std::string& key, const json& def, const json& v) {
  if (key == "sra.fixed_grid") return parse_grid_value(v, key);
  if (key == "gradcheck.grid") return parse_grid_value(v, key).is_null() ? json("none") : v;
  const auto bad = [&] {
    return UsageFailure("key '" + key + "': expected " + std::string(def.type_name()) + ", got " + v.dump());
  };
  if (def.is_number_unsigned()) {
    if (v.is_number_unsigned()) return v;
    if (v.is_number_integer() && v.get<long long>() >= 0) return json(v.get<std::uint64_t>());
    throw bad();
  }
  if (def.is_number()) {
    if (v.is_number()) return json(v.get<double>());
    throw bad();
  }
  if (def.is_boolean()) {
    if (v.is_boolean()) return v;
    throw bad();
  }
  if (def.is_string()) {
    if (v.is_string()) return v;
    if (v.is_number() || v.is_boolean()) return json(v.dump());
    throw bad();
  }
  return v;
}

/// A value typed on the command line: JSON if it parses, else a bare string.
inline json parse_cli_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return json(text);
  }
}

inline void apply_override(json& flat, const std::string& key, const json& value) {
  if (!flat.contains(key)) throw UsageFailure("unknown config key '" + key + "'");
  flat[key] = coerce(key, flat[key], value);
}

inline json resolve_run_config(const std::string& config_path, const std::vector<std::string>& sets,
                               std::optional<std::uint64_t> seed) {
  json flat = default_run_config();
  flat["sra.fixed_grid"] = nullptr;
  if (!config_path.empty()) {
    json file;
    try {
      file = read_json_file(config_path);
    } catch (const std::exception& e) {
      throw UsageFailure("cannot read config '" + config_path + "': " + e.what());
    }
    if (!file.is_object()) throw UsageFailure("config file must hold a flat JSON object");
    for (const auto& [k, v] : file.items()) apply_override(flat, k, v);
  }
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageFailure("--set expects key=value, got '" + s + "'");
    apply_override(flat, s.substr(0, eq), parse_cli_value(s.substr(eq + 1)));
  }
  if (seed) flat["seed"] = *seed;
  return flat;
}

/// Keys under `prefix.`, with the prefix stripped.
inline json section(const json& flat, const std::string& prefix) {
  json out = json::object();
  for (const auto& [k, v] : flat.items()) {
    if (k.rfind(prefix + ".", 0) == 0) out[k.substr(prefix.size() + 1)] = v;
  }
  return out;
}

inline SraConfig sra_config(const json& flat) {
  auto c = sra_config_from_json(section(flat, "sra"));
  c.validate();
  return c;
}

/// The sra.* settings with the toy.* sizes swapped in.
inline SraConfig toy_config(const json& flat) {
  auto j = section(flat, "sra");
  const json toy = section(flat, "toy");
  for (const auto& [k, v] : toy.items()) j[k] = v;
  auto c = sra_config_from_json(j);
  c.validate();
  return c;
}

inline harness::ToyExperimentConfig experiment_config(const json& flat) {
  harness::ToyExperimentConfig e;
  auto ds = section(flat, "dataset");
  ds.erase("cache_dir");
  e.dataset = harness::dataset_options_from_json(ds);
  e.test_fraction = flat["split.test_fraction"].get<double>();
  e.test_rotation_deg = flat["split.test_rotation_deg"].get<double>();
  if (!(e.test_fraction > 0.0 && e.test_fraction < 1.0)) throw ConfigError("split.test_fraction must lie in (0,1)");
  e.train.sra = toy_config(flat);
  e.train.epochs = flat["train.epochs"].get<std::size_t>();
  e.train.batch_size = flat["train.batch_size"].get<std::size_t>();
  e.train.lr = flat["train.lr"].get<double>();
  e.train.momentum = flat["train.momentum"].get<double>();
  e.train.weight_decay = flat["train.weight_decay"].get<double>();
  e.train.evaluate_test = true;
  e.train.validate();
  e.invariance.kind = harness::FamilyKind::rotation;
  e.invariance.max_rotation_deg = flat["eval.max_rotation_deg"].get<double>();
  e.invariance.min_scale = flat["eval.min_scale"].get<double>();
  e.invariance.max_scale = flat["eval.max_scale"].get<double>();
  e.invariance.max_pan = flat["eval.max_pan"].get<double>();
  e.invariance_samples = flat["eval.invariance_samples"].get<std::size_t>();
  e.diversity_samples = flat["eval.diversity_samples"].get<std::size_t>();
  e.diversity_threshold = flat["eval.diversity_threshold"].get<double>();
  if (e.invariance_samples == 0 || e.diversity_samples == 0) throw ConfigError("eval sample counts must be >= 1");
  return e;
}

// ---------------------------------------------------------------------------
// reports

struct Check {
  std::string metric;
  double value = 0.0;
  std::string op;  // ">", ">=", "<", "=="
  double threshold = 0.0;
  bool passed = false;
};

inline Check check(std::string metric, double value, std::string op, double threshold) {
  bool ok = false;
  if (op == ">") ok = value > threshold;
  else if (op == ">=") ok = value >= threshold;
  else if (op == "<") ok = value < threshold;
  else if (op == "<=") ok = value <= threshold;
  else if (op == "==") ok = value == threshold;
  return {std::move(metric), value, std::move(op), threshold, ok};
}

struct Context {
  std::string subcommand;
  json config;  // resolved flat map
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
  std::string format = "json";
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;
};

inline void flatten_scalars(const json& j, const std::string& prefix, std::vector<std::pair<std::string, std::string>>& rows) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten_scalars(v, prefix.empty() ? k : prefix + "." + k, rows);
  } else if (j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i) flatten_scalars(j[i], prefix + "." + std::to_string(i), rows);
  } else {
    rows.emplace_back(prefix, j.is_string() ? j.get<std::string>() : j.dump());
  }
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

/// Writes the report and returns the exit code implied by `checks`.
inline int finish(const Context& ctx, const std::string& name, json results, const std::vector<Check>& checks) {
  json acc = json::array();
  bool all = true;
  for (const auto& c : checks) {
    acc.push_back({{"metric", c.metric}, {"value", c.value}, {"op", c.op}, {"threshold", c.threshold},
                   {"passed", c.passed}});
    all = all && c.passed;
  }
  json report{{"schema_version", kReportSchema}, {"subcommand", ctx.subcommand}, {"seed", ctx.seed},
              {"config", ctx.config},          {"results", std::move(results)},
              {"acceptance", {{"passed", all}, {"checks", acc}}}};
  std::filesystem::create_directories(ctx.out_dir);
  const auto path = ctx.out_dir / (name + (ctx.format == "csv" ? ".csv" : ".json"));
  if (ctx.format == "csv") {
    std::vector<std::pair<std::string, std::string>> rows;
    flatten_scalars(report, "", rows);
    std::ofstream f(path);
    f << "key,value\n";
    for (const auto& [k, v] : rows) f << csv_field(k) << ',' << csv_field(v) << '\n';
    if (!f) throw std::runtime_error("cannot write " + path.string());
  } else {
    write_json_file(path, report);
  }
  for (const auto& c : checks) {
    *ctx.out << (c.passed ? "PASS " : "FAIL ") << c.metric << " = " << c.value << " (" << c.op << ' '
             << c.threshold << ")\n";
    if (!c.passed) *ctx.err << "acceptance failure: " << c.metric << '\n';
  }
  *ctx.out << "report: " << path.string() << '\n';
  return all ? kSuccess : kAcceptanceFailure;
}

// ---------------------------------------------------------------------------
// subcommands

inline int cmd_gradcheck(const Context& ctx) {
  const auto& f = ctx.config;
  SraConfig c;
  c.N = f["gradcheck.N"].get<std::size_t>();
  c.K = f["gradcheck.K"].get<std::size_t>();
  c.P = f["gradcheck.P"].get<std::size_t>();
  c.M = f["gradcheck.M"].get<std::size_t>();
  c.hidden = f["gradcheck.hidden"].get<std::size_t>();
  c.gamma = f["gradcheck.gamma"].get<double>();
  const auto grid = parse_grid_value(f["gradcheck.grid"], "gradcheck.grid");
  if (!grid.is_null()) c.fixed_grid = GridSize{grid[0].get<std::size_t>(), grid[1].get<std::size_t>()};
  c.embedding_mode = parse_embedding_mode(f["gradcheck.embedding_mode"].get<std::string>());
  c.descriptor_mode = parse_descriptor_mode(f["gradcheck.descriptor_mode"].get<std::string>());
  c.validate();
  const auto seeds = f["gradcheck.seeds"].get<std::size_t>();
  const double tol = f["gradcheck.tolerance"].get<double>();
  json runs = json::array();
  double worst = 0.0;
  std::size_t failed = 0;
  for (std::size_t i = 0; i < seeds; ++i) {
    const auto r = testing::check_sra_pipeline(c, f["gradcheck.channels"].get<std::size_t>(),
                                               f["gradcheck.map_size"].get<std::size_t>(), ctx.seed + i, tol,
                                               f["gradcheck.step"].get<double>());
    worst = std::max(worst, r.max_rel_error);
    failed += r.passed ? 0 : 1;
    runs.push_back({{"seed", ctx.seed + i},
                    {"passed", r.passed},
                    {"max_rel_error", r.max_rel_error},
                    {"coordinates_checked", r.coordinates_checked},
                    {"coordinates_refined", r.coordinates_refined},
                    {"detail", r.describe()}});
  }
  *ctx.out << "gradcheck: " << seeds << " seeds, max relative error " << worst << '\n';
  return finish(ctx, "gradcheck", {{"sra_config", to_json(c)}, {"max_rel_error", worst}, {"runs", runs}},
                {check("max_rel_error", worst, "<", tol), check("failed_seeds", double(failed), "==", 0)});
}

inline int cmd_oracles(const Context& ctx) {
  auto results = testing::run_all_oracles(ctx.seed);
  for (auto& r : testing::run_harness_oracles(ctx.seed)) results.push_back(std::move(r));
  json arr = json::array();
  std::size_t failed = 0;
  for (const auto& r : results) {
    arr.push_back({{"name", r.name}, {"passed", r.passed}, {"detail", r.detail}});
    *ctx.out << (r.passed ? "  ok   " : "  FAIL ") << r.name << (r.detail.empty() ? "" : "  " + r.detail) << '\n';
    failed += r.passed ? 0 : 1;
  }
  return finish(ctx, "oracles", {{"oracles", arr}}, {check("failed_oracles", double(failed), "==", 0)});
}

/// Builds the split for one seed, reusing the instances under
/// dataset.cache_dir when their options and seed match.
inline harness::ToySplit make_split(const Context& ctx, const harness::ToyExperimentConfig& e, std::uint64_t seed) {
  const auto cache = ctx.config["dataset.cache_dir"].get<std::string>();
  if (cache.empty()) return harness::make_toy_split(e.dataset, e.test_fraction, e.test_family(), seed);
  const auto dir = std::filesystem::path(cache) / ("seed_" + std::to_string(seed));
  const std::uint64_t data_seed = derive_seed(seed, "dataset");
  std::optional<harness::Dataset> d;
  if (std::filesystem::exists(dir / "manifest.json")) {
    auto loaded = harness::load_dataset(dir);
    if (harness::to_json(loaded.options) == harness::to_json(e.dataset) && loaded.seed == data_seed) d = std::move(loaded);
  }
  if (!d) {
    d = harness::generate_dataset(e.dataset, data_seed);
    harness::save_dataset(dir, *d);
  }
  return harness::split_dataset(std::move(*d), e.test_fraction, e.test_family(), seed);
}

/// Trains the SRA head with `variant` on every ablation seed.
inline json run_sra_variant(const Context& ctx, const harness::ToyExperimentConfig& base, const SraConfig& variant,
                            std::map<std::uint64_t, harness::ToySplit>& splits) {
  auto e = base;
  e.train.sra = variant;
  const auto seeds = ctx.config["ablate.seeds"].get<std::size_t>();
  json runs = json::array();
  double acc = 0.0, inv = 0.0, div = 0.0;
  std::size_t max_area = 0, min_area = static_cast<std::size_t>(-1);
  bool within_budget = true, all_fixed = true;
  for (std::size_t i = 0; i < seeds; ++i) {
    const std::uint64_t seed = ctx.seed + i;
    if (!splits.count(seed)) splits.emplace(seed, make_split(ctx, e, seed));
    const auto& split = splits.at(seed);
    for (const auto& inst : split.dataset.instances) {
      const auto g = variant.grid_for(inst.box);
      max_area = std::max(max_area, g.area());
      min_area = std::min(min_area, g.area());
      within_budget = within_budget && g.area() <= variant.M;
      all_fixed = all_fixed && variant.fixed_grid && g == *variant.fixed_grid;
    }
    const auto h = harness::train_head(e, split, harness::ExtractorKind::sra, seed);
    acc += h.test_accuracy;
    inv += h.invariance.mean_cosine;
    if (h.diversity) div += h.diversity->fraction_below;
    runs.push_back(harness::to_json(h));
    runs.back()["seed"] = seed;
  }
  const double n = static_cast<double>(seeds);
  return {{"sra_config", to_json(variant)},
          {"mean_test_accuracy", acc / n},
          {"mean_rotation_cosine", inv / n},
          {"mean_diversity_fraction", div / n},
          {"grid", {{"max_area", max_area}, {"min_area", min_area}, {"within_budget", within_budget},
                    {"all_fixed", all_fixed}}},
          {"runs", runs}};
}

inline std::vector<std::string> resolve_modes(const std::string& mode, std::vector<std::string> all,
                                              const std::string& what) {
  if (mode.empty() || mode == "all") return all;
  if (std::find(all.begin(), all.end(), mode) == all.end()) {
    std::string list;
    for (const auto& a : all) list += (list.empty() ? "" : "|") + a;
    throw UsageFailure(what + ": unknown mode '" + mode + "' (" + list + "|all)");
  }
  return {mode};
}

inline int cmd_ablate(const Context& ctx, const std::string& kind, const std::string& mode) {
  const auto e = experiment_config(ctx.config);
  std::map<std::uint64_t, harness::ToySplit> splits;
  std::vector<Check> checks;
  json results = json::object();
  std::vector<std::string> modes;
  if (kind == "sampler") modes = resolve_modes(mode, {"dynamic", "fixed"}, "ablate-sampler");
  if (kind == "descriptor") modes = resolve_modes(mode, {"average", "maximum", "concatenation"}, "ablate-descriptor");
  if (kind == "embedding") modes = resolve_modes(mode, {"none", "position", "area"}, "ablate-embedding");
  for (const auto& m : modes) {
    SraConfig v = e.train.sra;
    if (kind == "sampler") {
      if (m == "fixed") v.fixed_grid = kFixedAblationGrid;
      else v.fixed_grid.reset();
    } else if (kind == "descriptor") {
      v.descriptor_mode = parse_descriptor_mode(m);
      // the concatenated descriptor has a fixed length, so it pins the grid
      if (v.descriptor_mode == DescriptorMode::concatenation && !v.fixed_grid) v.fixed_grid = kFixedAblationGrid;
    } else {
      v.embedding_mode = parse_embedding_mode(m);
    }
    v.validate();
    *ctx.out << "ablate-" << kind << ": training mode " << m << '\n';
    auto r = run_sra_variant(ctx, e, v, splits);
    *ctx.out << "  mean test accuracy " << r["mean_test_accuracy"].get<double>() << ", rotation cosine "
             << r["mean_rotation_cosine"].get<double>() << '\n';
    if (kind == "sampler") {
      if (m == "dynamic") checks.push_back(check("dynamic.max_grid_area", r["grid"]["max_area"].get<double>(), "<=", double(v.M)));
      else checks.push_back(check("fixed.all_grids_8x8", r["grid"]["all_fixed"].get<bool>() ? 1.0 : 0.0, "==", 1.0));
    }
    results[m] = std::move(r);
  }
  const std::string name = "ablate-" + kind + (modes.size() == 1 ? "-" + modes.front() : "");
  return finish(ctx, name, results, checks);
}

/// Trains both heads per seed; `held_out` optionally receives each seed's
/// untransformed test instances.
inline std::vector<harness::ToyComparison> comparisons(
    const Context& ctx, const harness::ToyExperimentConfig& e,
    std::map<std::uint64_t, std::vector<harness::SyntheticInstance>>* held_out = nullptr) {
  std::vector<harness::ToyComparison> out;
  const auto seeds = ctx.config["train.seeds"].get<std::size_t>();
  for (std::size_t i = 0; i < seeds; ++i) {
    const std::uint64_t seed = ctx.seed + i;
    const auto split = make_split(ctx, e, seed);
    if (held_out) (*held_out)[seed] = harness::held_out(split);
    harness::ToyComparison c;
    c.seed = seed;
    c.sra = harness::train_head(e, split, harness::ExtractorKind::sra, seed);
    c.roi_align = harness::train_head(e, split, harness::ExtractorKind::roi_align, seed);
    *ctx.out << "seed " << seed << ": sra " << c.sra.test_accuracy << " vs roi_align " << c.roi_align.test_accuracy
             << " (" << c.sra.seconds + c.roi_align.seconds << " s)\n";
    out.push_back(std::move(c));
  }
  return out;
}

inline int cmd_train_toy(const Context& ctx) {
  const auto e = experiment_config(ctx.config);
  const auto runs = comparisons(ctx, e);
  json arr = json::array();
  double sra = 0.0, ra = 0.0;
  std::size_t positive = 0;
  for (const auto& c : runs) {
    arr.push_back(harness::to_json(c));
    sra += c.sra.test_accuracy;
    ra += c.roi_align.test_accuracy;
    positive += c.margin() > 0.0 ? 1 : 0;
  }
  const double n = static_cast<double>(runs.size());
  const double margin = (sra - ra) / n;
  const double expected = ctx.config["accept.expected_margin"].get<double>();
  return finish(ctx, "train-toy",
                {{"mean_sra_test_accuracy", sra / n},
                 {"mean_roi_align_test_accuracy", ra / n},
                 {"mean_margin", margin},
                 {"seeds_with_positive_margin", positive},
                 {"expected_margin_met", margin >= expected},
                 {"runs", arr}},
                {check("mean_accuracy_margin", margin, ">=", ctx.config["accept.min_margin"].get<double>()),
                 check("seeds_with_positive_margin", double(positive), ">", 0)});
}

inline int cmd_invariance(const Context& ctx, const std::string& family_arg) {
  const auto e = experiment_config(ctx.config);
  std::vector<harness::FamilyKind> fams;
  if (family_arg.empty() || family_arg == "all") {
    fams = {harness::FamilyKind::identity, harness::FamilyKind::rotation, harness::FamilyKind::reflection,
            harness::FamilyKind::scale_pan};
  } else {
    try {
      fams = {harness::parse_family(family_arg)};
    } catch (const ConfigError& err) {
      throw UsageFailure(err.what());
    }
  }
  std::map<std::uint64_t, std::vector<harness::SyntheticInstance>> refs;
  const auto runs = comparisons(ctx, e, &refs);
  json results = json::object();
  std::vector<Check> checks;
  const std::size_t samples = e.invariance_samples;
  for (auto fk : fams) {
    auto fam = e.invariance;
    fam.kind = fk;
    double s = 0.0, r = 0.0;
    json per_seed = json::array();
    for (const auto& c : runs) {
      const auto& ref = refs.at(c.seed);
      const auto a = harness::invariance_eval(c.sra.state.extractor(e.train), ref, fam, samples,
                                              derive_seed(c.seed, "cli.invariance"));
      auto tc = e.train;
      tc.kind = harness::ExtractorKind::roi_align;
      const auto b = harness::invariance_eval(c.roi_align.state.extractor(tc), ref, fam, samples,
                                              derive_seed(c.seed, "cli.invariance"));
      s += a.mean_cosine;
      r += b.mean_cosine;
      per_seed.push_back({{"seed", c.seed}, {"sra", harness::to_json(a)}, {"roi_align", harness::to_json(b)}});
    }
    const double n = static_cast<double>(runs.size());
    const std::string name(harness::to_string(fk));
    *ctx.out << name << ": sra " << s / n << " vs roi_align " << r / n << '\n';
    results[name] = {{"mean_sra_cosine", s / n}, {"mean_roi_align_cosine", r / n}, {"runs", per_seed}};
    if (fk == harness::FamilyKind::rotation) checks.push_back(check("rotation.sra_minus_roi_align", (s - r) / n, ">", 0.0));
    if (fk == harness::FamilyKind::identity) {
      checks.push_back(check("identity.sra_deviation", std::abs(s / n - 1.0), "<", 1e-9));
      checks.push_back(check("identity.roi_align_deviation", std::abs(r / n - 1.0), "<", 1e-9));
    }
  }
  return finish(ctx, "invariance", results, checks);
}

inline int cmd_diversity(const Context& ctx) {
  const auto e = experiment_config(ctx.config);
  if (e.train.sra.N < 2) throw UsageFailure("diversity needs sra.N >= 2");
  const auto seeds = ctx.config["train.seeds"].get<std::size_t>();
  json runs = json::array();
  double mean = 0.0;
  for (std::size_t i = 0; i < seeds; ++i) {
    const std::uint64_t seed = ctx.seed + i;
    const auto split = make_split(ctx, e, seed);
    const auto h = harness::train_head(e, split, harness::ExtractorKind::sra, seed);
    mean += h.diversity->fraction_below;
    *ctx.out << "seed " << seed << ": fraction below " << e.diversity_threshold << " = " << h.diversity->fraction_below
             << '\n';
    runs.push_back({{"seed", seed}, {"test_accuracy", h.test_accuracy}, {"diversity", harness::to_json(*h.diversity)}});
  }
  mean /= static_cast<double>(seeds);
  return finish(ctx, "diversity", {{"mean_fraction_below", mean}, {"runs", runs}},
                {check("mean_fraction_below", mean, ">", ctx.config["accept.diversity_target"].get<double>())});
}

inline int cmd_bench(const Context& ctx) {
  const auto c = sra_config(ctx.config);
  const auto C = ctx.config["bench.channels"].get<std::size_t>();
  const auto S = ctx.config["bench.map_size"].get<std::size_t>();
  const auto rois = ctx.config["bench.rois"].get<std::size_t>();
  if (rois == 0 || S < 4) throw UsageFailure("bench needs bench.rois >= 1 and bench.map_size >= 4");
  const auto params = init_sra_params<double>(c, C, derive_seed(ctx.seed, "bench.params"));
  Rng rng = make_rng(ctx.seed, "bench.data");
  Tensor<double> F({C, S, S});
  for (auto& v : F.storage()) v = uniform(rng, -1.0, 1.0);
  std::vector<RoIBox> boxes;
  const double side = static_cast<double>(S - 1);
  for (std::size_t i = 0; i < rois; ++i) {
    const double w = uniform(rng, 0.2 * side, 0.8 * side), h = uniform(rng, 0.2 * side, 0.8 * side);
    const double x0 = uniform(rng, 0.0, side - w), y0 = uniform(rng, 0.0, side - h);
    boxes.push_back({x0, y0, x0 + w, y0 + h});
  }
  auto time_it = [&](auto&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    double sink = 0.0;
    for (const auto& b : boxes) sink += fn(b);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (!std::isfinite(sink)) throw DivergenceError("bench produced non-finite features");
    return ms / static_cast<double>(boxes.size());
  };
  const double sra_ms = time_it([&](const RoIBox& b) { return sra_extract(F, b, params, c).feature[0]; });
  const double align_ms = time_it([&](const RoIBox& b) { return roi_align(F, b)[0]; });
  std::uint64_t flops_sum = 0;
  for (const auto& b : boxes) flops_sum += harness::flops_estimate(c, C, c.grid_for(b)).total();
  const GridSize square = c.fixed_grid ? *c.fixed_grid : dynamic_grid_size(RoIBox{0, 0, 1, 1}, c.M);
  const auto sq = harness::flops_estimate(c, C, square);
  const std::size_t params_closed = parameter_count(c, C);
  *ctx.out << "sra: " << sra_ms << " ms/RoI, roi_align: " << align_ms << " ms/RoI, params " << params_closed
           << ", square-box multiply-adds " << sq.total() << " (x300 = " << sq.per_rois(300) << ")\n";
  std::vector<Check> checks{check("parameter_count_matches_tensors", double(params.parameter_count()), "==",
                                  double(params_closed))};
  if (C == 256 && c.N == 49 && c.K == 256) {
    checks.push_back(check("parameter_count_min", double(params_closed), ">=", 150000));
    checks.push_back(check("parameter_count_max", double(params_closed), "<=", 350000));
  }
  return finish(ctx, "bench",
                {{"sra_config", to_json(c)},
                 {"channels", C},
                 {"parameter_count", params_closed},
                 {"ms_per_roi", {{"sra", sra_ms}, {"roi_align", align_ms}}},
                 {"square_box_grid", {square.h, square.w}},
                 {"flops_square_box", harness::to_json(sq)},
                 {"mean_flops_sampled_boxes", static_cast<double>(flops_sum) / static_cast<double>(rois)},
                 {"mean_flops_per_300_rois", 300.0 * static_cast<double>(flops_sum) / static_cast<double>(rois)}},
                checks);
}

// ---------------------------------------------------------------------------
// entry point

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Semantic RoI feature extraction: checks, ablations, toy training and reports", "sra"};
  app.require_subcommand(1, 1);
  app.fallthrough(false);

  std::string config_path, format = "json", out_dir = "reports", mode, family;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;

  const std::vector<std::pair<std::string, std::string>> commands{
      {"gradcheck", "finite-difference check of the full extractor backward pass"},
      {"oracles", "run every derived reference check"},
      {"ablate-sampler", "dynamic vs fixed 8x8 sampling grid"},
      {"ablate-descriptor", "average / maximum / concatenation descriptor"},
      {"ablate-embedding", "none / position / area embedding"},
      {"train-toy", "train SRA and RoI Align heads on synthetic data and compare"},
      {"invariance", "feature similarity under rotation, reflection, scale and pan"},
      {"diversity", "pairwise similarity of trained sampling masks"},
      {"bench", "timing, parameter count and multiply-add estimate"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "flat JSON file of dotted keys");
    sub->add_option("--set", sets, "override key=value (repeatable)")->expected(1)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    sub->add_option("--seed", seed, "root seed");
    sub->add_option("--out", out_dir, "report directory");
    sub->add_option("--format", format, "report format")->check(CLI::IsMember({"json", "csv"}));
    if (name.rfind("ablate-", 0) == 0) sub->add_option("--mode", mode, "variant to run (default: all)");
    if (name == "invariance") sub->add_option("--family", family, "identity|rotation|reflection|scale_pan|all");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kSuccess;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kSuccess;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n' << "run with --help for usage\n";
    return kUsageError;
  }

  Context ctx;
  ctx.subcommand = app.get_subcommands().front()->get_name();
  ctx.format = format;
  ctx.out_dir = out_dir;
  ctx.out = &out;
  ctx.err = &err;
  try {
    ctx.config = resolve_run_config(config_path, sets, seed);
    ctx.seed = ctx.config["seed"].get<std::uint64_t>();
    // validate every section up front so typos fail before any work
    sra_config(ctx.config);
    experiment_config(ctx.config);
    const auto& s = ctx.subcommand;
    if (s == "gradcheck") return cmd_gradcheck(ctx);
    if (s == "oracles") return cmd_oracles(ctx);
    if (s == "ablate-sampler") return cmd_ablate(ctx, "sampler", mode);
    if (s == "ablate-descriptor") return cmd_ablate(ctx, "descriptor", mode);
    if (s == "ablate-embedding") return cmd_ablate(ctx, "embedding", mode);
    if (s == "train-toy") return cmd_train_toy(ctx);
    if (s == "invariance") return cmd_invariance(ctx, family);
    if (s == "diversity") return cmd_diversity(ctx);
    if (s == "bench") return cmd_bench(ctx);
    err << "usage error: unknown subcommand " << s << '\n';
    return kUsageError;
  } catch (const UsageFailure& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const nlohmann::json::exception& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const DivergenceError& e) {
    err << "acceptance failure: " << e.what() << '\n';
    return kAcceptanceFailure;
  }
}

}  // namespace sra::cli
