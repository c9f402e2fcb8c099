#pragma once

// Synthetic articulated objects on feature maps. Each class is a fixed layout
// of Gaussian parts with their own channel signatures. Rotation and reflection
// move the parts about the box centre; scale and pan only touch the box, the
// way a sloppy proposal would.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "sra/errors.hpp"
#include "sra/rng.hpp"
#include "sra/sampler.hpp"
#include "sra/tensor.hpp"
#include "sra/tjson.hpp"

namespace sra::harness {

struct Pose {
  double rotation_deg = 0.0;  // counter-clockwise in image coordinates
  bool reflected = false;     // horizontal flip about the box centre, applied before rotation
  double scale = 1.0;         // box side multiplier
  double pan_x = 0.0;         // box centre shift, fraction of base box width
  double pan_y = 0.0;

  friend bool operator==(const Pose&, const Pose&) = default;
};

/// Composes `delta` after `base`. Angles are kept in [-180, 180] so that
/// group identities (two half turns, two flips) land on the exact base pose.
inline Pose compose(const Pose& base, const Pose& delta) {
  if (!(delta.scale > 0.0) || !std::isfinite(delta.rotation_deg) || !std::isfinite(delta.pan_x) ||
      !std::isfinite(delta.pan_y)) {
    throw ConfigError("pose delta must have finite angle/pan and positive scale");
  }
  Pose out;
  // R(a) F R(b) = R(a - b) F, with F the horizontal flip
  const double carried = delta.reflected ? -base.rotation_deg : base.rotation_deg;
  out.rotation_deg = std::remainder(delta.rotation_deg + carried, 360.0);
  if (out.rotation_deg == -180.0) out.rotation_deg = 180.0;
  out.reflected = base.reflected != delta.reflected;
  out.scale = base.scale * delta.scale;
  out.pan_x = base.pan_x + delta.pan_x;
  out.pan_y = base.pan_y + delta.pan_y;
  return out;
}

struct Part {
  double u = 0.0, v = 0.0;  // offset from the object centre, in object radii
  double sigma = 0.25;      // in object radii
  double amplitude = 1.0;
  std::vector<double> signature;  // length C
};

/// Everything needed to re-render an instance under a new pose.
struct Scene {
  std::size_t channels = 16, height = 64, width = 64;
  double cx = 32.0, cy = 32.0;  // object and base box centre
  double bw = 32.0, bh = 32.0;  // base box size
  std::vector<Part> parts;
  double noise = 0.05;
  std::uint64_t noise_seed = 0;
  std::uint64_t stem_seed = 0;
  double stem_scale = 0.5;
};

struct SyntheticInstance {
  Tensor<double> feature_map;  // (C,H,W)
  RoIBox box;
  std::size_t label = 0;
  Pose pose;
  std::uint64_t seed = 0;
  Scene scene;
};

struct DatasetOptions {
  std::size_t channels = 16;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t n_classes = 4;
  std::size_t n_instances = 800;
  std::size_t min_parts = 3;
  std::size_t max_parts = 5;
  double max_signature_cosine = 0.5;
  double signature_correlation = 0.0;  // share of a common direction in every signature
  double box_min = 26.0;  // base box side range, pixels
  double box_max = 40.0;
  double max_aspect = 1.3;
  double centre_jitter = 6.0;  // pixels
  double part_jitter = 0.04;   // object radii
  double sigma_min = 0.15;     // part width range, object radii
  double sigma_max = 0.25;
  double amplitude_jitter = 0.2;
  double noise = 0.05;
  double stem_scale = 0.5;
  // pose spread of the generated instances
  double rotation_deg = 10.0;
  double scale_jitter = 0.1;
  double pan_jitter = 0.05;
  bool reflections = false;

  void validate() const {
    if (n_classes < 2) throw ConfigError("dataset: n_classes must be >= 2");
    if (channels < 1 || height < 8 || width < 8) throw ConfigError("dataset: map too small");
    if (min_parts < 1 || max_parts < min_parts) throw ConfigError("dataset: bad part range");
    if (!(box_min > 1.0) || box_max < box_min || box_max > static_cast<double>(std::min(height, width)))
      throw ConfigError("dataset: bad box size range");
    if (!(sigma_min > 0.0) || sigma_max < sigma_min) throw ConfigError("dataset: bad part width range");
    if (!(amplitude_jitter >= 0.0 && amplitude_jitter < 1.0)) throw ConfigError("dataset: amplitude_jitter must lie in [0,1)");
    if (!(max_aspect >= 1.0)) throw ConfigError("dataset: max_aspect must be >= 1");
    if (!(signature_correlation >= 0.0 && signature_correlation < max_signature_cosine))
      throw ConfigError("dataset: signature_correlation must lie in [0, max_signature_cosine)");
    if (!(max_signature_cosine > 0.0 && max_signature_cosine < 1.0))
      throw ConfigError("dataset: max_signature_cosine must lie in (0,1)");
  }
};

struct ClassLayout {
  std::vector<Part> parts;
};

struct Dataset {
  DatasetOptions options;
  std::uint64_t seed = 0;
  std::vector<ClassLayout> classes;
  std::vector<SyntheticInstance> instances;
};

namespace detail {

/// Fixed residual 3x3 stem: F + conv(F), zero padded. Weights depend only on the seed.
inline Tensor<double> stem_weights(std::size_t channels, std::uint64_t seed, double scale) {
  Tensor<double> w({channels, channels, 9});
  Rng rng = make_rng(seed, "synthetic.stem");
  const double sd = scale / std::sqrt(9.0 * static_cast<double>(channels));
  for (auto& v : w.storage()) v = normal(rng, 0.0, sd);
  return w;
}

inline void apply_stem(Tensor<double>& F, const Tensor<double>& w) {
  const std::size_t C = F.dim(0), H = F.dim(1), W = F.dim(2);
  const Tensor<double> x = F;
  for (std::size_t o = 0; o < C; ++o) {
    double* out = F.data().data() + o * H * W;
    for (std::size_t i = 0; i < C; ++i) {
      const double* in = x.data().data() + i * H * W;
      const double* k = w.data().data() + (o * C + i) * 9;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const double kv = k[(dy + 1) * 3 + (dx + 1)];
          const std::size_t y_lo = dy < 0 ? 1 : 0, y_hi = dy > 0 ? H - 1 : H;
          const std::size_t x_lo = dx < 0 ? 1 : 0, x_hi = dx > 0 ? W - 1 : W;
          for (std::size_t y = y_lo; y < y_hi; ++y) {
            const double* row = in + (y + dy) * W + dx;
            double* orow = out + y * W;
            for (std::size_t xx = x_lo; xx < x_hi; ++xx) orow[xx] += kv * row[xx];
          }
        }
      }
    }
  }
}

inline double object_radius(const Scene& s) { return 0.5 * std::min(s.bw, s.bh); }

}  // namespace detail

/// Renders the scene under `pose`. Returns the feature map and the posed box,
/// clamped to the map.
inline std::pair<Tensor<double>, RoIBox> render(const Scene& s, const Pose& pose) {
  Tensor<double> F({s.channels, s.height, s.width});
  const double th = pose.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), sn = std::sin(th);
  const double r = detail::object_radius(s);
  const std::size_t plane = s.height * s.width;
  std::vector<double> g;
  for (const auto& part : s.parts) {
    if (part.signature.size() != s.channels) throw ShapeError("render: signature length != C");
    double ox = part.u * r;
    const double oy = part.v * r;
    if (pose.reflected) ox = -ox;
    const double px = s.cx + c * ox - sn * oy;
    const double py = s.cy + sn * ox + c * oy;
    const double sig = part.sigma * r;
    const double reach = 4.0 * sig;
    const auto lo = [](double v) { return static_cast<long>(std::max(0.0, std::ceil(v))); };
    const long y0 = lo(py - reach), x0 = lo(px - reach);
    const long y1 = std::min<long>(static_cast<long>(s.height) - 1, static_cast<long>(std::floor(py + reach)));
    const long x1 = std::min<long>(static_cast<long>(s.width) - 1, static_cast<long>(std::floor(px + reach)));
    if (y1 < y0 || x1 < x0) continue;
    const double inv = 1.0 / (2.0 * sig * sig);
    g.assign(static_cast<std::size_t>((y1 - y0 + 1) * (x1 - x0 + 1)), 0.0);
    std::size_t q = 0;
    for (long y = y0; y <= y1; ++y) {
      for (long x = x0; x <= x1; ++x) {
        const double dx = static_cast<double>(x) - px, dy = static_cast<double>(y) - py;
        g[q++] = part.amplitude * std::exp(-(dx * dx + dy * dy) * inv);
      }
    }
    for (std::size_t ch = 0; ch < s.channels; ++ch) {
      const double a = part.signature[ch];
      double* fc = F.data().data() + ch * plane;
      q = 0;
      for (long y = y0; y <= y1; ++y) {
        for (long x = x0; x <= x1; ++x) fc[y * static_cast<long>(s.width) + x] += a * g[q++];
      }
    }
  }
  if (s.noise > 0.0) {
    Rng rng = make_rng(s.noise_seed, "synthetic.noise");
    for (auto& v : F.storage()) v += normal(rng, 0.0, s.noise);
  }
  if (s.stem_scale > 0.0) detail::apply_stem(F, detail::stem_weights(s.channels, s.stem_seed, s.stem_scale));

  const double W = static_cast<double>(s.width - 1), H = static_cast<double>(s.height - 1);
  const double bcx = s.cx + pose.pan_x * s.bw, bcy = s.cy + pose.pan_y * s.bh;
  const double hw = 0.5 * s.bw * pose.scale, hh = 0.5 * s.bh * pose.scale;
  RoIBox box{std::clamp(bcx - hw, 0.0, W), std::clamp(bcy - hh, 0.0, H), std::clamp(bcx + hw, 0.0, W),
             std::clamp(bcy + hh, 0.0, H)};
  // a box panned entirely off the map collapses to a one-pixel sliver at the edge
  if (box.x1 <= box.x0) box.x0 = std::max(0.0, box.x1 - 1.0), box.x1 = box.x0 + 1.0;
  if (box.y1 <= box.y0) box.y0 = std::max(0.0, box.y1 - 1.0), box.y1 = box.y0 + 1.0;
  return {std::move(F), box};
}

/// Re-renders `inst` with `delta` composed onto its pose.
inline SyntheticInstance apply_transform(const SyntheticInstance& inst, const Pose& delta) {
  SyntheticInstance out;
  out.label = inst.label;
  out.seed = inst.seed;
  out.scene = inst.scene;
  out.pose = compose(inst.pose, delta);
  auto [F, box] = render(out.scene, out.pose);
  out.feature_map = std::move(F);
  out.box = box;
  return out;
}

/// Draws class layouts; signatures are rejection sampled so that any two
/// parts (same class or not) have cosine below the configured bound.
inline std::vector<ClassLayout> make_class_layouts(const DatasetOptions& o, std::uint64_t seed) {
  o.validate();
  Rng rng = make_rng(seed, "synthetic.layouts");
  std::vector<ClassLayout> classes(o.n_classes);
  std::vector<const std::vector<double>*> accepted;
  std::vector<double> common(o.channels);
  for (auto& v : common) v = normal(rng, 0.0, 1.0);
  {
    double n2 = 0.0;
    for (double v : common) n2 += v * v;
    for (auto& v : common) v /= std::sqrt(n2);
  }
  for (auto& cls : classes) {
    const auto n_parts = o.min_parts + static_cast<std::size_t>(
                                           rng() % static_cast<std::uint64_t>(o.max_parts - o.min_parts + 1));
    cls.parts.resize(n_parts);
    for (std::size_t p = 0; p < n_parts; ++p) {
      Part& part = cls.parts[p];
      // spread parts around the centre: one angular sector each
      const double sector = 2.0 * std::numbers::pi / static_cast<double>(n_parts);
      const double ang = sector * (static_cast<double>(p) + uniform(rng, 0.15, 0.85));
      const double rad = uniform(rng, 0.3, 0.65);
      part.u = rad * std::cos(ang);
      part.v = rad * std::sin(ang);
      part.sigma = uniform(rng, o.sigma_min, o.sigma_max);
      part.amplitude = 1.0;
      part.signature.assign(o.channels, 0.0);
      for (int attempt = 0;; ++attempt) {
        if (attempt > 10000) throw ConfigError("dataset: cannot satisfy the signature cosine bound");
        // sqrt(rho) common + sqrt(1-rho) random unit: expected pairwise cosine rho
        double n2 = 0.0;
        for (auto& v : part.signature) n2 += (v = normal(rng, 0.0, 1.0)) * v;
        const double a = std::sqrt(o.signature_correlation), b = std::sqrt((1.0 - o.signature_correlation) / n2);
        for (std::size_t ch = 0; ch < o.channels; ++ch) part.signature[ch] = a * common[ch] + b * part.signature[ch];
        bool ok = true;
        for (const auto* other : accepted) {
          if (cosine_similarity<double>(part.signature, *other) >= o.max_signature_cosine) {
            ok = false;
            break;
          }
        }
        if (ok) break;
      }
      // unit-norm signatures scaled so a peak carries about 0.5 per channel
      double n2 = 0.0;
      for (double v : part.signature) n2 += v * v;
      const double k = 0.5 * std::sqrt(static_cast<double>(o.channels) / n2);
      for (auto& v : part.signature) v *= k;
      accepted.push_back(&part.signature);
    }
  }
  return classes;
}

inline SyntheticInstance make_instance(const DatasetOptions& o, const std::vector<ClassLayout>& classes,
                                       std::uint64_t dataset_seed, std::size_t index) {
  SyntheticInstance inst;
  inst.label = index % classes.size();
  inst.seed = derive_seed(dataset_seed, "synthetic.instance", index);
  Rng rng(inst.seed);
  Scene& s = inst.scene;
  s.channels = o.channels;
  s.height = o.height;
  s.width = o.width;
  s.noise = o.noise;
  s.stem_scale = o.stem_scale;
  s.stem_seed = derive_seed(dataset_seed, "synthetic.stem");
  s.noise_seed = derive_seed(inst.seed, "noise");
  const double side = uniform(rng, o.box_min, o.box_max);
  const double aspect = std::exp(uniform(rng, -std::log(o.max_aspect), std::log(o.max_aspect)));
  s.bw = side * std::sqrt(aspect);
  s.bh = side / std::sqrt(aspect);
  s.cx = 0.5 * static_cast<double>(o.width - 1) + uniform(rng, -o.centre_jitter, o.centre_jitter);
  s.cy = 0.5 * static_cast<double>(o.height - 1) + uniform(rng, -o.centre_jitter, o.centre_jitter);
  s.parts = classes[inst.label].parts;
  for (auto& p : s.parts) {
    p.u += normal(rng, 0.0, o.part_jitter);
    p.v += normal(rng, 0.0, o.part_jitter);
    p.amplitude = uniform(rng, 1.0 - o.amplitude_jitter, 1.0 + o.amplitude_jitter);
  }
  inst.pose.rotation_deg = uniform(rng, -o.rotation_deg, o.rotation_deg);
  inst.pose.reflected = o.reflections && uniform(rng, 0.0, 1.0) < 0.5;
  inst.pose.scale = uniform(rng, 1.0 - o.scale_jitter, 1.0 + o.scale_jitter);
  inst.pose.pan_x = uniform(rng, -o.pan_jitter, o.pan_jitter);
  inst.pose.pan_y = uniform(rng, -o.pan_jitter, o.pan_jitter);
  auto [F, box] = render(s, inst.pose);
  inst.feature_map = std::move(F);
  inst.box = box;
  return inst;
}

/// Labels are assigned round-robin, so class counts differ by at most one.
inline Dataset generate_dataset(const DatasetOptions& options, std::uint64_t seed) {
  options.validate();
  Dataset d;
  d.options = options;
  d.seed = seed;
  d.classes = make_class_layouts(options, seed);
  d.instances.reserve(options.n_instances);
  for (std::size_t i = 0; i < options.n_instances; ++i) {
    d.instances.push_back(make_instance(options, d.classes, seed, i));
  }
  return d;
}

inline Dataset generate_dataset(std::size_t n_classes, std::size_t n_instances, std::uint64_t seed) {
  DatasetOptions o;
  o.n_classes = n_classes;
  o.n_instances = n_instances;
  return generate_dataset(o, seed);
}

// ---------------------------------------------------------------------------
// JSON and on-disk cache

inline nlohmann::json to_json(const DatasetOptions& o) {
  return {{"channels", o.channels},       {"height", o.height},
          {"width", o.width},             {"n_classes", o.n_classes},
          {"n_instances", o.n_instances}, {"min_parts", o.min_parts},
          {"max_parts", o.max_parts},     {"max_signature_cosine", o.max_signature_cosine},
          {"signature_correlation", o.signature_correlation},
          {"box_min", o.box_min},         {"box_max", o.box_max},
          {"max_aspect", o.max_aspect},   {"centre_jitter", o.centre_jitter},
          {"part_jitter", o.part_jitter}, {"sigma_min", o.sigma_min},
          {"sigma_max", o.sigma_max},     {"amplitude_jitter", o.amplitude_jitter},
          {"noise", o.noise},
          {"stem_scale", o.stem_scale},   {"rotation_deg", o.rotation_deg},
          {"scale_jitter", o.scale_jitter}, {"pan_jitter", o.pan_jitter},
          {"reflections", o.reflections}};
}

inline DatasetOptions dataset_options_from_json(const nlohmann::json& j) {
  DatasetOptions o;
  const nlohmann::json defaults = to_json(o);
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("dataset: unknown key '" + key + "'");
  }
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j.at(k).get<std::remove_reference_t<decltype(field)>>();
  };
  get("channels", o.channels);
  get("height", o.height);
  get("width", o.width);
  get("n_classes", o.n_classes);
  get("n_instances", o.n_instances);
  get("min_parts", o.min_parts);
  get("max_parts", o.max_parts);
  get("max_signature_cosine", o.max_signature_cosine);
  get("signature_correlation", o.signature_correlation);
  get("box_min", o.box_min);
  get("box_max", o.box_max);
  get("max_aspect", o.max_aspect);
  get("centre_jitter", o.centre_jitter);
  get("part_jitter", o.part_jitter);
  get("sigma_min", o.sigma_min);
  get("sigma_max", o.sigma_max);
  get("amplitude_jitter", o.amplitude_jitter);
  get("noise", o.noise);
  get("stem_scale", o.stem_scale);
  get("rotation_deg", o.rotation_deg);
  get("scale_jitter", o.scale_jitter);
  get("pan_jitter", o.pan_jitter);
  get("reflections", o.reflections);
  o.validate();
  return o;
}

inline nlohmann::json to_json(const Pose& p) {
  return {{"rotation_deg", p.rotation_deg}, {"reflected", p.reflected}, {"scale", p.scale},
          {"pan_x", p.pan_x}, {"pan_y", p.pan_y}};
}
inline Pose pose_from_json(const nlohmann::json& j) {
  return {j.at("rotation_deg").get<double>(), j.at("reflected").get<bool>(), j.at("scale").get<double>(),
          j.at("pan_x").get<double>(), j.at("pan_y").get<double>()};
}

inline nlohmann::json to_json(const RoIBox& b) { return {b.x0, b.y0, b.x1, b.y1}; }
inline RoIBox box_from_json(const nlohmann::json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>()};
}

inline nlohmann::json to_json(const Part& p) {
  return {{"u", p.u}, {"v", p.v}, {"sigma", p.sigma}, {"amplitude", p.amplitude}, {"signature", p.signature}};
}
inline Part part_from_json(const nlohmann::json& j) {
  return {j.at("u").get<double>(), j.at("v").get<double>(), j.at("sigma").get<double>(),
          j.at("amplitude").get<double>(), j.at("signature").get<std::vector<double>>()};
}

inline nlohmann::json to_json(const Scene& s) {
  nlohmann::json parts = nlohmann::json::array();
  for (const auto& p : s.parts) parts.push_back(to_json(p));
  return {{"channels", s.channels}, {"height", s.height}, {"width", s.width}, {"cx", s.cx},
          {"cy", s.cy}, {"bw", s.bw}, {"bh", s.bh}, {"parts", parts}, {"noise", s.noise},
          {"noise_seed", s.noise_seed}, {"stem_seed", s.stem_seed}, {"stem_scale", s.stem_scale}};
}
inline Scene scene_from_json(const nlohmann::json& j) {
  Scene s;
  s.channels = j.at("channels").get<std::size_t>();
  s.height = j.at("height").get<std::size_t>();
  s.width = j.at("width").get<std::size_t>();
  s.cx = j.at("cx").get<double>();
  s.cy = j.at("cy").get<double>();
  s.bw = j.at("bw").get<double>();
  s.bh = j.at("bh").get<double>();
  for (const auto& p : j.at("parts")) s.parts.push_back(part_from_json(p));
  s.noise = j.at("noise").get<double>();
  s.noise_seed = j.at("noise_seed").get<std::uint64_t>();
  s.stem_seed = j.at("stem_seed").get<std::uint64_t>();
  s.stem_scale = j.at("stem_scale").get<double>();
  return s;
}

inline constexpr std::string_view kDatasetFormat = "sra-dataset/v1";

/// Writes manifest.json plus one tjson bundle per instance under `dir`.
inline void save_dataset(const std::filesystem::path& dir, const Dataset& d) {
  nlohmann::json manifest{{"format", kDatasetFormat}, {"seed", d.seed}, {"options", to_json(d.options)}};
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : d.classes) {
    nlohmann::json parts = nlohmann::json::array();
    for (const auto& p : c.parts) parts.push_back(to_json(p));
    classes.push_back(parts);
  }
  manifest["classes"] = classes;
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < d.instances.size(); ++i) {
    const auto& inst = d.instances[i];
    char name[32];
    std::snprintf(name, sizeof name, "instance_%05zu.json", i);
    write_json_file(dir / name, {{"feature_map", to_tjson(inst.feature_map)}});
    entries.push_back({{"file", name}, {"label", inst.label}, {"seed", inst.seed},
                       {"pose", to_json(inst.pose)}, {"box", to_json(inst.box)}, {"scene", to_json(inst.scene)}});
  }
  manifest["instances"] = entries;
  write_json_file(dir / "manifest.json", manifest);
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest = read_json_file(dir / "manifest.json");
  if (manifest.value("format", "") != kDatasetFormat) {
    throw ConfigError("dataset cache " + dir.string() + ": unsupported format");
  }
  Dataset d;
  d.seed = manifest.at("seed").get<std::uint64_t>();
  d.options = dataset_options_from_json(manifest.at("options"));
  for (const auto& c : manifest.at("classes")) {
    ClassLayout layout;
    for (const auto& p : c) layout.parts.push_back(part_from_json(p));
    d.classes.push_back(std::move(layout));
  }
  for (const auto& e : manifest.at("instances")) {
    SyntheticInstance inst;
    inst.label = e.at("label").get<std::size_t>();
    inst.seed = e.at("seed").get<std::uint64_t>();
    inst.pose = pose_from_json(e.at("pose"));
    inst.box = box_from_json(e.at("box"));
    inst.scene = scene_from_json(e.at("scene"));
    inst.feature_map = from_tjson<double>(read_json_file(dir / e.at("file").get<std::string>()).at("feature_map"));
    d.instances.push_back(std::move(inst));
  }
  return d;
}

}  // namespace sra::harness
