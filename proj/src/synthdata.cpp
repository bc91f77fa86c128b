#include "wavedepth/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "wavedepth/error.hpp"
#include "wavedepth/io.hpp"
#include "wavedepth/json_fields.hpp"
#include "wavedepth/random.hpp"

namespace wavedepth {
namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kExposure = 2.0;

// Per-seed shape and texture variation.
struct Variation {
  double radius = 1.0;
  double fold_phase = 0.0;
  double twist_phase = 0.0;
  double tex_phase[4] = {0, 0, 0, 0};
  double tint[3] = {0, 0, 0};
};

Variation draw_variation(const SceneParams& p) {
  Rng rng(mix_seed(p.seed));
  Variation v;
  v.radius = p.tube_radius * rng.uniform(0.9, 1.1);
  v.fold_phase = rng.uniform(0.0, 2.0 * kPi);
  v.twist_phase = rng.uniform(0.0, 2.0 * kPi);
  for (double& t : v.tex_phase) t = rng.uniform(0.0, 2.0 * kPi);
  for (double& t : v.tint) t = rng.uniform(-0.03, 0.03);
  return v;
}

struct Tube {
  const SceneParams& p;
  const Variation& v;

  double radius(double theta, double z) const {
    const double axial = 2.0 * kPi * static_cast<double>(p.folds) *
                             (z + p.camera_offset) / p.d_max +
                         v.fold_phase;
    return v.radius * (1.0 + p.fold_amplitude * std::sin(axial) *
                                 (1.0 + 0.3 * std::sin(2.0 * theta +
                                                       v.twist_phase)));
  }
  // Bounds on the radius over all theta, z.
  double r_min() const { return v.radius * (1.0 - 1.3 * p.fold_amplitude); }
  double r_max() const { return v.radius * (1.0 + 1.3 * p.fold_amplitude); }
};

// First t > 0 where the ray (t*dx, t*dy, t) meets the wall, or a negative
// value when the wall lies beyond d_max.
double intersect(const Tube& tube, double rho, double theta, double d_max) {
  if (rho <= 0.0) return -1.0;
  auto f = [&](double t) { return t * rho - tube.radius(theta, t); };
  double lo = std::max(tube.r_min() / rho, 0.0);
  const double hi = std::min(tube.r_max() / rho, d_max);
  if (lo >= hi) return lo <= d_max && f(lo) >= 0.0 ? lo : -1.0;
  const double step = d_max / 2000.0;
  double f_lo = f(lo);
  if (f_lo >= 0.0) return lo;
  while (lo < hi) {
    const double t = std::min(lo + step, hi);
    const double f_t = f(t);
    if (f_t >= 0.0) {
      double a = lo, b = t;
      for (int i = 0; i < 80; ++i) {
        const double m = 0.5 * (a + b);
        if (m <= a || m >= b) break;
        if (f(m) >= 0.0) {
          b = m;
        } else {
          a = m;
        }
      }
      return b;
    }
    lo = t;
    f_lo = f_t;
  }
  return -1.0;
}

double albedo_texture(const Variation& v, double theta, double z) {
  return 0.04 * (0.5 * std::sin(3.0 * theta + v.tex_phase[0]) *
                     std::sin(1.7 * z + v.tex_phase[1]) +
                 0.5 * std::sin(5.0 * theta + 2.3 * z + v.tex_phase[2]));
}

std::size_t reflect(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * static_cast<long>(n) - 2;
  long k = i % period;
  if (k < 0) k += period;
  if (k >= static_cast<long>(n)) k = period - k;
  return static_cast<std::size_t>(k);
}

std::string sample_id(std::size_t i) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return buf;
}

}  // namespace

void validate(const SceneParams& p) {
  if (p.side == 0 || p.side % 2 != 0) {
    throw ContractError("scene.side must be even and positive, got " +
                        std::to_string(p.side));
  }
  if (!(p.tube_radius > 0.0)) {
    throw ContractError("scene.tube_radius must be positive (degenerate tube)");
  }
  if (!(p.d_min > 0.0) || !(p.d_max > p.d_min)) {
    throw ContractError("scene depth range requires 0 < d_min < d_max");
  }
  if (!(p.blur_sigma >= 0.0)) {
    throw ContractError("scene.blur_sigma must be non-negative");
  }
  if (!(p.fold_amplitude >= 0.0) || p.fold_amplitude * 1.3 >= 1.0) {
    throw ContractError("scene.fold_amplitude must lie in [0, 1/1.3)");
  }
  if (!(p.falloff >= 0.0)) {
    throw ContractError("scene.falloff must be non-negative");
  }
  if (!(p.specular_radius > 0.0)) {
    throw ContractError("scene.specular_radius must be positive");
  }
  if (!(p.fov_deg > 0.0 && p.fov_deg < 180.0)) {
    throw ContractError("scene.fov_deg must lie in (0, 180)");
  }
  for (double v : {p.camera_offset, p.fold_amplitude, p.falloff, p.d_max}) {
    if (!std::isfinite(v)) throw ContractError("scene parameters must be finite");
  }
}

nlohmann::json scene_to_json(const SceneParams& p) {
  return {{"side", p.side},
          {"tube_radius", p.tube_radius},
          {"camera_offset", p.camera_offset},
          {"folds", p.folds},
          {"fold_amplitude", p.fold_amplitude},
          {"falloff", p.falloff},
          {"blur_sigma", p.blur_sigma},
          {"speculars", p.speculars},
          {"specular_radius", p.specular_radius},
          {"fov_deg", p.fov_deg},
          {"d_min", p.d_min},
          {"d_max", p.d_max},
          {"seed", p.seed}};
}

SceneParams scene_from_json(const nlohmann::json& j, const std::string& path) {
  SceneParams p;
  FieldReader r(j, path);
  r.read("side", p.side);
  r.read("tube_radius", p.tube_radius);
  r.read("camera_offset", p.camera_offset);
  r.read("folds", p.folds);
  r.read("fold_amplitude", p.fold_amplitude);
  r.read("falloff", p.falloff);
  r.read("blur_sigma", p.blur_sigma);
  r.read("speculars", p.speculars);
  r.read("specular_radius", p.specular_radius);
  r.read("fov_deg", p.fov_deg);
  r.read("d_min", p.d_min);
  r.read("d_max", p.d_max);
  r.read("seed", p.seed);
  r.finish();
  return p;
}

CameraIntrinsics scene_intrinsics(const SceneParams& p) {
  CameraIntrinsics k;
  const double half = static_cast<double>(p.side) / 2.0;
  k.fx = k.fy = half / std::tan(p.fov_deg * kPi / 360.0);
  k.cx = k.cy = (static_cast<double>(p.side) - 1.0) / 2.0;
  k.width = k.height = p.side;
  return k;
}

Scene generate_scene(const SceneParams& p) {
  validate(p);
  const Variation var = draw_variation(p);
  const Tube tube{p, var};
  const CameraIntrinsics k = scene_intrinsics(p);
  const std::size_t n = p.side;
  Scene s{Tensor(Shape(1, 3, n, n)), Tensor(Shape(1, 1, n, n)), k};
  const double base[3] = {0.80, 0.42, 0.38};

  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double dx = (static_cast<double>(x) - k.cx) / k.fx;
      const double dy = (static_cast<double>(y) - k.cy) / k.fy;
      const double rho = std::hypot(dx, dy);
      const double theta = std::atan2(dy, dx);
      const double norm = std::sqrt(1.0 + rho * rho);
      // The wall is parameterized by axial z; depth is the range along the ray.
      const double hit = intersect(tube, rho, theta, p.d_max / norm);

      double depth = hit > 0.0 ? hit * norm : p.d_max;
      depth = std::clamp(depth, p.d_min, p.d_max);
      s.depth.at(0, 0, y, x) = depth;

      // Diffuse albedo times falloff with the same ray range as the depth.
      const double light = kExposure * std::pow(var.radius / depth, p.falloff);
      const double tex = albedo_texture(var, theta, depth / norm);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double albedo = base[ch] * (1.0 + tex + var.tint[ch]);
        s.rgb.at(0, ch, y, x) = std::clamp(albedo * light, 0.0, 1.0);
      }
    }
  }
  if (p.speculars > 0) {
    s.rgb = add_speculars(s.rgb, p.speculars, p.specular_radius,
                          mix_seed(p.seed ^ 0x5eec0ffeeULL));
  }
  s.rgb = gaussian_blur(s.rgb, p.blur_sigma);
  return s;
}

Tensor gaussian_blur(const Tensor& image, double sigma) {
  if (!(sigma >= 0.0)) throw ContractError("gaussian_blur: sigma must be >= 0");
  if (sigma == 0.0) return image;
  const long half = static_cast<long>(std::ceil(4.0 * sigma));
  std::vector<double> kernel(2 * half + 1);
  double total = 0.0;
  for (long i = -half; i <= half; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    kernel[i + half] = v;
    total += v;
  }
  for (double& v : kernel) v /= total;

  const Shape& s = image.shape();
  Tensor tmp(s), out(s);
  for (std::size_t b = 0; b < s.n(); ++b) {
    for (std::size_t c = 0; c < s.c(); ++c) {
      for (std::size_t y = 0; y < s.h(); ++y) {
        for (std::size_t x = 0; x < s.w(); ++x) {
          double acc = 0.0;
          for (long i = -half; i <= half; ++i) {
            acc += kernel[i + half] *
                   image.at(b, c, y, reflect(static_cast<long>(x) + i, s.w()));
          }
          tmp.at(b, c, y, x) = acc;
        }
      }
      for (std::size_t y = 0; y < s.h(); ++y) {
        for (std::size_t x = 0; x < s.w(); ++x) {
          double acc = 0.0;
          for (long i = -half; i <= half; ++i) {
            acc += kernel[i + half] *
                   tmp.at(b, c, reflect(static_cast<long>(y) + i, s.h()), x);
          }
          out.at(b, c, y, x) = acc;
        }
      }
    }
  }
  return out;
}

Tensor add_speculars(const Tensor& rgb, std::size_t count, double radius,
                     std::uint64_t seed) {
  if (!(radius > 0.0)) throw ContractError("add_speculars: radius must be > 0");
  const Shape& s = rgb.shape();
  Tensor out = rgb;
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const double cx = rng.uniform(0.0, static_cast<double>(s.w()));
    const double cy = rng.uniform(0.0, static_cast<double>(s.h()));
    for (std::size_t y = 0; y < s.h(); ++y) {
      for (std::size_t x = 0; x < s.w(); ++x) {
        const double ddx = static_cast<double>(x) - cx;
        const double ddy = static_cast<double>(y) - cy;
        const double g =
            std::exp(-(ddx * ddx + ddy * ddy) / (2.0 * radius * radius));
        if (g < 1e-6) continue;
        for (std::size_t b = 0; b < s.n(); ++b) {
          for (std::size_t c = 0; c < s.c(); ++c) {
            double& v = out.at(b, c, y, x);
            v = std::min(1.0, v + 1.5 * g);
          }
        }
      }
    }
  }
  return out;
}

const std::vector<Sample>& Dataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  throw ContractError("unknown dataset split '" + name +
                      "' (expected train or val)");
}

Dataset make_dataset(const SceneParams& p, std::size_t n_train,
                     std::size_t n_val, std::uint64_t base_seed) {
  validate(p);
  if (n_train < 1 || n_val < 1) {
    throw ContractError("make_dataset: n_train and n_val must be >= 1");
  }
  Dataset d;
  d.scene = p;
  d.intrinsics = scene_intrinsics(p);
  d.base_seed = base_seed;
  auto make = [&](std::size_t i, const std::string& split,
                  std::uint64_t seed) {
    SceneParams q = p;
    q.seed = seed;
    Scene sc = generate_scene(q);
    Sample smp;
    smp.id = sample_id(i);
    smp.split = split;
    smp.seed = seed;
    smp.rgb = std::move(sc.rgb);
    for (double& v : smp.rgb.values()) v = io::quantize_u8(v);
    smp.depth = std::move(sc.depth);
    for (double& v : smp.depth.values()) v = static_cast<float>(v);
    return smp;
  };
  for (std::size_t i = 0; i < n_train; ++i) {
    d.train.push_back(make(i, "train", base_seed + i));
  }
  for (std::size_t i = 0; i < n_val; ++i) {
    d.val.push_back(make(i, "val", base_seed + n_train + i));
  }
  return d;
}

void write_dataset(const Dataset& d, const std::filesystem::path& dir) {
  const auto manifest = dir / "manifest.json";
  if (std::filesystem::exists(manifest)) {
    throw IoError("refusing to overwrite existing dataset at " +
                  manifest.string());
  }
  nlohmann::json samples = nlohmann::json::array();
  for (const auto* split : {&d.train, &d.val}) {
    for (const Sample& s : *split) {
      const auto sub = std::filesystem::path(s.split);
      const auto rgb = sub / (s.id + "_rgb.ppm");
      const auto depth = sub / (s.id + "_depth.pfm");
      for (const auto& f : {rgb, depth}) {
        if (std::filesystem::exists(dir / f)) {
          throw IoError("refusing to overwrite existing file " +
                        (dir / f).string());
        }
      }
      std::filesystem::create_directories(dir / sub);
      io::write_ppm(dir / rgb, s.rgb);
      io::write_pfm(dir / depth, s.depth);
      samples.push_back({{"id", s.id},
                         {"split", s.split},
                         {"seed", s.seed},
                         {"rgb", rgb.generic_string()},
                         {"depth", depth.generic_string()}});
    }
  }
  nlohmann::json m = {{"format", "wavedepth-dataset"},
                      {"version", 1},
                      {"base_seed", d.base_seed},
                      {"n_train", d.train.size()},
                      {"n_val", d.val.size()},
                      {"d_min", d.scene.d_min},
                      {"d_max", d.scene.d_max},
                      {"scene", scene_to_json(d.scene)},
                      {"intrinsics", intrinsics_to_json(d.intrinsics)},
                      {"samples", samples}};
  io::write_json(manifest, m);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const nlohmann::json m = io::read_json(dir / "manifest.json");
  if (!m.is_object() || m.value("format", "") != "wavedepth-dataset") {
    throw ContractError(dir.string() + ": not a dataset manifest");
  }
  Dataset d;
  try {
    d.scene = scene_from_json(m.at("scene"));
    d.intrinsics = intrinsics_from_json(m.at("intrinsics"));
    d.base_seed = m.at("base_seed").get<std::uint64_t>();
    for (const auto& e : m.at("samples")) {
      Sample s;
      s.id = e.at("id").get<std::string>();
      s.split = e.at("split").get<std::string>();
      s.seed = e.at("seed").get<std::uint64_t>();
      s.rgb = io::read_ppm(dir / e.at("rgb").get<std::string>());
      s.depth = io::read_pfm(dir / e.at("depth").get<std::string>());
      if (s.split == "train") {
        d.train.push_back(std::move(s));
      } else if (s.split == "val") {
        d.val.push_back(std::move(s));
      } else {
        throw ContractError("manifest: unknown split '" + s.split + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(dir.string() + "/manifest.json: " + e.what());
  }
  return d;
}

}  // namespace wavedepth
