#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "test_util.hpp"
#include "wavedepth/error.hpp"
#include "wavedepth/io.hpp"
#include "wavedepth/spectral.hpp"
#include "wavedepth/synthdata.hpp"

using namespace wavedepth;

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = 0.5 * (i + j);
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const std::vector<double> ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_CASE("an unfolded tube has mirror-symmetric depth") {
  SceneParams p;
  p.side = 32;
  p.fold_amplitude = 0.0;
  const Scene s = generate_scene(p);
  for (std::size_t y = 0; y < 32; ++y) {
    for (std::size_t x = 0; x < 32; ++x) {
      const double d = s.depth.at(0, 0, y, x);
      CHECK(std::abs(d - s.depth.at(0, 0, y, 31 - x)) <= 1e-9);
      CHECK(std::abs(d - s.depth.at(0, 0, 31 - y, x)) <= 1e-9);
      CHECK(std::abs(d - s.depth.at(0, 0, x, y)) <= 1e-9);
    }
  }
}

TEST_CASE("depth stays in range and the lumen reaches the far plane") {
  SceneParams p;
  p.side = 48;
  p.seed = 5;
  const Scene s = generate_scene(p);
  double lo = 1e9, hi = 0;
  for (double d : s.depth.values()) {
    lo = std::min(lo, d);
    hi = std::max(hi, d);
  }
  CHECK(lo >= p.d_min);
  CHECK(hi == p.d_max);
  CHECK(s.depth.at(0, 0, 24, 24) == p.d_max);
  for (double v : s.rgb.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(s.intrinsics.cx == 23.5);
  CHECK(s.intrinsics.fx == doctest::Approx(24.0));
}

TEST_CASE("brightness falls with depth") {
  SceneParams p;
  p.side = 64;
  p.seed = 8;
  const Scene s = generate_scene(p);
  const Tensor gray = to_grayscale(s.rgb);
  std::vector<double> b, d;
  for (std::size_t i = 0; i < gray.numel(); ++i) {
    if (gray[i] >= 1.0) continue;
    b.push_back(gray[i]);
    d.push_back(s.depth[i]);
  }
  CHECK(spearman(b, d) <= -0.99);
}

TEST_CASE("blur lowers high-frequency energy monotonically") {
  SceneParams p;
  p.side = 64;
  p.seed = 2;
  double previous = 1e300;
  for (double sigma : {0.0, 0.5, 1.0, 2.0, 4.0}) {
    p.blur_sigma = sigma;
    const Tensor gray = to_grayscale(generate_scene(p).rgb);
    double e = 0.0;
    for (std::size_t y = 0; y < 64; ++y) {
      for (std::size_t x = 0; x + 1 < 64; ++x) {
        const double g = gray.at(0, 0, y, x + 1) - gray.at(0, 0, y, x);
        e += g * g;
      }
    }
    CHECK(e < previous);
    previous = e;
  }
  CHECK(gaussian_blur(Tensor(Shape(1, 3, 8, 8), 0.4), 1.5).max_abs() ==
        doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("speculars saturate pixels") {
  SceneParams p;
  p.side = 64;
  p.seed = 3;
  p.falloff = 4.0;
  const Scene plain = generate_scene(p);
  p.speculars = 5;
  const Scene spec = generate_scene(p);
  CHECK(spec.depth.identical(plain.depth));
  auto saturated = [](const Tensor& t) {
    return std::count_if(t.values().begin(), t.values().end(),
                         [](double v) { return v >= 0.999; });
  };
  CHECK(saturated(spec.rgb) > saturated(plain.rgb));
}

TEST_CASE("datasets are deterministic with disjoint split seeds") {
  SceneParams p;
  p.side = 16;
  const Dataset a = make_dataset(p, 4, 2, 77);
  const Dataset b = make_dataset(p, 4, 2, 77);
  REQUIRE(a.train.size() == 4);
  REQUIRE(a.val.size() == 2);
  std::set<std::uint64_t> seeds;
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a.train[i].rgb.identical(b.train[i].rgb));
    CHECK(a.train[i].depth.identical(b.train[i].depth));
    CHECK(a.train[i].split == "train");
    seeds.insert(a.train[i].seed);
  }
  for (const Sample& s : a.val) {
    CHECK(s.split == "val");
    seeds.insert(s.seed);
  }
  CHECK(seeds.size() == 6);
  CHECK_FALSE(a.train[0].rgb.identical(a.train[1].rgb));
  CHECK_FALSE(make_dataset(p, 4, 2, 78).train[0].rgb.identical(a.train[0].rgb));
  for (double v : a.train[0].rgb.values()) CHECK(io::quantize_u8(v) == v);
  CHECK(&a.split("val") == &a.val);
  CHECK_THROWS_AS(a.split("test"), ContractError);
}

TEST_CASE("datasets round-trip through disk") {
  SceneParams p;
  p.side = 16;
  const Dataset a = make_dataset(p, 2, 1, 5);
  wdtest::TempDir dir("synth");
  write_dataset(a, dir / "data");
  CHECK_THROWS_AS(write_dataset(a, dir / "data"), IoError);
  const Dataset b = load_dataset(dir / "data");
  REQUIRE(b.train.size() == 2);
  REQUIRE(b.val.size() == 1);
  CHECK(b.base_seed == 5);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(b.train[i].id == a.train[i].id);
    CHECK(b.train[i].rgb.identical(a.train[i].rgb));
    CHECK(b.train[i].depth.identical(a.train[i].depth));
  }
  CHECK(b.intrinsics.fx == a.intrinsics.fx);
}

TEST_CASE("scene JSON is strict and validated") {
  SceneParams p;
  p.blur_sigma = 1.5;
  p.seed = 9;
  const SceneParams q = scene_from_json(scene_to_json(p));
  CHECK(scene_to_json(q) == scene_to_json(p));
  nlohmann::json j = scene_to_json(p);
  j["blur"] = 2;
  try {
    scene_from_json(j);
    FAIL("unknown key accepted");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("blur") != std::string::npos);
  }
  SceneParams bad;
  bad.side = 15;
  CHECK_THROWS_AS(generate_scene(bad), ContractError);
  bad = SceneParams{};
  bad.tube_radius = 0.0;
  CHECK_THROWS_AS(validate(bad), ContractError);
  bad = SceneParams{};
  bad.d_max = bad.d_min;
  CHECK_THROWS_AS(validate(bad), ContractError);
}
