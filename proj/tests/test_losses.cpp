#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"
#include "wavedepth/error.hpp"
#include "wavedepth/losses.hpp"

using namespace wavedepth;
using namespace wdtest;

namespace {

struct Frame {
  Tensor pred, gt, image;
};

// Depths in [0.5, 4]; about one pixel in six is punched out of range.
Frame random_frame(Rng& rng, Shape s, bool holes) {
  Frame f;
  f.gt = rng.uniform_tensor(s, 0.5, 4.0);
  if (holes) {
    for (double& v : f.gt.values()) {
      const double u = rng.uniform();
      if (u < 0.08) v = 0.0;
      else if (u < 0.12) v = 50.0;
      else if (u < 0.16) v = -1.0;
    }
  }
  f.pred = rng.uniform_tensor(s, 0.3, 5.0);
  f.image = rng.uniform_tensor(Shape(s.n(), 3, s.h(), s.w()), 0.0, 1.0);
  return f;
}

void check_close(double got, double want) { CHECK(close(got, want, 1e-12)); }

}  // namespace

TEST_CASE("valid mask") {
  const ValidMask m = valid_mask(row({0.5, 2.0, 100.0}), 1.0, 50.0);
  CHECK(m.valid == std::vector<std::uint8_t>{0, 1, 0});
  CHECK(m.count() == 1);
  CHECK(valid_mask(row({1.0, 2.0, 3.0}), 1.0, 3.0).count() == 3);
  CHECK(valid_mask(row({0.0, -2.0, 3.0}), 1e-9, 1e9).valid ==
        std::vector<std::uint8_t>{0, 0, 1});
  CHECK_THROWS_AS(valid_mask(row({100.0}), 1.0, 50.0), UnusableFrameError);
  CHECK_THROWS_AS(valid_mask(row({1.0}), 2.0, 1.0), ContractError);
}

TEST_CASE("scale-invariant loss analytic cases") {
  Rng rng(1);
  const Tensor gt = rng.uniform_tensor(Shape(2, 1, 4, 4), 0.5, 4.0);
  const ValidMask m = valid_mask(gt, 0.2, 10.0);
  CHECK(scale_invariant_loss(gt, gt, m, 0.5) == 0.0);
  Tensor e = gt;
  e *= std::exp(1.0);
  CHECK(scale_invariant_loss(e, gt, m, 0.5) == doctest::Approx(0.5).epsilon(1e-14));
  for (double s : {0.3, 0.9, 1.7, 6.0}) {
    Tensor p = gt;
    p *= s;
    const double l = std::log(s);
    check_close(scale_invariant_loss(p, gt, m, 0.5),
                std::abs(l) - 0.5 * l * l);
  }
}

TEST_CASE("gradient matching analytic cases") {
  Rng rng(2);
  const Tensor gt = rng.uniform_tensor(Shape(1, 1, 4, 4), 0.5, 4.0);
  const ValidMask m = valid_mask(gt, 0.2, 10.0);
  CHECK(gradient_matching_loss(gt, gt, m) == 0.0);
  Tensor shifted = gt;
  for (double& v : shifted.values()) v += 0.75;
  CHECK(gradient_matching_loss(shifted, gt, m) <= 1e-15);
}

TEST_CASE("smoothness analytic cases") {
  Rng rng(3);
  const Frame f = random_frame(rng, Shape(2, 1, 5, 6), true);
  const ValidMask m = valid_mask(f.gt, 0.2, 10.0);
  const Tensor flat(f.gt.shape(), 1.3);
  for (SmoothnessMode mode :
       {SmoothnessMode::kImageWeights, SmoothnessMode::kDepthWeights}) {
    CHECK(smoothness_loss(flat, f.image, m, mode) == 0.0);
  }
  // A sharper image lowers the weights and hence the loss.
  Tensor sharp = f.image;
  for (std::size_t i = 0; i < sharp.numel(); ++i) {
    sharp[i] = (i % 2 == 0) ? 1.0 : 0.0;
  }
  const Tensor dull(f.image.shape(), 0.5);
  CHECK(smoothness_loss(f.pred, sharp, m) < smoothness_loss(f.pred, dull, m));
}

TEST_CASE("losses equal scalar-loop oracles") {
  Rng rng(4);
  for (int k = 0; k < 50; ++k) {
    const bool holes = k % 2 == 1;
    const Shape s(1 + rng.index(3), 1, 2 + rng.index(7), 2 + rng.index(7));
    const Frame f = random_frame(rng, s, holes);
    ValidMask m;
    try {
      m = valid_mask(f.gt, 0.2, 10.0);
    } catch (const UnusableFrameError&) {
      continue;
    }
    const double lambda = rng.uniform(0.0, 1.0);
    check_close(scale_invariant_loss(f.pred, f.gt, m, lambda),
                oracle_scale(f.pred, f.gt, 0.2, 10.0, lambda, true));
    check_close(scale_invariant_loss(f.pred, f.gt, m, lambda * 0.5,
                                     ScaleLossForm::kSqrtVariance),
                oracle_scale(f.pred, f.gt, 0.2, 10.0, lambda * 0.5, false));
    const ValidPairs pairs = valid_pairs(m);
    if (pairs.x.empty() && pairs.y.empty()) {
      CHECK_THROWS_AS(gradient_matching_loss(f.pred, f.gt, m),
                      UnusableFrameError);
      continue;
    }
    check_close(gradient_matching_loss(f.pred, f.gt, m),
                oracle_grad(f.pred, f.gt, 0.2, 10.0));
    check_close(smoothness_loss(f.pred, f.image, m,
                                SmoothnessMode::kImageWeights),
                oracle_smooth(f.pred, f.gt, f.image, 0.2, 10.0, true));
    check_close(smoothness_loss(f.pred, f.image, m,
                                SmoothnessMode::kDepthWeights),
                oracle_smooth(f.pred, f.gt, f.image, 0.2, 10.0, false));
  }
}

TEST_CASE("total loss composition") {
  Rng rng(5);
  const Frame f = random_frame(rng, Shape(2, 1, 6, 5), true);
  const ValidMask m = valid_mask(f.gt, 0.2, 10.0);
  Tape tape;
  const LossWeights w;
  const LossBreakdown b =
      total_loss(tape.constant(f.pred), f.gt, f.image, m, w);
  const double ls = oracle_scale(f.pred, f.gt, 0.2, 10.0, w.scale, true);
  const double lg = oracle_grad(f.pred, f.gt, 0.2, 10.0);
  const double lsm = oracle_smooth(f.pred, f.gt, f.image, 0.2, 10.0, true);
  check_close(b.scale, ls);
  check_close(b.grad, lg);
  check_close(b.smooth, lsm);
  check_close(b.total_value, ls + 0.1 * lg + 0.1 * lsm);
  CHECK(b.total.value().item() == b.total_value);

  const LossWeights scale_only{0.5, 0.0, 0.0};
  CHECK(total_loss(tape.constant(f.pred), f.gt, f.image, m, scale_only)
            .total_value == b.scale);

  const LossBreakdown off = total_loss(tape.constant(f.pred), f.gt, f.image,
                                       m, w, SmoothnessMode::kImageWeights,
                                       false);
  CHECK(off.total_value == b.scale);
  CHECK(off.grad == 0.0);
  CHECK(off.smooth == 0.0);

  const LossBreakdown zero =
      total_loss(tape.constant(f.gt), f.gt, f.image, m, w);
  CHECK(zero.scale == 0.0);
  CHECK(zero.grad == 0.0);
  CHECK(zero.smooth > 0.0);
}

TEST_CASE("masked-out pixels do not affect any loss") {
  Rng rng(6);
  Frame f = random_frame(rng, Shape(2, 1, 7, 7), true);
  const ValidMask m = valid_mask(f.gt, 0.2, 10.0);
  Frame g = f;
  for (std::size_t i = 0; i < f.gt.numel(); ++i) {
    if (m[i]) continue;
    g.pred[i] = rng.uniform(0.1, 9.0);
    g.gt[i] = -rng.uniform(0.0, 5.0);
  }
  const LossWeights w;
  for (SmoothnessMode mode :
       {SmoothnessMode::kImageWeights, SmoothnessMode::kDepthWeights}) {
    Tape t1, t2;
    const LossBreakdown a = total_loss(t1.constant(f.pred), f.gt, f.image, m, w, mode);
    const LossBreakdown b = total_loss(t2.constant(g.pred), g.gt, g.image, m, w, mode);
    CHECK(a.scale == b.scale);
    CHECK(a.grad == b.grad);
    CHECK(a.smooth == b.smooth);
    CHECK(a.total_value == b.total_value);
  }
}

TEST_CASE("gradient and smoothness terms ignore a constant offset") {
  Rng rng(7);
  const Frame f = random_frame(rng, Shape(2, 1, 6, 6), false);
  const ValidMask m = valid_mask(f.gt, 0.2, 10.0);
  Tensor shifted = f.pred;
  for (double& v : shifted.values()) v += 2.0;
  check_close(gradient_matching_loss(shifted, f.gt, m),
              gradient_matching_loss(f.pred, f.gt, m));
  for (SmoothnessMode mode :
       {SmoothnessMode::kImageWeights, SmoothnessMode::kDepthWeights}) {
    check_close(smoothness_loss(shifted, f.image, m, mode),
                smoothness_loss(f.pred, f.image, m, mode));
  }
}

TEST_CASE("errors") {
  const Tensor gt(Shape(1, 1, 3, 3), 1.0);
  const ValidMask m = valid_mask(gt, 0.5, 2.0);
  Tensor bad = gt;
  bad[4] = 0.0;
  CHECK_THROWS_AS(scale_invariant_loss(bad, gt, m, 0.5), DomainError);
  CHECK_THROWS_AS(scale_invariant_loss(Tensor(Shape(1, 1, 2, 2), 1.0), gt, m, 0.5),
                  ShapeError);
  CHECK_THROWS_AS(smoothness_loss(gt, Tensor(Shape(1, 1, 3, 3)), m), ShapeError);
  Tensor isolated(Shape(1, 1, 3, 3));
  isolated[0] = 1.0;
  isolated[8] = 1.0;
  const ValidMask lone = valid_mask(isolated, 0.5, 2.0);
  CHECK_THROWS_AS(gradient_matching_loss(isolated, isolated, lone),
                  UnusableFrameError);
}

TEST_CASE("mode and form names round-trip") {
  for (SmoothnessMode mode :
       {SmoothnessMode::kImageWeights, SmoothnessMode::kDepthWeights}) {
    CHECK(parse_smoothness_mode(smoothness_mode_name(mode)) == mode);
  }
  for (ScaleLossForm form : {ScaleLossForm::kLiteral, ScaleLossForm::kSqrtVariance}) {
    CHECK(parse_scale_loss_form(scale_loss_form_name(form)) == form);
  }
  CHECK_THROWS_AS(parse_smoothness_mode("eq8"), ContractError);
}
