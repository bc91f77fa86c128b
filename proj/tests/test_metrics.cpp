#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"
#include "wavedepth/error.hpp"
#include "wavedepth/metrics.hpp"

using namespace wavedepth;
using wdtest::MetricOracle;
using wdtest::oracle_metrics;

namespace {

void check_matches(const MetricsReport& r, const MetricOracle& o) {
  const double tol = 1e-12;
  CHECK(r.abs_rel == doctest::Approx(o.abs_rel).epsilon(tol));
  CHECK(r.sq_rel == doctest::Approx(o.sq_rel).epsilon(tol));
  CHECK(r.rmse == doctest::Approx(o.rmse).epsilon(tol));
  CHECK(r.rmse_log == doctest::Approx(o.rmse_log).epsilon(tol));
  CHECK(r.log10 == doctest::Approx(o.log10).epsilon(tol));
  CHECK(std::abs(r.silog - o.silog) <= tol * std::max(1.0, o.silog));
  CHECK(r.delta1 == o.delta1);
  CHECK(r.delta2 == o.delta2);
  CHECK(r.delta3 == o.delta3);
}

}  // namespace

TEST_CASE("3x3 frame with one hole matches hand values") {
  const Tensor gt(Shape(1, 1, 3, 3), {1, 2, 3, 4, 0, 6, 7, 8, 9});
  const Tensor pred(Shape(1, 1, 3, 3), {1.1, 2, 2.5, 4, 5, 6.6, 7, 9, 9});
  const ValidMask m = valid_mask(gt, 0.5, 10.0);
  const MetricsReport r = compute_metrics(pred, gt, m);
  CHECK(r.n_valid == 8);
  check_matches(r, oracle_metrics(pred, gt, 0.5, 10.0));
  const double abs_rel = (0.1 / 1 + 0.5 / 3 + 0.6 / 6 + 1.0 / 8) / 8;
  CHECK(r.abs_rel == doctest::Approx(abs_rel).epsilon(1e-12));
  CHECK(r.delta1 == 1.0);
}

TEST_CASE("metrics equal the loop oracle on random frames") {
  Rng rng(1);
  for (int k = 0; k < 50; ++k) {
    const Shape s(1 + rng.index(2), 1, 1 + rng.index(9), 1 + rng.index(9));
    Tensor gt = rng.uniform_tensor(s, 0.5, 8.0);
    for (double& v : gt.values()) {
      if (rng.uniform() < 0.15) v = 0.0;
    }
    gt[0] = 2.0;
    Tensor pred = gt;
    for (double& v : pred.values()) v = std::max(v, 0.5) * std::exp(0.4 * rng.normal());
    const ValidMask m = valid_mask(gt, 0.2, 10.0);
    check_matches(compute_metrics(pred, gt, m), oracle_metrics(pred, gt, 0.2, 10.0));
  }
}

TEST_CASE("perfect prediction") {
  Rng rng(2);
  const Tensor gt = rng.uniform_tensor(Shape(2, 1, 5, 5), 0.5, 4.0);
  const ValidMask m = valid_mask(gt, 0.2, 10.0);
  const MetricsReport r = compute_metrics(gt, gt, m);
  CHECK(r.abs_rel == 0.0);
  CHECK(r.rmse == 0.0);
  CHECK(r.silog == 0.0);
  CHECK(r.delta1 == 1.0);
  CHECK(r.n_valid == 50);
}

TEST_CASE("prediction 1.25 times the truth sits on the first threshold") {
  const Tensor gt(Shape(1, 1, 2, 2), {0.5, 1.0, 2.0, 4.0});
  Tensor pred = gt;
  pred *= 1.25;
  const MetricsReport r = compute_metrics(pred, gt, valid_mask(gt, 0.1, 10.0));
  CHECK(r.delta1 == 0.0);
  CHECK(r.delta2 == 1.0);
  CHECK(r.delta3 == 1.0);
  CHECK(r.abs_rel == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("uniform scale error") {
  Rng rng(3);
  const Tensor gt = rng.uniform_tensor(Shape(1, 1, 6, 6), 0.5, 4.0);
  const ValidMask m = valid_mask(gt, 0.2, 10.0);
  for (double s : {0.5, 0.9, 1.1, 3.0}) {
    Tensor pred = gt;
    pred *= s;
    const MetricsReport r = compute_metrics(pred, gt, m);
    CHECK(r.abs_rel == doctest::Approx(std::abs(s - 1.0)).epsilon(1e-12));
    CHECK(r.rmse_log == doctest::Approx(std::abs(std::log(s))).epsilon(1e-12));
    CHECK(r.silog <= 1e-15);
    const MetricsReport med = compute_metrics(pred, gt, m, {true});
    CHECK(med.abs_rel <= 1e-12);
  }
}

TEST_CASE("aggregation is pixel-weighted") {
  const Tensor gt_a(Shape(1, 1, 1, 1), {1.0});
  const Tensor pred_a(Shape(1, 1, 1, 1), {2.0});
  const Tensor gt_b(Shape(1, 1, 1, 3), {1.0, 1.0, 1.0});
  const MetricsReport a = compute_metrics(pred_a, gt_a, valid_mask(gt_a, 0.1, 10));
  const MetricsReport b = compute_metrics(gt_b, gt_b, valid_mask(gt_b, 0.1, 10));
  const MetricsReport both[] = {a, b};
  const MetricsReport agg = aggregate(both);
  CHECK(agg.n_valid == 4);
  CHECK(agg.abs_rel == doctest::Approx(0.25));
  CHECK(agg.delta1 == doctest::Approx(0.75));
  const MetricsReport one[] = {a};
  CHECK(aggregate(one).abs_rel == a.abs_rel);
  CHECK_THROWS_AS(aggregate(std::span<const MetricsReport>{}), ContractError);
}

TEST_CASE("masked-out pixels are never read") {
  Rng rng(4);
  Tensor gt = rng.uniform_tensor(Shape(1, 1, 6, 6), 0.5, 4.0);
  for (std::size_t i = 0; i < gt.numel(); i += 5) gt[i] = 0.0;
  const ValidMask m = valid_mask(gt, 0.2, 10.0);
  const Tensor pred = rng.uniform_tensor(gt.shape(), 0.5, 4.0);
  Tensor other = pred;
  for (std::size_t i = 0; i < gt.numel(); i += 5) other[i] = -3.0;
  const MetricsReport a = compute_metrics(pred, gt, m);
  const MetricsReport b = compute_metrics(other, gt, m);
  CHECK(a.abs_rel == b.abs_rel);
  CHECK(a.rmse == b.rmse);
  CHECK(a.silog == b.silog);
}

TEST_CASE("threshold accuracies are monotone") {
  Rng rng(5);
  for (int k = 0; k < 20; ++k) {
    const Tensor gt = rng.uniform_tensor(Shape(1, 1, 7, 7), 0.5, 4.0);
    Tensor pred = gt;
    for (double& v : pred.values()) v *= std::exp(0.5 * rng.normal());
    const MetricsReport r = compute_metrics(pred, gt, valid_mask(gt, 0.2, 10));
    CHECK(r.delta1 <= r.delta2);
    CHECK(r.delta2 <= r.delta3);
  }
}

TEST_CASE("errors and CSV row") {
  const Tensor gt(Shape(1, 1, 1, 2), {1.0, 2.0});
  const ValidMask m = valid_mask(gt, 0.1, 10);
  CHECK_THROWS_AS(compute_metrics(Tensor(Shape(1, 1, 1, 3), 1.0), gt, m),
                  ShapeError);
  CHECK_THROWS_AS(compute_metrics(Tensor(Shape(1, 1, 1, 2), {1.0, 0.0}), gt, m),
                  DomainError);
  const MetricsReport r = compute_metrics(gt, gt, m);
  CHECK(metrics_row(r).size() == metrics_header().size());
  CHECK(metrics_header().front() == "abs_rel");
  CHECK(metrics_row(r).back() == "2");
}
