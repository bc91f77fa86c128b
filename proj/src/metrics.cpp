#include "wavedepth/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "wavedepth/error.hpp"
#include "wavedepth/format.hpp"

namespace wavedepth {
namespace {

double median(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid),
                   v.end());
  const double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  const double lower =
      *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

}  // namespace

MetricSums& MetricSums::operator+=(const MetricSums& o) {
  abs_rel += o.abs_rel;
  sq_rel += o.sq_rel;
  sq_err += o.sq_err;
  sq_log += o.sq_log;
  abs_log10 += o.abs_log10;
  delta += o.delta;
  delta_sq += o.delta_sq;
  within1 += o.within1;
  within2 += o.within2;
  within3 += o.within3;
  count += o.count;
  return *this;
}

MetricsReport MetricsReport::from_sums(const MetricSums& s) {
  if (s.count == 0) throw UnusableFrameError("metrics: no valid pixels");
  const double n = static_cast<double>(s.count);
  MetricsReport r;
  r.sums = s;
  r.n_valid = s.count;
  r.abs_rel = s.abs_rel / n;
  r.sq_rel = s.sq_rel / n;
  r.rmse = std::sqrt(s.sq_err / n);
  r.rmse_log = std::sqrt(s.sq_log / n);
  r.log10 = s.abs_log10 / n;
  const double mean_delta = s.delta / n;
  r.silog = s.delta_sq / n - mean_delta * mean_delta;
  r.delta1 = static_cast<double>(s.within1) / n;
  r.delta2 = static_cast<double>(s.within2) / n;
  r.delta3 = static_cast<double>(s.within3) / n;
  return r;
}

MetricsReport compute_metrics(const Tensor& pred, const Tensor& gt,
                              const ValidMask& mask, MetricsOptions options) {
  if (pred.shape() != gt.shape() || gt.shape() != mask.shape) {
    throw ShapeError("compute_metrics: prediction " + pred.shape().str() +
                     ", ground truth " + gt.shape().str() + " and mask " +
                     mask.shape.str() + " must agree");
  }
  const std::vector<std::size_t> idx = mask.indices();
  if (idx.empty()) throw UnusableFrameError("compute_metrics: empty mask");
  for (std::size_t i : idx) {
    if (!(pred[i] > 0.0) || !(gt[i] > 0.0)) {
      throw DomainError("compute_metrics: non-positive depth at valid pixel " +
                        std::to_string(i));
    }
  }
  double factor = 1.0;
  if (options.median_scaling) {
    std::vector<double> p, g;
    for (std::size_t i : idx) {
      p.push_back(pred[i]);
      g.push_back(gt[i]);
    }
    factor = median(g) / median(p);
  }
  constexpr double t1 = 1.25, t2 = 1.25 * 1.25, t3 = 1.25 * 1.25 * 1.25;
  MetricSums s;
  for (std::size_t i : idx) {
    const double d = gt[i];
    const double p = pred[i] * factor;
    const double err = d - p;
    const double dl = std::log(d) - std::log(p);
    s.abs_rel += std::abs(err) / d;
    s.sq_rel += err * err / d;
    s.sq_err += err * err;
    s.sq_log += dl * dl;
    s.abs_log10 += std::abs(std::log10(d) - std::log10(p));
    s.delta += dl;
    s.delta_sq += dl * dl;
    const double ratio = std::max(d / p, p / d);
    s.within1 += ratio < t1;
    s.within2 += ratio < t2;
    s.within3 += ratio < t3;
    ++s.count;
  }
  return MetricsReport::from_sums(s);
}

MetricsReport aggregate(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw ContractError("aggregate: empty report list");
  MetricSums total;
  for (const MetricsReport& r : reports) total += r.sums;
  return MetricsReport::from_sums(total);
}

std::vector<std::string> metrics_header() {
  return {"abs_rel", "sq_rel", "rmse",   "rmse_log", "log10",  "silog",
          "delta1",  "delta2", "delta3", "n_valid"};
}

std::vector<std::string> metrics_row(const MetricsReport& r) {
  return {format_double(r.abs_rel),  format_double(r.sq_rel),
          format_double(r.rmse),     format_double(r.rmse_log),
          format_double(r.log10),    format_double(r.silog),
          format_double(r.delta1),   format_double(r.delta2),
          format_double(r.delta3),   std::to_string(r.n_valid)};
}

}  // namespace wavedepth
